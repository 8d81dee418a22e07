#pragma once

#include <stdexcept>
#include <string>

namespace hatelab {

// Base for every error the library raises. Callers that only need a message
// catch this; the CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition or domain violation (bad score, bad fraction, single-class data).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Malformed input content: a bad JSONL line, an inconsistent embedding row.
class ParseError : public Error {
 public:
  using Error::Error;
};

// File system failures: missing file, unwritable output, port in use.
class IoError : public Error {
 public:
  using Error::Error;
};

// Training blew up (non-finite loss).
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace hatelab
