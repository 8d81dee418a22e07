#pragma once

#include <string>

#include "httplib.h"
#include "json.hpp"

#include "hatelab/annotation.hpp"

namespace hatelab {

// HTTP surface over an AnnotationStore.
//
//   GET  /queue?role=R      {"role": R, "post_ids": [...]}
//   POST /score             body {"post_id", "role", "score"} -> record as seen by role
//   GET  /record/{post_id}  record; with ?role=R, the view R is allowed before resolution
//   GET  /export            {"count": n, "records": [{"post_id", "label", "resolved_by"}]}
//   GET  /posts/{post_id}   {"id", "text"}
//
// Errors carry {"error": message}: 400 bad input or score, 404 unknown post,
// 409 double submission or third review on a non-disputed record.
class AnnotationService {
 public:
  explicit AnnotationService(AnnotationStore& store) : store_(store) {
    // httplib's default adds SO_REUSEPORT, which lets a second server share a
    // busy port silently.
    server_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof yes);
    });
    install_routes();
  }

  httplib::Server& server() { return server_; }

  // Returns the bound port; throws IoError when the port is unavailable.
  int bind(const std::string& host, int port) {
    if (port == 0) {
      const int p = server_.bind_to_any_port(host);
      if (p < 0) throw IoError("cannot bind " + host + ": no free port");
      return p;
    }
    if (!server_.bind_to_port(host, port)) {
      throw IoError("cannot bind " + host + ":" + std::to_string(port) + " (port in use?)");
    }
    return port;
  }

  // Blocks until stop().
  void serve() { server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

 private:
  static void reply(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void reply_error(httplib::Response& res, int status, const std::string& msg) {
    nlohmann::ordered_json j;
    j["error"] = msg;
    reply(res, status, j);
  }

  static int status_for(AnnotationErrc code) {
    switch (code) {
      case AnnotationErrc::InvalidScore: return 400;
      case AnnotationErrc::UnknownPost: return 404;
      case AnnotationErrc::DoubleSubmission:
      case AnnotationErrc::WrongState: return 409;
    }
    return 500;
  }

  template <typename F>
  static void guarded(httplib::Response& res, F&& body) {
    try {
      body();
    } catch (const AnnotationError& e) {
      reply_error(res, status_for(e.code()), e.what());
    } catch (const nlohmann::json::exception& e) {
      reply_error(res, 400, std::string("malformed request body: ") + e.what());
    } catch (const std::exception& e) {
      reply_error(res, 500, e.what());
    }
  }

  void install_routes() {
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                 {"Access-Control-Allow-Headers", "Content-Type"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.Get("/queue", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto role = parse_role(req.get_param_value("role"));
        if (!role) {
          reply_error(res, 400, "role must be one of Primary1, Primary2, ThirdReviewer");
          return;
        }
        nlohmann::ordered_json j;
        j["role"] = to_string(*role);
        j["post_ids"] = store_.pending_queue(*role);
        reply(res, 200, j);
      });
    });

    server_.Post("/score", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = nlohmann::json::parse(req.body);
        if (!body.is_object() || !body.contains("post_id") || !body.contains("role") || !body.contains("score")) {
          reply_error(res, 400, "body needs post_id, role and score");
          return;
        }
        const auto role = parse_role(body.at("role").get<std::string>());
        if (!role) {
          reply_error(res, 400, "role must be one of Primary1, Primary2, ThirdReviewer");
          return;
        }
        const auto& score = body.at("score");
        if (!score.is_number_integer()) {
          reply_error(res, 400, "score must be an integer in [0,10]");
          return;
        }
        const auto s = score.get<long long>();
        if (s < AnnotationConfig::kScoreMin || s > AnnotationConfig::kScoreMax) {
          reply_error(res, 400, "score must be an integer in [0,10], got " + std::to_string(s));
          return;
        }
        const auto rec = store_.submit_score(body.at("post_id").get<std::string>(),
                                             AnnotatorId{std::string(to_string(*role)), *role}, static_cast<int>(s));
        reply(res, 200, to_json(redact_for(rec, *role)));
      });
    });

    server_.Get(R"(/record/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        auto rec = store_.record(req.matches[1].str());
        if (req.has_param("role")) {
          const auto role = parse_role(req.get_param_value("role"));
          if (!role) {
            reply_error(res, 400, "role must be one of Primary1, Primary2, ThirdReviewer");
            return;
          }
          rec = redact_for(std::move(rec), *role);
        }
        reply(res, 200, to_json(rec));
      });
    });

    server_.Get(R"(/posts/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto& p = store_.post(req.matches[1].str());
        nlohmann::ordered_json j;
        j["id"] = p.id;
        j["text"] = p.text;
        reply(res, 200, j);
      });
    });

    server_.Get("/export", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (const auto& r : store_.records()) {
          if (r.state != RecordState::Resolved) continue;
          nlohmann::ordered_json row;
          row["post_id"] = r.post_id;
          row["label"] = *r.final_label ? 1 : 0;
          row["resolved_by"] = to_string(r.resolved_by);
          rows.push_back(std::move(row));
        }
        nlohmann::ordered_json j;
        j["count"] = rows.size();
        j["records"] = std::move(rows);
        reply(res, 200, j);
      });
    });
  }

  AnnotationStore& store_;
  httplib::Server server_;
};

}  // namespace hatelab
