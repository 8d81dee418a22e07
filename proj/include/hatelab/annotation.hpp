#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "hatelab/corpus.hpp"
#include "hatelab/error.hpp"

namespace hatelab {

enum class Role { Primary1, Primary2, ThirdReviewer };
enum class RecordState { PendingFirst, PendingSecond, Disputed, Resolved };
enum class Resolution { None, Consensus, ThirdReviewer };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::Primary1: return "Primary1";
    case Role::Primary2: return "Primary2";
    case Role::ThirdReviewer: return "ThirdReviewer";
  }
  return "?";
}

inline std::string_view to_string(RecordState s) {
  switch (s) {
    case RecordState::PendingFirst: return "PendingFirst";
    case RecordState::PendingSecond: return "PendingSecond";
    case RecordState::Disputed: return "Disputed";
    case RecordState::Resolved: return "Resolved";
  }
  return "?";
}

inline std::string_view to_string(Resolution r) {
  switch (r) {
    case Resolution::None: return "None";
    case Resolution::Consensus: return "Consensus";
    case Resolution::ThirdReviewer: return "ThirdReviewer";
  }
  return "?";
}

inline std::optional<Role> parse_role(std::string_view s) {
  if (s == "Primary1") return Role::Primary1;
  if (s == "Primary2") return Role::Primary2;
  if (s == "ThirdReviewer") return Role::ThirdReviewer;
  return std::nullopt;
}

// Rank in the partial order PendingFirst < PendingSecond < {Disputed, Resolved},
// Disputed < Resolved.
inline int state_rank(RecordState s) {
  switch (s) {
    case RecordState::PendingFirst: return 0;
    case RecordState::PendingSecond: return 1;
    case RecordState::Disputed: return 2;
    case RecordState::Resolved: return 3;
  }
  return -1;
}

struct AnnotationConfig {
  static constexpr int kScoreMin = 0;
  static constexpr int kScoreMax = 10;
  int theta = 6;

  void validate() const {
    if (theta < kScoreMin || theta > kScoreMax) {
      throw DomainError("theta must lie in [0,10], got " + std::to_string(theta));
    }
  }
  bool label_for(int score) const { return score >= theta; }
};

struct AnnotatorId {
  std::string id;
  Role role = Role::Primary1;
};

struct AnnotationRecord {
  std::string post_id;
  std::optional<int> score1, score2, score3;
  std::optional<bool> label1, label2;
  std::optional<bool> final_label;
  RecordState state = RecordState::PendingFirst;
  Resolution resolved_by = Resolution::None;

  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

enum class AnnotationErrc { InvalidScore, UnknownPost, DoubleSubmission, WrongState };

class AnnotationError : public DomainError {
 public:
  AnnotationError(AnnotationErrc code, const std::string& what) : DomainError(what), code_(code) {}
  AnnotationErrc code() const { return code_; }

 private:
  AnnotationErrc code_;
};

// The transition function. Pure: returns the successor record or throws.
inline AnnotationRecord apply_score(AnnotationRecord rec, Role role, int score, const AnnotationConfig& cfg) {
  if (score < AnnotationConfig::kScoreMin || score > AnnotationConfig::kScoreMax) {
    throw AnnotationError(AnnotationErrc::InvalidScore,
                          "score must be an integer in [0,10], got " + std::to_string(score));
  }
  const bool label = cfg.label_for(score);
  switch (role) {
    case Role::Primary1:
    case Role::Primary2: {
      auto& slot = role == Role::Primary1 ? rec.score1 : rec.score2;
      auto& lab = role == Role::Primary1 ? rec.label1 : rec.label2;
      if (slot) {
        throw AnnotationError(AnnotationErrc::DoubleSubmission,
                              std::string(to_string(role)) + " already scored post " + rec.post_id);
      }
      slot = score;
      lab = label;
      if (rec.score1 && rec.score2) {
        if (*rec.label1 == *rec.label2) {
          rec.state = RecordState::Resolved;
          rec.resolved_by = Resolution::Consensus;
          rec.final_label = *rec.label1;
        } else {
          rec.state = RecordState::Disputed;
        }
      } else {
        rec.state = RecordState::PendingSecond;
      }
      return rec;
    }
    case Role::ThirdReviewer: {
      if (rec.score3) {
        throw AnnotationError(AnnotationErrc::DoubleSubmission, "ThirdReviewer already scored post " + rec.post_id);
      }
      if (rec.state != RecordState::Disputed) {
        throw AnnotationError(AnnotationErrc::WrongState, "post " + rec.post_id + " is " +
                                                              std::string(to_string(rec.state)) +
                                                              ", third review needs Disputed");
      }
      rec.score3 = score;
      rec.final_label = label;
      rec.state = RecordState::Resolved;
      rec.resolved_by = Resolution::ThirdReviewer;
      return rec;
    }
  }
  return rec;
}

struct ScoreTriple {
  int score1 = 0;
  int score2 = 0;
  std::optional<int> score3;
};

// Storage-free form of the labeling loop: consensus gives the shared label, a
// dispute with a third score gives that score's label, a dispute without one
// stays unlabeled.
inline std::vector<std::optional<bool>> annotate_labels_batch(std::span<const ScoreTriple> scores,
                                                              const AnnotationConfig& cfg = {}) {
  cfg.validate();
  std::vector<std::optional<bool>> out;
  out.reserve(scores.size());
  for (const auto& s : scores) {
    AnnotationRecord rec;
    rec = apply_score(std::move(rec), Role::Primary1, s.score1, cfg);
    rec = apply_score(std::move(rec), Role::Primary2, s.score2, cfg);
    if (s.score3) {
      if (rec.state == RecordState::Disputed) {
        rec = apply_score(std::move(rec), Role::ThirdReviewer, *s.score3, cfg);
      } else if (*s.score3 < AnnotationConfig::kScoreMin || *s.score3 > AnnotationConfig::kScoreMax) {
        throw AnnotationError(AnnotationErrc::InvalidScore,
                              "score must be an integer in [0,10], got " + std::to_string(*s.score3));
      }
    }
    out.push_back(rec.final_label);
  }
  return out;
}

struct ScoreEvent {
  std::string post_id;
  Role role = Role::Primary1;
  int score = 0;
  std::uint64_t seq = 0;

  friend bool operator==(const ScoreEvent&, const ScoreEvent&) = default;
};

inline std::string to_json_line(const ScoreEvent& e) {
  nlohmann::ordered_json j;
  j["post_id"] = e.post_id;
  j["role"] = to_string(e.role);
  j["score"] = e.score;
  j["seq"] = e.seq;
  return j.dump();
}

inline ScoreEvent parse_event_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  ScoreEvent e;
  e.post_id = j.at("post_id").get<std::string>();
  const auto role = parse_role(j.at("role").get<std::string>());
  if (!role) throw ParseError("unknown role '" + j.at("role").get<std::string>() + "'");
  e.role = *role;
  e.score = j.at("score").get<int>();
  e.seq = j.at("seq").get<std::uint64_t>();
  return e;
}

// Append-only file of score events. Each append is fsync'd before returning.
class EventLog {
 public:
  explicit EventLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError(path_.string() + ": cannot open event log: " + std::strerror(errno));
  }
  EventLog(const EventLog&) = delete;
  EventLog& operator=(const EventLog&) = delete;
  ~EventLog() {
    if (fd_ >= 0) ::close(fd_);
  }

  void append(const ScoreEvent& e) {
    const std::string line = to_json_line(e) + "\n";
    std::size_t off = 0;
    while (off < line.size()) {
      const auto n = ::write(fd_, line.data() + off, line.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw IoError(path_.string() + ": write failed: " + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
    if (::fsync(fd_) != 0) throw IoError(path_.string() + ": fsync failed: " + std::strerror(errno));
  }

  const std::filesystem::path& path() const { return path_; }

  // Missing file reads as an empty log.
  static std::vector<std::pair<std::size_t, ScoreEvent>> read(const std::filesystem::path& path) {
    std::vector<std::pair<std::size_t, ScoreEvent>> events;
    std::ifstream in(path);
    if (!in) return events;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        events.emplace_back(line_no, parse_event_line(line));
      } catch (const std::exception& ex) {
        throw ParseError("corrupt state file " + path.string() + ": line " + std::to_string(line_no) + ": " +
                         ex.what());
      }
    }
    return events;
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

// Event-sourced store of annotation records. Writers are serialised by a
// single exclusive lock, which linearises every post; readers take a shared
// lock and see a consistent snapshot.
class AnnotationStore {
 public:
  explicit AnnotationStore(std::vector<Post> posts, AnnotationConfig cfg = {})
      : posts_(std::move(posts)), cfg_(cfg) {
    cfg_.validate();
    records_.reserve(posts_.size());
    for (std::size_t i = 0; i < posts_.size(); ++i) {
      if (!index_.emplace(posts_[i].id, i).second) throw DomainError("duplicate id: " + posts_[i].id);
      AnnotationRecord r;
      r.post_id = posts_[i].id;
      records_.push_back(std::move(r));
    }
  }

  // Replays an existing log (if any) and appends subsequent scores to it.
  static AnnotationStore open(std::vector<Post> posts, AnnotationConfig cfg, const std::filesystem::path& log_path) {
    AnnotationStore store(std::move(posts), cfg);
    for (const auto& [line_no, ev] : EventLog::read(log_path)) {
      try {
        if (ev.seq <= store.last_seq_) throw DomainError("sequence number not increasing");
        store.apply_locked(ev.post_id, ev.role, ev.score);
        store.events_.push_back(ev);
        store.last_seq_ = ev.seq;
      } catch (const Error& ex) {
        throw ParseError("corrupt state file " + log_path.string() + ": event seq " + std::to_string(ev.seq) +
                         " (line " + std::to_string(line_no) + ", post " + ev.post_id + "): " + ex.what());
      }
    }
    store.log_ = std::make_unique<EventLog>(log_path);
    return store;
  }

  AnnotationStore(AnnotationStore&& o) noexcept
      : posts_(std::move(o.posts_)),
        cfg_(o.cfg_),
        index_(std::move(o.index_)),
        records_(std::move(o.records_)),
        events_(std::move(o.events_)),
        last_seq_(o.last_seq_),
        log_(std::move(o.log_)) {}

  AnnotationRecord submit_score(std::string_view post_id, const AnnotatorId& annotator, int score) {
    std::unique_lock lock(mu_);
    const auto idx = find_index(post_id);
    auto next = apply_score(records_[idx], annotator.role, score, cfg_);
    ScoreEvent ev{std::string(post_id), annotator.role, score, last_seq_ + 1};
    if (log_) log_->append(ev);
    records_[idx] = std::move(next);
    events_.push_back(std::move(ev));
    ++last_seq_;
    return records_[idx];
  }

  std::vector<std::string> pending_queue(Role role) const {
    std::shared_lock lock(mu_);
    std::vector<std::string> out;
    for (const auto& r : records_) {
      const bool open = role == Role::Primary1   ? !r.score1.has_value()
                        : role == Role::Primary2 ? !r.score2.has_value()
                                                 : r.state == RecordState::Disputed;
      if (open) out.push_back(r.post_id);
    }
    return out;
  }

  AnnotationRecord record(std::string_view post_id) const {
    std::shared_lock lock(mu_);
    return records_[find_index(post_id)];
  }

  const Post& post(std::string_view post_id) const {
    std::shared_lock lock(mu_);
    return posts_[find_index(post_id)];
  }

  std::vector<AnnotationRecord> records() const {
    std::shared_lock lock(mu_);
    return records_;
  }

  std::vector<ScoreEvent> events() const {
    std::shared_lock lock(mu_);
    return events_;
  }

  // Resolved records in ingestion order.
  LabeledCorpus export_labels() const {
    std::shared_lock lock(mu_);
    LabeledCorpus out;
    for (std::size_t i = 0; i < records_.size(); ++i) {
      if (records_[i].state == RecordState::Resolved) {
        out.posts.push_back(posts_[i]);
        out.labels.push_back(*records_[i].final_label);
      }
    }
    return out;
  }

  // Full event log to `path`, overwriting it.
  void save(const std::filesystem::path& path) const {
    std::shared_lock lock(mu_);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path.string() + ": cannot open for writing");
    for (const auto& e : events_) out << to_json_line(e) << '\n';
    if (!out) throw IoError(path.string() + ": write failed");
  }

  const AnnotationConfig& config() const { return cfg_; }
  std::size_t size() const { return posts_.size(); }

 private:
  std::size_t find_index(std::string_view post_id) const {
    const auto it = index_.find(std::string(post_id));
    if (it == index_.end()) throw AnnotationError(AnnotationErrc::UnknownPost, "unknown post: " + std::string(post_id));
    return it->second;
  }

  void apply_locked(const std::string& post_id, Role role, int score) {
    const auto idx = find_index(post_id);
    records_[idx] = apply_score(records_[idx], role, score, cfg_);
  }

  std::vector<Post> posts_;
  AnnotationConfig cfg_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<AnnotationRecord> records_;
  std::vector<ScoreEvent> events_;
  std::uint64_t last_seq_ = 0;
  std::unique_ptr<EventLog> log_;
  mutable std::shared_mutex mu_;
};

inline nlohmann::ordered_json to_json(const AnnotationRecord& r) {
  nlohmann::ordered_json j;
  j["post_id"] = r.post_id;
  const auto opt = [](const auto& o) { return o ? nlohmann::ordered_json(*o) : nlohmann::ordered_json(nullptr); };
  j["score1"] = opt(r.score1);
  j["score2"] = opt(r.score2);
  j["score3"] = opt(r.score3);
  j["label1"] = opt(r.label1);
  j["label2"] = opt(r.label2);
  j["final_label"] = opt(r.final_label);
  j["state"] = to_string(r.state);
  j["resolved_by"] = to_string(r.resolved_by);
  return j;
}

// What `viewer` may see before the record is resolved: a primary sees only
// its own slot, the third reviewer sees neither primary score. Once resolved
// the full record is visible to everyone.
inline AnnotationRecord redact_for(AnnotationRecord r, Role viewer) {
  if (r.state == RecordState::Resolved) return r;
  if (viewer != Role::Primary1) {
    r.score1.reset();
    r.label1.reset();
  }
  if (viewer != Role::Primary2) {
    r.score2.reset();
    r.label2.reset();
  }
  return r;
}

}  // namespace hatelab
