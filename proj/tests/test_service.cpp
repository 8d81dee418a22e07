#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <memory>
#include <thread>

#include "hatelab/annotation_service.hpp"

using namespace hatelab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override { start(fs::temp_directory_path() / "hatelab_service_test.log", true); }

  void TearDown() override { stop(); }

  void start(const fs::path& log, bool fresh) {
    log_ = log;
    if (fresh) fs::remove(log_);
    std::vector<Post> posts;
    for (const char* id : {"a", "b", "c"}) posts.push_back(make_post(id, std::string("Post ") + id + " text"));
    store_ = std::make_unique<AnnotationStore>(AnnotationStore::open(posts, {}, log_));
    service_ = std::make_unique<AnnotationService>(*store_);
    port_ = service_->bind("127.0.0.1", 0);
    thread_ = std::thread([this] { service_->serve(); });
    service_->wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }

  void stop() {
    if (!service_) return;
    service_->stop();
    thread_.join();
    client_.reset();
    service_.reset();
    store_.reset();
  }

  std::pair<int, json> get(const std::string& path) {
    auto r = client_->Get(path);
    EXPECT_TRUE(r) << path;
    return {r->status, json::parse(r->body)};
  }

  std::pair<int, json> post_score(const json& body) {
    auto r = client_->Post("/score", body.dump(), "application/json");
    EXPECT_TRUE(r);
    return {r->status, json::parse(r->body)};
  }

  std::pair<int, json> score(const std::string& id, const std::string& role, int s) {
    return post_score({{"post_id", id}, {"role", role}, {"score", s}});
  }

  fs::path log_;
  int port_ = 0;
  std::unique_ptr<AnnotationStore> store_;
  std::unique_ptr<AnnotationService> service_;
  std::unique_ptr<httplib::Client> client_;
  std::thread thread_;
};

}  // namespace

TEST_F(ServiceTest, QueueListsAllPostsInitially) {
  auto [status, body] = get("/queue?role=Primary1");
  EXPECT_EQ(status, 200);
  EXPECT_EQ(body["post_ids"], json({"a", "b", "c"}));
  EXPECT_EQ(get("/queue?role=ThirdReviewer").second["post_ids"], json::array());
  EXPECT_EQ(get("/queue?role=Boss").first, 400);
  EXPECT_EQ(get("/queue").first, 400);
}

TEST_F(ServiceTest, StatusCodes) {
  EXPECT_EQ(score("a", "Primary1", 11).first, 400);
  EXPECT_EQ(score("a", "Primary1", -1).first, 400);
  EXPECT_EQ(post_score({{"post_id", "a"}, {"role", "Primary1"}, {"score", 5.5}}).first, 400);
  EXPECT_EQ(post_score({{"post_id", "a"}, {"role", "Primary1"}}).first, 400);
  EXPECT_EQ(post_score({{"post_id", "a"}, {"role", "Nobody"}, {"score", 3}}).first, 400);
  auto bad = client_->Post("/score", "{not json", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(score("zzz", "Primary1", 3).first, 404);
  EXPECT_EQ(get("/record/zzz").first, 404);
  EXPECT_EQ(get("/posts/zzz").first, 404);
  EXPECT_EQ(score("a", "Primary1", 3).first, 200);
  auto [code, err] = score("a", "Primary1", 4);
  EXPECT_EQ(code, 409);
  EXPECT_TRUE(err.contains("error"));
  EXPECT_EQ(score("a", "ThirdReviewer", 4).first, 409);
  // Nothing rejected reached the store.
  EXPECT_EQ(store_->events().size(), 1u);
}

TEST_F(ServiceTest, DisputeResolvedByThirdReviewerAppearsInExport) {
  EXPECT_EQ(score("a", "Primary1", 8).first, 200);
  auto [code2, view2] = score("a", "Primary2", 2);
  EXPECT_EQ(code2, 200);
  EXPECT_EQ(view2["state"], "Disputed");
  EXPECT_TRUE(view2["score1"].is_null()) << view2;
  EXPECT_EQ(get("/queue?role=ThirdReviewer").second["post_ids"], json({"a"}));

  const auto third_view = get("/record/a?role=ThirdReviewer").second;
  EXPECT_TRUE(third_view["score1"].is_null());
  EXPECT_TRUE(third_view["score2"].is_null());
  EXPECT_EQ(third_view["state"], "Disputed");
  EXPECT_TRUE(get("/record/a?role=Primary2").second["score1"].is_null());
  EXPECT_TRUE(get("/record/a?role=Primary1").second["score2"].is_null());

  EXPECT_EQ(score("b", "Primary1", 9).first, 200);
  EXPECT_EQ(score("b", "Primary2", 9).first, 200);
  auto [code3, rec] = score("a", "ThirdReviewer", 3);
  EXPECT_EQ(code3, 200);
  EXPECT_EQ(rec["resolved_by"], "ThirdReviewer");
  EXPECT_EQ(rec["score1"], 8);  // visible once resolved

  const auto exp = get("/export").second;
  EXPECT_EQ(exp["count"], 2);
  EXPECT_EQ(exp["records"][0], json({{"post_id", "a"}, {"label", 0}, {"resolved_by", "ThirdReviewer"}}));
  EXPECT_EQ(exp["records"][1], json({{"post_id", "b"}, {"label", 1}, {"resolved_by", "Consensus"}}));
}

TEST_F(ServiceTest, PostTextAndCors) {
  auto [status, body] = get("/posts/b");
  EXPECT_EQ(status, 200);
  EXPECT_EQ(body["text"], "Post b text");
  auto r = client_->Options("/score");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 204);
  EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
}

TEST_F(ServiceTest, RestartAfterThreeScoresRestoresState) {
  score("a", "Primary1", 7);
  score("a", "Primary2", 7);
  score("c", "Primary2", 1);
  const auto before = get("/record/c").second;
  const auto export_before = get("/export").second;
  stop();
  start(log_, false);
  EXPECT_EQ(get("/record/c").second, before);
  EXPECT_EQ(get("/export").second, export_before);
  EXPECT_EQ(get("/queue?role=Primary2").second["post_ids"], json({"b"}));
}

TEST_F(ServiceTest, ConcurrentClientsOnePerRoleWins) {
  std::vector<std::thread> threads;
  std::atomic<int> ok{0}, conflict{0};
  for (int t = 0; t < 6; ++t) {
    threads.emplace_back([&, t] {
      httplib::Client c("127.0.0.1", port_);
      const json body = {{"post_id", "b"}, {"role", t % 2 ? "Primary1" : "Primary2"}, {"score", t}};
      auto r = c.Post("/score", body.dump(), "application/json");
      if (r && r->status == 200) ++ok;
      if (r && r->status == 409) ++conflict;
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(ok.load(), 2);
  EXPECT_EQ(conflict.load(), 4);
}

TEST(ServiceBind, PortInUseIsAnIoError) {
  AnnotationStore store({make_post("x", "y")});
  AnnotationService first(store);
  const int port = first.bind("127.0.0.1", 0);
  AnnotationService second(store);
  EXPECT_THROW(second.bind("127.0.0.1", port), IoError);
}
