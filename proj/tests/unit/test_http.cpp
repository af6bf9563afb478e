#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "ira/http_transport.hpp"
#include "support.hpp"

using namespace ira;

namespace {

/// Minimal model server on 127.0.0.1 with the four JSON routes.
class FakeModelServer {
  public:
    FakeModelServer() {
        server_.Post("/v1/complete", [this](const httplib::Request& req, httplib::Response& res) {
            note(req);
            auto body = json::parse(req.body);
            res.set_content(json{{"text", " echo:" + body.at("prompt").get<std::string>()}}.dump(), "application/json");
        });
        server_.Post("/v1/vqa", [this](const httplib::Request& req, httplib::Response& res) {
            note(req);
            auto body = json::parse(req.body);
            const bool sandwich =
                body.at("image_b64") == base64_encode(read_file(test::fixture("e2e/images/sandwich.jpg")));
            res.set_content(json{{"answer", sandwich ? "ham" : "unknown"}}.dump(), "application/json");
        });
        server_.Post("/v1/caption", [this](const httplib::Request& req, httplib::Response& res) {
            note(req);
            auto body = json::parse(req.body);
            std::string cap = "a photo";
            if (body.contains("question")) cap += " about " + body["question"].get<std::string>();
            res.set_content(json{{"caption", cap}}.dump(), "application/json");
        });
        server_.Post("/v1/embed", [this](const httplib::Request& req, httplib::Response& res) {
            note(req);
            res.set_content(json{{"vector", {3.0, 4.0}}, {"dim", 2}}.dump(), "application/json");
        });
        server_.Post("/status/(\\d+)", [this](const httplib::Request& req, httplib::Response& res) {
            note(req);
            res.status = std::stoi(req.matches[1]);
            res.set_content("failure body", "text/plain");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~FakeModelServer() {
        server_.stop();
        thread_.join();
    }

    [[nodiscard]] std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
    [[nodiscard]] std::size_t hits() const { return hits_.load(); }
    [[nodiscard]] std::string last_auth() {
        std::lock_guard lock(mu_);
        return last_auth_;
    }

  private:
    void note(const httplib::Request& req) {
        ++hits_;
        std::lock_guard lock(mu_);
        last_auth_ = req.get_header_value("Authorization");
    }

    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::atomic<std::size_t> hits_{0};
    std::mutex mu_;
    std::string last_auth_;
};

ServiceEndpointConfig endpoint(const std::string& url, Role role) {
    ServiceEndpointConfig c;
    c.role = role;
    c.base_url = url;
    c.model_name = "fake";
    c.timeout_s = 5.0;
    c.max_retries = 0;
    return c;
}

Gateway http_gateway(std::optional<std::string> key = std::nullopt) {
    GatewayOptions o;
    o.transport_factory = http_transport_factory();
    o.api_key = std::move(key);
    o.clock = std::make_shared<VirtualClock>();
    return Gateway(std::move(o));
}

}  // namespace

TEST(HttpTransport, AllFourRoutes) {
    FakeModelServer server;
    Gateway gw = http_gateway("k-123");
    const ImageRef sandwich{"sandwich.jpg", test::fixture("e2e/images/sandwich.jpg")};
    const ImageRef ski{"ski.jpg", test::fixture("e2e/images/ski.jpg")};

    EXPECT_EQ(gw.complete(endpoint(server.url(), Role::Completion), {"hi", 4, 0.0, {}}), " echo:hi");
    EXPECT_EQ(server.last_auth(), "Bearer k-123");
    EXPECT_EQ(gw.vqa_answer(endpoint(server.url(), Role::Vqa), sandwich, "What type of meat is on the sandwich?"), "ham");
    EXPECT_EQ(gw.vqa_answer(endpoint(server.url(), Role::Vqa), ski, "What type of meat is on the sandwich?"), "unknown");
    EXPECT_EQ(gw.caption(endpoint(server.url(), Role::Caption), ski), "a photo");
    EXPECT_EQ(gw.caption(endpoint(server.url(), Role::Caption), ski, std::string("sport?")), "a photo about sport?");

    auto e = gw.embed_text(endpoint(server.url(), Role::EmbedText), "x");
    ASSERT_EQ(e.dim(), 2u);
    EXPECT_NEAR(e.values[0], 0.6, 1e-12);
    EXPECT_NEAR(e.values[1], 0.8, 1e-12);
    EXPECT_EQ(server.hits(), 6u);
}

TEST(HttpTransport, NoAuthorizationHeaderWithoutKey) {
    FakeModelServer server;
    Gateway gw = http_gateway();
    (void)gw.complete(endpoint(server.url(), Role::Completion), {"hi", 4, 0.0, {}});
    EXPECT_EQ(server.last_auth(), "");
}

TEST(HttpTransport, StatusCodesSurfaceWithBody) {
    FakeModelServer server;
    HttpTransport t(server.url() + "/");
    auto r = t.post("/status/418", "{}", {}, seconds(5));
    EXPECT_EQ(r.status, 418);
    EXPECT_EQ(r.body, "failure body");
}

TEST(HttpTransport, OnlyServerErrorsAreRetried) {
    FakeModelServer server;
    class Rewriting final : public Transport {
      public:
        Rewriting(std::string url, int status) : inner_(std::move(url)), status_(status) {}
        HttpResponse post(const std::string&, const std::string& body,
                          const std::vector<std::pair<std::string, std::string>>& headers,
                          Clock::Duration timeout) override {
            return inner_.post("/status/" + std::to_string(status_), body, headers, timeout);
        }

      private:
        HttpTransport inner_;
        int status_;
    };
    for (int status : {400, 503}) {
        const std::size_t before = server.hits();
        GatewayOptions o;
        o.clock = std::make_shared<VirtualClock>();
        o.transport_factory = [&](const ServiceEndpointConfig& c) { return std::make_shared<Rewriting>(c.base_url, status); };
        Gateway gw(o);
        auto cfg = endpoint(server.url(), Role::Completion);
        cfg.max_retries = 2;
        try {
            (void)gw.complete(cfg, {"hi", 4, 0.0, {}});
            FAIL();
        } catch (const Error& e) {
            if (status == 400) {
                EXPECT_EQ(e.code(), ErrorCode::ServiceError);
                EXPECT_EQ(server.hits() - before, 1u);
            } else {
                EXPECT_EQ(e.code(), ErrorCode::RetriesExhausted);
                EXPECT_EQ(server.hits() - before, 3u);
            }
        }
    }
}

TEST(HttpTransport, ConnectionRefusedIsTransientServiceError) {
    HttpTransport t("http://127.0.0.1:1");  // nothing listens on tcpmux
    try {
        (void)t.post("/v1/complete", "{}", {}, seconds(1));
        FAIL();
    } catch (const ServiceError& e) {
        EXPECT_EQ(e.status(), 0);
        EXPECT_TRUE(e.transient());
    }
}
