// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <httplib.h>

#include "ira/gateway.hpp"

namespace ira {

class HttpTransport final : public Transport {
  public:
    explicit HttpTransport(std::string base_url) : base_url_(std::move(base_url)) {
        while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
    }

    HttpResponse post(const std::string& path, const std::string& body,
                      const std::vector<std::pair<std::string, std::string>>& headers,
                      Clock::Duration timeout) override {
        httplib::Client client(base_url_);
        auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
        auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
        client.set_connection_timeout(static_cast<time_t>(secs.count()), static_cast<time_t>(usecs.count()));
        client.set_read_timeout(static_cast<time_t>(secs.count()), static_cast<time_t>(usecs.count()));
        client.set_write_timeout(static_cast<time_t>(secs.count()), static_cast<time_t>(usecs.count()));

        httplib::Headers hdrs;
        std::string content_type = "application/json";
        for (const auto& [k, v] : headers) {
            if (k == "Content-Type") {
                content_type = v;
            } else {
                hdrs.emplace(k, v);
            }
        }
        auto result = client.Post(path, hdrs, body, content_type);
        if (!result) {
            auto err = result.error();
            if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read) {
                fail(ErrorCode::Timeout, base_url_ + path + ": " + httplib::to_string(err));
            }
            throw ServiceError(0, base_url_ + path + ": " + httplib::to_string(err));
        }
        return {result->status, result->body};
    }

  private:
    std::string base_url_;
};

inline TransportFactory http_transport_factory() {
    return [](const ServiceEndpointConfig& cfg) { return std::make_shared<HttpTransport>(cfg.base_url); };
}

}  // namespace ira
