#pragma once

#include "ztiam/service.hpp"

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <string>

namespace ztiam::gateway {

inline constexpr std::string_view kCorrelationHeader = "X-Correlation-Id";

/// Per-key token bucket on a monotonic clock.
class RateLimiter {
public:
    using Clock = std::chrono::steady_clock;

    RateLimiter(double per_second, double burst) : rate_(per_second), burst_(burst) {}
    bool allow(const std::string& key, Clock::time_point now = Clock::now());

private:
    struct Bucket {
        double tokens;
        Clock::time_point last;
    };
    double rate_;
    double burst_;
    std::mutex mutex_;
    std::map<std::string, Bucket> buckets_;
};

/// HTTP front door. Routes are documented in docs/api.md.
class Gateway {
public:
    explicit Gateway(Service& service);
    ~Gateway();

    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;

    /// Binds the configured address (port 0 picks one). Returns the bound port.
    int bind();
    /// Serves until stop(); call bind() first.
    void run();
    /// bind() and run() on a background thread.
    int start();
    void stop();

    int port() const;
    bool tls() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace ztiam::gateway
