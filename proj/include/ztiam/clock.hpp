#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>

namespace ztiam {

using Timestamp = std::chrono::sys_seconds;
using Seconds = std::chrono::seconds;

inline Timestamp from_unix(std::int64_t s) { return Timestamp{Seconds{s}}; }
inline std::int64_t to_unix(Timestamp t) { return t.time_since_epoch().count(); }

/// Source of server time. Every component reads time through this so tests can
/// script the passage of days without sleeping.
class Clock {
public:
    virtual ~Clock() = default;
    virtual Timestamp now() const = 0;
};

class SystemClock final : public Clock {
public:
    Timestamp now() const override {
        return std::chrono::time_point_cast<Seconds>(std::chrono::system_clock::now());
    }
};

class ManualClock final : public Clock {
public:
    explicit ManualClock(Timestamp start = from_unix(1'700'000'000)) : now_(to_unix(start)) {}

    Timestamp now() const override { return from_unix(now_.load()); }
    void set(Timestamp t) { now_.store(to_unix(t)); }
    void advance(Seconds d) { now_.fetch_add(d.count()); }

private:
    std::atomic<std::int64_t> now_;
};

}  // namespace ztiam
