#pragma once

#include "ztiam/clock.hpp"
#include "ztiam/event_log.hpp"

#include <atomic>
#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace ztiam::pip {

/// Aggregated per-user behavior snapshot, derived entirely from the audit log.
struct TrustProfile {
    std::string user_id;
    Timestamp as_of{};
    std::int64_t total_successful_authz = 0;
    std::map<std::string, std::int64_t> per_resource_success;
    /// AuthzPermit count per resource inside the trailing cycle window.
    std::map<std::string, std::int64_t> per_resource_success_in_cycle;
    /// Penalty and MfaFailure events inside the penalty window.
    std::int64_t penalties_in_window = 0;
    std::set<std::string> known_ips;
    std::set<std::string> known_services;
    std::optional<Timestamp> last_login_at;
    std::set<int> usual_hours;
    std::set<std::string> first_granted;
    bool stale = false;

    std::int64_t successes_in_cycle(const std::string& resource_id) const;
    std::int64_t successes(const std::string& resource_id) const;
};

nlohmann::json profile_to_json(const TrustProfile& p);

struct PipConfig {
    Seconds refresh_interval{60};
    Seconds staleness_bound{120};
    Seconds cycle_window{7 * 86400};
    Seconds penalty_window{7 * 86400};
    int usual_hour_min_logins = 3;

    /// Throws std::invalid_argument.
    void validate() const;
};

/// Pure aggregation of one principal's events as of `now`.
TrustProfile aggregate(const std::string& user_id, const std::vector<audit::AuditEvent>& events, Timestamp now,
                       const PipConfig& cfg);

class Pip {
public:
    Pip(const audit::EventSource& source, const Clock& clock, PipConfig cfg);
    ~Pip();

    Pip(const Pip&) = delete;
    Pip& operator=(const Pip&) = delete;

    /// Recomputes and atomically replaces the cached snapshot. On StoreUnavailable
    /// the previous snapshot stays cached, flagged stale, and the error propagates.
    TrustProfile refresh(const std::string& user_id, Timestamp now);
    /// Cached snapshot while younger than staleness_bound, otherwise a synchronous refresh.
    /// If the store is down a stale cached snapshot is returned; with nothing cached it throws.
    TrustProfile get(const std::string& user_id, Timestamp now);
    TrustProfile force_refresh(const std::string& user_id);

    void set_config(PipConfig cfg);
    PipConfig config() const;

    /// Periodic refresh of every cached user on refresh_interval (wall time).
    void start_background();
    void stop_background();

    /// Number of reads issued against the event source.
    std::uint64_t store_reads() const { return store_reads_.load(); }

private:
    struct Entry {
        std::shared_ptr<const TrustProfile> profile;
        std::uint64_t generation = 0;
    };

    const audit::EventSource& source_;
    const Clock& clock_;

    mutable std::mutex mutex_;
    PipConfig cfg_;
    std::unordered_map<std::string, Entry> cache_;
    std::uint64_t next_generation_ = 1;
    std::atomic<std::uint64_t> store_reads_{0};

    std::thread background_;
    std::mutex bg_mutex_;
    std::condition_variable bg_cv_;
    bool bg_stop_ = false;
};

}  // namespace ztiam::pip
