#include "ztiam/pip.hpp"

#include <spdlog/spdlog.h>

namespace ztiam::pip {

using audit::EventKind;

std::int64_t TrustProfile::successes_in_cycle(const std::string& resource_id) const {
    const auto it = per_resource_success_in_cycle.find(resource_id);
    return it == per_resource_success_in_cycle.end() ? 0 : it->second;
}

std::int64_t TrustProfile::successes(const std::string& resource_id) const {
    const auto it = per_resource_success.find(resource_id);
    return it == per_resource_success.end() ? 0 : it->second;
}

nlohmann::json profile_to_json(const TrustProfile& p) {
    nlohmann::json j;
    j["user_id"] = p.user_id;
    j["as_of"] = to_unix(p.as_of);
    j["total_successful_authz"] = p.total_successful_authz;
    j["per_resource_success"] = p.per_resource_success;
    j["per_resource_success_in_cycle"] = p.per_resource_success_in_cycle;
    j["penalties_in_window"] = p.penalties_in_window;
    j["known_ips"] = p.known_ips;
    j["known_services"] = p.known_services;
    j["last_login_at"] = p.last_login_at ? nlohmann::json(to_unix(*p.last_login_at)) : nlohmann::json(nullptr);
    j["usual_hours"] = p.usual_hours;
    j["first_granted"] = p.first_granted;
    j["stale"] = p.stale;
    return j;
}

void PipConfig::validate() const {
    if (refresh_interval <= Seconds{0}) throw std::invalid_argument("pip refresh interval must be positive");
    if (staleness_bound < refresh_interval) throw std::invalid_argument("pip staleness bound below refresh interval");
    if (cycle_window <= Seconds{0} || penalty_window <= Seconds{0}) {
        throw std::invalid_argument("pip windows must be positive");
    }
    if (usual_hour_min_logins < 1) throw std::invalid_argument("usual-hour threshold must be positive");
}

TrustProfile aggregate(const std::string& user_id, const std::vector<audit::AuditEvent>& events, Timestamp now,
                       const PipConfig& cfg) {
    TrustProfile p;
    p.user_id = user_id;
    p.as_of = now;
    const auto cycle_from = now - cfg.cycle_window;
    const auto penalty_from = now - cfg.penalty_window;
    std::map<int, int> logins_per_hour;

    for (const auto& e : events) {
        if (e.time > now) continue;
        switch (e.kind) {
            case EventKind::AuthzPermit:
                ++p.total_successful_authz;
                if (e.resource_id) {
                    ++p.per_resource_success[*e.resource_id];
                    p.first_granted.insert(*e.resource_id);
                    if (e.time >= cycle_from) ++p.per_resource_success_in_cycle[*e.resource_id];
                }
                if (e.time >= penalty_from) {
                    if (!e.ip.empty()) p.known_ips.insert(e.ip);
                    if (!e.service_id.empty()) p.known_services.insert(e.service_id);
                }
                break;
            case EventKind::Penalty:
            case EventKind::MfaFailure:
                if (e.time >= penalty_from) ++p.penalties_in_window;
                break;
            case EventKind::LoginSuccess:
                if (const auto st = e.detail.find("stage"); st != e.detail.end() && st->second != "mfa") break;
                if (!p.last_login_at || e.time > *p.last_login_at) p.last_login_at = e.time;
                if (e.time >= cycle_from) ++logins_per_hour[static_cast<int>((to_unix(e.time) % 86400) / 3600)];
                break;
            default:
                break;
        }
    }
    for (const auto& [hour, n] : logins_per_hour) {
        if (n >= cfg.usual_hour_min_logins) p.usual_hours.insert(hour);
    }
    return p;
}

Pip::Pip(const audit::EventSource& source, const Clock& clock, PipConfig cfg)
    : source_(source), clock_(clock), cfg_(cfg) {
    cfg_.validate();
}

Pip::~Pip() { stop_background(); }

void Pip::set_config(PipConfig cfg) {
    cfg.validate();
    std::lock_guard lock(mutex_);
    cfg_ = cfg;
}

PipConfig Pip::config() const {
    std::lock_guard lock(mutex_);
    return cfg_;
}

TrustProfile Pip::refresh(const std::string& user_id, Timestamp now) {
    std::uint64_t generation = 0;
    PipConfig cfg;
    {
        std::lock_guard lock(mutex_);
        generation = next_generation_++;
        cfg = cfg_;
    }
    std::vector<audit::AuditEvent> events;
    try {
        ++store_reads_;
        events = source_.events_for(user_id);
    } catch (const audit::StoreUnavailable&) {
        std::lock_guard lock(mutex_);
        const auto it = cache_.find(user_id);
        if (it != cache_.end() && !it->second.profile->stale) {
            auto stale = std::make_shared<TrustProfile>(*it->second.profile);
            stale->stale = true;
            it->second.profile = std::move(stale);
        }
        throw;
    }
    auto fresh = std::make_shared<const TrustProfile>(aggregate(user_id, events, now, cfg));

    std::lock_guard lock(mutex_);
    auto& entry = cache_[user_id];
    if (generation > entry.generation) {
        entry.generation = generation;
        entry.profile = fresh;
    }
    return *fresh;
}

TrustProfile Pip::get(const std::string& user_id, Timestamp now) {
    {
        std::lock_guard lock(mutex_);
        const auto it = cache_.find(user_id);
        if (it != cache_.end() && it->second.profile && !it->second.profile->stale &&
            now - it->second.profile->as_of <= cfg_.staleness_bound) {
            return *it->second.profile;
        }
    }
    try {
        return refresh(user_id, now);
    } catch (const audit::StoreUnavailable&) {
        std::lock_guard lock(mutex_);
        const auto it = cache_.find(user_id);
        if (it != cache_.end() && it->second.profile) return *it->second.profile;
        throw;
    }
}

TrustProfile Pip::force_refresh(const std::string& user_id) { return refresh(user_id, clock_.now()); }

void Pip::start_background() {
    if (background_.joinable()) return;
    bg_stop_ = false;
    background_ = std::thread([this] {
        std::unique_lock lock(bg_mutex_);
        while (!bg_stop_) {
            const auto interval = config().refresh_interval;
            if (bg_cv_.wait_for(lock, interval, [&] { return bg_stop_; })) break;
            std::vector<std::string> users;
            {
                std::lock_guard cache_lock(mutex_);
                for (const auto& [user, _] : cache_) users.push_back(user);
            }
            lock.unlock();
            for (const auto& user : users) {
                try {
                    refresh(user, clock_.now());
                } catch (const std::exception& ex) {
                    spdlog::warn("pip: background refresh of {} failed: {}", user, ex.what());
                }
            }
            lock.lock();
        }
    });
}

void Pip::stop_background() {
    {
        std::lock_guard lock(bg_mutex_);
        bg_stop_ = true;
    }
    bg_cv_.notify_all();
    if (background_.joinable()) background_.join();
}

}  // namespace ztiam::pip
