#include "test_support.hpp"

#include "ztiam/pip.hpp"

#include <gtest/gtest.h>

#include <thread>

using namespace ztiam;
using namespace ztiam::pip;
using audit::EventKind;
using ztiam::testing::FlakySource;
using ztiam::testing::make_event;

namespace {

const Timestamp kNow = from_unix(1'700'000'000);

nlohmann::json without_as_of(const TrustProfile& p) {
    auto j = profile_to_json(p);
    j.erase("as_of");
    return j;
}

struct Fixture {
    ManualClock clock{kNow};
    audit::EventStore store;
    FlakySource source{store};
    Pip pip{source, clock, PipConfig{}};

    void add(EventKind kind, const std::string& user, Seconds ago, std::optional<std::string> res = std::nullopt) {
        store.append(make_event(kind, user, clock.now() - ago, std::move(res)));
    }
};

}  // namespace

TEST(Aggregate, UnknownUserIsAllZero) {
    const auto p = aggregate("ghost", {}, kNow, {});
    EXPECT_EQ(p.total_successful_authz, 0);
    EXPECT_EQ(p.penalties_in_window, 0);
    EXPECT_TRUE(p.per_resource_success.empty());
    EXPECT_TRUE(p.known_ips.empty());
    EXPECT_TRUE(p.first_granted.empty());
    EXPECT_FALSE(p.last_login_at.has_value());
    EXPECT_EQ(p.as_of, kNow);
}

TEST(Aggregate, PermitsAndDenyFixture) {
    std::vector<audit::AuditEvent> events;
    for (int i = 1; i <= 3; ++i) events.push_back(make_event(EventKind::AuthzPermit, "u", kNow - Seconds{i * 60}, "res-1"));
    events.push_back(make_event(EventKind::AuthzDeny, "u", kNow - Seconds{30}, "res-2"));
    events.push_back(make_event(EventKind::Penalty, "u", kNow - Seconds{30}, "res-2"));
    const auto p = aggregate("u", events, kNow, {});
    EXPECT_EQ(p.successes("res-1"), 3);
    EXPECT_EQ(p.penalties_in_window, 1);
    EXPECT_EQ(p.first_granted, std::set<std::string>{"res-1"});
    EXPECT_EQ(p.total_successful_authz, 3);
}

TEST(Aggregate, MatchesEnumerationOracleOnRandomHistories) {
    std::mt19937_64 rng(12);
    const EventKind kinds[] = {EventKind::AuthzPermit, EventKind::AuthzDeny,    EventKind::Penalty,
                               EventKind::MfaFailure,  EventKind::LoginSuccess, EventKind::LoginFailure};
    const PipConfig cfg;
    for (int round = 0; round < 100; ++round) {
        std::vector<audit::AuditEvent> events;
        const int n = static_cast<int>(rng() % 200);
        for (int i = 0; i < n; ++i) {
            auto e = make_event(kinds[rng() % 6], "u", kNow - Seconds{static_cast<std::int64_t>(rng() % (14 * 86400))},
                                "res-" + std::to_string(rng() % 4), "10.0.0." + std::to_string(rng() % 5),
                                "svc-" + std::to_string(rng() % 3));
            if (e.kind == EventKind::LoginSuccess && rng() % 2) e.detail["stage"] = rng() % 2 ? "mfa" : "password";
            // A few events from the future relative to `now` must be ignored.
            if (rng() % 20 == 0) e.time = kNow + Seconds{100};
            events.push_back(std::move(e));
        }
        const auto p = aggregate("u", events, kNow, cfg);

        std::int64_t total = 0, penalties = 0;
        std::map<std::string, std::int64_t> per_res, per_res_cycle;
        std::set<std::string> ips, services, granted;
        std::map<int, int> hours;
        std::optional<Timestamp> last_login;
        for (const auto& e : events) {
            if (e.time > kNow) continue;
            const bool in_cycle = kNow - e.time <= cfg.cycle_window;
            const bool in_penalty = kNow - e.time <= cfg.penalty_window;
            if (e.kind == EventKind::AuthzPermit) {
                ++total;
                ++per_res[*e.resource_id];
                granted.insert(*e.resource_id);
                if (in_cycle) ++per_res_cycle[*e.resource_id];
                if (in_penalty) {
                    ips.insert(e.ip);
                    services.insert(e.service_id);
                }
            }
            if ((e.kind == EventKind::Penalty || e.kind == EventKind::MfaFailure) && in_penalty) ++penalties;
            const auto stage = e.detail.find("stage");
            if (e.kind == EventKind::LoginSuccess && (stage == e.detail.end() || stage->second == "mfa")) {
                if (!last_login || e.time > *last_login) last_login = e.time;
                if (in_cycle) ++hours[static_cast<int>(to_unix(e.time) / 3600 % 24)];
            }
        }
        std::set<int> usual;
        for (const auto& [h, c] : hours) {
            if (c >= cfg.usual_hour_min_logins) usual.insert(h);
        }

        ASSERT_EQ(p.total_successful_authz, total);
        ASSERT_EQ(p.per_resource_success, per_res);
        ASSERT_EQ(p.per_resource_success_in_cycle, per_res_cycle);
        ASSERT_EQ(p.penalties_in_window, penalties);
        ASSERT_EQ(p.known_ips, ips);
        ASSERT_EQ(p.known_services, services);
        ASSERT_EQ(p.first_granted, granted);
        ASSERT_EQ(p.usual_hours, usual);
        ASSERT_EQ(p.last_login_at, last_login);
    }
}

TEST(Pip, FreshCacheServedWithoutStoreAccess) {
    Fixture f;
    f.add(EventKind::AuthzPermit, "u", Seconds{10}, "res-1");
    const auto first = f.pip.get("u", f.clock.now());
    const auto reads = f.pip.store_reads();
    f.clock.advance(Seconds{60});
    const auto second = f.pip.get("u", f.clock.now());
    EXPECT_EQ(f.pip.store_reads(), reads);
    EXPECT_EQ(second.as_of, first.as_of);
}

TEST(Pip, StaleCacheRefreshedSynchronously) {
    Fixture f;
    f.pip.get("u", f.clock.now());
    f.add(EventKind::AuthzPermit, "u", Seconds{1}, "res-1");
    f.clock.advance(Seconds{121});
    const auto p = f.pip.get("u", f.clock.now());
    EXPECT_EQ(p.as_of, f.clock.now());
    EXPECT_EQ(p.total_successful_authz, 1);
}

TEST(Pip, ForceRefreshSeesNewPenaltyWhileGetMayNot) {
    Fixture f;
    f.pip.get("u", f.clock.now());
    f.add(EventKind::Penalty, "u", Seconds{0});
    EXPECT_EQ(f.pip.get("u", f.clock.now()).penalties_in_window, 0);
    EXPECT_EQ(f.pip.force_refresh("u").penalties_in_window, 1);
    EXPECT_EQ(f.pip.get("u", f.clock.now()).penalties_in_window, 1);
}

TEST(Pip, RefreshIsDeterministic) {
    Fixture f;
    f.add(EventKind::AuthzPermit, "u", Seconds{10}, "res-1");
    f.add(EventKind::LoginSuccess, "u", Seconds{20});
    const auto a = f.pip.refresh("u", f.clock.now());
    f.clock.advance(Seconds{1});
    const auto b = f.pip.refresh("u", f.clock.now());
    EXPECT_EQ(without_as_of(a).dump(), without_as_of(b).dump());
    EXPECT_NE(a.as_of, b.as_of);
}

TEST(Pip, OutageServesStaleSnapshot) {
    Fixture f;
    f.add(EventKind::AuthzPermit, "u", Seconds{10}, "res-1");
    f.pip.get("u", f.clock.now());
    f.source.down = true;
    f.clock.advance(Seconds{600});
    const auto p = f.pip.get("u", f.clock.now());
    EXPECT_TRUE(p.stale);
    EXPECT_EQ(p.total_successful_authz, 1);
    EXPECT_THROW(f.pip.force_refresh("u"), audit::StoreUnavailable);

    f.source.down = false;
    EXPECT_FALSE(f.pip.force_refresh("u").stale);
}

TEST(Pip, ColdOutageThrows) {
    Fixture f;
    f.source.down = true;
    EXPECT_THROW(f.pip.get("u", f.clock.now()), audit::StoreUnavailable);
}

TEST(Pip, FirstGrantedGrowsMonotonically) {
    Fixture f;
    std::set<std::string> previous;
    for (int i = 0; i < 20; ++i) {
        f.add(EventKind::AuthzPermit, "u", Seconds{0}, "res-" + std::to_string(i % 7));
        f.clock.advance(Seconds{86400});
        const auto p = f.pip.force_refresh("u");
        EXPECT_TRUE(std::includes(p.first_granted.begin(), p.first_granted.end(), previous.begin(), previous.end()));
        previous = p.first_granted;
    }
    EXPECT_EQ(previous.size(), 7u);
}

TEST(Pip, ConcurrentForceRefreshKeepsLatest) {
    Fixture f;
    f.add(EventKind::AuthzPermit, "u", Seconds{0}, "res-1");
    std::vector<std::thread> threads;
    for (int i = 0; i < 8; ++i) {
        threads.emplace_back([&] {
            for (int k = 0; k < 50; ++k) {
                const auto before = f.clock.now();
                EXPECT_GE(f.pip.force_refresh("u").as_of, before);
            }
        });
    }
    for (int i = 0; i < 50; ++i) f.clock.advance(Seconds{1});
    for (auto& t : threads) t.join();
    const auto cached = f.pip.get("u", f.clock.now());
    EXPECT_LE(f.clock.now() - cached.as_of, Seconds{120});
}

TEST(Pip, BackgroundRefreshReadsStore) {
    Fixture f;
    PipConfig cfg;
    cfg.refresh_interval = Seconds{1};
    cfg.staleness_bound = Seconds{2};
    f.pip.set_config(cfg);
    f.pip.get("u", f.clock.now());
    const auto reads = f.pip.store_reads();
    f.pip.start_background();
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
    while (f.pip.store_reads() == reads && std::chrono::steady_clock::now() < deadline) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    f.pip.stop_background();
    EXPECT_GT(f.pip.store_reads(), reads);
}

TEST(PipConfig, RejectsStalenessBelowInterval) {
    PipConfig cfg;
    cfg.staleness_bound = Seconds{30};
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
