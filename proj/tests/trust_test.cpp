#include "test_support.hpp"

#include "ztiam/authorizer.hpp"
#include "ztiam/trust.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace ztiam;
using namespace ztiam::trust;
using audit::EventKind;
using policy::Decision;
using policy::Effect;
using ztiam::testing::geo_context;
using ztiam::testing::kFarUser;
using ztiam::testing::kNearUser;
using ztiam::testing::kResource;
using ztiam::testing::make_event;

namespace {

TrustSignals signals(std::optional<double> d, std::int64_t n, std::int64_t m, std::int64_t p, bool ip, bool svc,
                     bool usual) {
    TrustSignals s;
    s.distance_km = d;
    s.prior_requests_same_resource = n;
    s.prior_successful_authz_total = m;
    s.penalties_in_window = p;
    s.ip_seen_before = ip;
    s.service_seen_before = svc;
    s.time_in_usual_band = usual;
    return s;
}

TrustFactors factors(double g, double r, double h, double p, double m) { return {g, r, h, p, m}; }

// Reference dot product in extended precision, summed in reverse order.
double oracle_score(const TrustWeights& w, const TrustFactors& f) {
    long double acc = 0;
    acc += static_cast<long double>(w.meta) * f.meta;
    acc += static_cast<long double>(w.pen) * f.pen;
    acc += static_cast<long double>(w.hist) * f.hist;
    acc += static_cast<long double>(w.res) * f.res;
    acc += static_cast<long double>(w.geo) * f.geo;
    return static_cast<double>(acc);
}

void expect_factors(const TrustFactors& got, const TrustFactors& want) {
    EXPECT_DOUBLE_EQ(got.geo, want.geo);
    EXPECT_DOUBLE_EQ(got.res, want.res);
    EXPECT_DOUBLE_EQ(got.hist, want.hist);
    EXPECT_DOUBLE_EQ(got.pen, want.pen);
    EXPECT_DOUBLE_EQ(got.meta, want.meta);
}

policy::PolicySet single_rule(Effect effect, std::optional<policy::Expression> condition = std::nullopt) {
    policy::PolicySet set;
    set.id = "t";
    policy::Policy p;
    p.id = "p";
    p.rules.push_back(policy::Rule{"r", effect, std::move(condition)});
    set.policies.push_back(std::move(p));
    return set;
}

struct Harness {
    explicit Harness(TrustConfig cfg = {}) : authz(policies, pip, sink, clock, cfg) {}

    ManualClock clock;
    audit::EventStore store;
    ztiam::testing::StoreSink sink{store};
    ztiam::testing::FlakySource source{store};
    pip::Pip pip{source, clock, pip::PipConfig{}};
    PolicyStore policies;
    Authorizer authz;

    void seed(EventKind kind, const std::string& user, Seconds ago, std::optional<std::string> resource,
              const std::string& ip = "10.0.0.1", const std::string& svc = "svc-a") {
        store.append(make_event(kind, user, clock.now() - ago, std::move(resource), ip, svc));
    }

    /// `n` permits on `resource` spread over the last hours.
    void seed_permits(const std::string& user, const std::string& resource, int n) {
        for (int i = 0; i < n; ++i) seed(EventKind::AuthzPermit, user, Seconds{3600 + 60 * i}, resource);
    }

    AccessRequest request(const std::string& user, std::optional<policy::GeoPoint> geo, bool mfa = true,
                          const std::string& ip = "10.0.0.1", const std::string& svc = "svc-a") {
        AccessRequest r;
        r.user_id = user;
        r.resource_id = "res-1";
        r.ctx = geo_context(geo);
        r.ctx.environment["time"] = clock.now();
        r.ip = ip;
        r.service_id = svc;
        r.mfa_verified = mfa;
        return r;
    }

    std::size_t count(const std::string& user, EventKind kind) const {
        audit::CountQuery q;
        q.principal = user;
        q.kinds = {kind};
        return store.count(q);
    }
};

policy::PolicySet geo_policy() { return policy::parse_policy_set(ztiam::testing::read_text(ZTIAM_GEO_POLICY)); }

}  // namespace

// --- normalize_factors ----------------------------------------------------------------

TEST(NormalizeFactors, EmptyHistoryInsidePerimeter) {
    expect_factors(normalize_factors(signals(50, 0, 0, 0, false, false, false), {}), factors(1, 0, 0, 1, 0));
}

TEST(NormalizeFactors, BoundaryConventions) {
    const TrustConfig cfg;
    EXPECT_EQ(normalize_factors(signals(100, 0, 0, 0, false, false, false), cfg).geo, 1.0);
    EXPECT_EQ(normalize_factors(signals(1000, 0, 0, 0, false, false, false), cfg).geo, 0.0);
    EXPECT_EQ(normalize_factors(signals(std::nullopt, 0, 0, 0, false, false, false), cfg).geo, 0.0);
    EXPECT_EQ(normalize_factors(signals(5000, 0, 0, 0, false, false, false), cfg).geo, 0.0);
    EXPECT_EQ(normalize_factors(signals(0, 0, 0, 0, false, false, false), cfg).pen, 1.0);
}

TEST(NormalizeFactors, MidRangeExample) {
    // (1000-550)/900, 5/10, 20/40, 1/2, 0.5+0.25
    expect_factors(normalize_factors(signals(550, 5, 20, 1, true, true, false), {}), factors(0.5, 0.5, 0.5, 0.5, 0.75));
}

TEST(NormalizeFactors, AllFactorsBoundedAndMonotone) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> dist(0, 3000);
    std::uniform_int_distribution<int> cnt(0, 500);
    const TrustConfig cfg;
    for (int i = 0; i < 5000; ++i) {
        const auto s = signals(dist(rng), cnt(rng), cnt(rng), cnt(rng), rng() & 1, rng() & 1, rng() & 1);
        const auto f = normalize_factors(s, cfg);
        for (double v : {f.geo, f.res, f.hist, f.pen, f.meta}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        auto closer = s;
        *closer.distance_km /= 2;
        ++closer.prior_requests_same_resource;
        ++closer.prior_successful_authz_total;
        auto worse = s;
        ++worse.penalties_in_window;
        const auto fc = normalize_factors(closer, cfg);
        EXPECT_GE(fc.geo, f.geo);
        EXPECT_GT(fc.res, f.res);
        EXPECT_GT(fc.hist, f.hist);
        EXPECT_LT(normalize_factors(worse, cfg).pen, f.pen);
    }
}

// --- trust_score --------------------------------------------------------------------------

TEST(TrustScore, WorkedExample) {
    const TrustConfig cfg;  // (0.25, 0.20, 0.15, 0.25, 0.15)
    EXPECT_NEAR(trust_score(factors(1.0, 0.5, 0.8, 1.0, 0.0), cfg), 0.72, 1e-12);
}

TEST(TrustScore, ExtremesAreExact) {
    const TrustConfig cfg;
    EXPECT_EQ(trust_score(factors(1, 1, 1, 1, 1), cfg), 1.0);
    EXPECT_EQ(trust_score(factors(0, 0, 0, 0, 0), cfg), 0.0);
}

TEST(TrustScore, RandomizedPropertiesAgainstOracle) {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 10000; ++i) {
        double raw[5], sum = 0;
        for (auto& r : raw) sum += (r = u(rng));
        TrustConfig cfg;
        cfg.weights = {raw[0] / sum, raw[1] / sum, raw[2] / sum, raw[3] / sum, raw[4] / sum};
        ASSERT_NO_THROW(cfg.validate());

        TrustFactors f = factors(u(rng), u(rng), u(rng), u(rng), u(rng));
        const double s = trust_score(f, cfg);
        ASSERT_GE(s, 0.0);
        ASSERT_LE(s, 1.0);
        ASSERT_NEAR(s, oracle_score(cfg.weights, f), 1e-12);
        ASSERT_EQ(trust_score(factors(1, 1, 1, 1, 1), cfg), 1.0);
        ASSERT_EQ(trust_score(factors(0, 0, 0, 0, 0), cfg), 0.0);

        double* coords[] = {&f.geo, &f.res, &f.hist, &f.pen, &f.meta};
        double* c = coords[rng() % 5];
        *c = std::min(1.0, *c + u(rng) * (1.0 - *c));
        ASSERT_GE(trust_score(f, cfg), s);
    }
}

TEST(TrustConfigValidate, NamesOffendingKey) {
    TrustConfig cfg;
    cfg.weights.geo = 0.5;
    try {
        cfg.validate();
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("trust.weights"), std::string::npos);
    }
    cfg = {};
    cfg.dmax_km = 50;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.threshold = 1.5;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

// --- criteria_gate ---------------------------------------------------------------------------

TEST(CriteriaGate, Examples) {
    const TrustConfig cfg;
    auto s = signals(72, 0, 0, 0, false, false, false);
    s.mfa_verified_this_session = true;
    EXPECT_TRUE(criteria_gate(s, cfg).passed);

    s.penalties_in_window = 1;
    auto r = criteria_gate(s, cfg);
    EXPECT_FALSE(r.passed);
    EXPECT_EQ(r.failed, std::vector<std::string>{"PENALTY_PRESENT"});

    s.penalties_in_window = 0;
    s.distance_km.reset();
    r = criteria_gate(s, cfg);
    EXPECT_EQ(r.failed, std::vector<std::string>{"GEO_UNKNOWN"});
}

TEST(CriteriaGate, EveryCombinationMatchesConjunction) {
    const std::int64_t noon = 86400 * 19000 + 12 * 3600;
    for (std::optional<double> d : {std::optional<double>{}, std::optional<double>{72.0},
                                    std::optional<double>{100.0}, std::optional<double>{100.5}}) {
        for (int p : {0, 2}) {
            for (bool mfa : {false, true}) {
                for (int window = 0; window < 3; ++window) {
                    TrustConfig cfg;
                    if (window == 1) cfg.access_window = DailyWindow{8 * 3600, 18 * 3600};
                    if (window == 2) cfg.access_window = DailyWindow{20 * 3600, 6 * 3600};
                    auto s = signals(d, 50, 50, p, true, true, true);
                    s.mfa_verified_this_session = mfa;
                    s.request_time = from_unix(noon);
                    const bool expect = d && *d <= 100.0 && p == 0 && mfa && window != 2;
                    const auto r = criteria_gate(s, cfg);
                    EXPECT_EQ(r.passed, expect);
                    EXPECT_EQ(r.passed, r.failed.empty());
                }
            }
        }
    }
}

// --- combine_decision --------------------------------------------------------------

TEST(CombineDecision, Examples) {
    EXPECT_EQ(combine_decision(Decision::Permit, 0.72, 0.6), CombinationOutcome::Allow);
    EXPECT_EQ(combine_decision(Decision::Permit, 0.55, 0.6), CombinationOutcome::Deny);
    EXPECT_EQ(combine_decision(Decision::Indeterminate, 0.9, 0.6), CombinationOutcome::Reevaluate);
    EXPECT_EQ(combine_decision(Decision::Deny, 1.0, 0.0), CombinationOutcome::Deny);
}

TEST(CombineDecision, AllCellsOverScoreGrid) {
    const std::map<std::pair<Decision, bool>, CombinationOutcome> table = {
        {{Decision::Permit, true}, CombinationOutcome::Allow},
        {{Decision::Permit, false}, CombinationOutcome::Deny},
        {{Decision::Deny, true}, CombinationOutcome::Deny},
        {{Decision::Deny, false}, CombinationOutcome::Deny},
        {{Decision::Indeterminate, true}, CombinationOutcome::Reevaluate},
        {{Decision::Indeterminate, false}, CombinationOutcome::Deny},
        {{Decision::NotApplicable, true}, CombinationOutcome::Deny},
        {{Decision::NotApplicable, false}, CombinationOutcome::Deny},
    };
    for (int si = 0; si <= 20; ++si) {
        for (int ti = 0; ti <= 20; ++ti) {
            const double score = si / 20.0, theta = ti / 20.0;
            for (const auto& [key, want] : table) {
                if ((score >= theta) != key.second) continue;
                EXPECT_EQ(combine_decision(key.first, score, theta), want) << score << " " << theta;
            }
        }
    }
}

// --- determine_mode ------------------------------------------------------------------------------

TEST(DetermineMode, PromotionDemotionAndPerResource) {
    const TrustConfig cfg;
    const pip::PipConfig pcfg;
    const auto now = from_unix(1'700'000'000);
    std::vector<audit::AuditEvent> events;
    const auto mode = [&](const std::string& res) {
        return determine_mode(pip::aggregate("u", events, now, pcfg), res, now, cfg);
    };

    EXPECT_EQ(mode("R"), EvaluationMode::Criteria);
    for (int i = 1; i <= 10; ++i) {
        events.push_back(make_event(EventKind::AuthzPermit, "u", now - Seconds{3600 * i}, "R"));
        EXPECT_EQ(mode("R"), i < 10 ? EvaluationMode::Criteria : EvaluationMode::ScoreBased) << i;
    }
    EXPECT_EQ(mode("S"), EvaluationMode::Criteria);

    for (int p = 1; p <= 3; ++p) {
        events.push_back(make_event(EventKind::Penalty, "u", now - Seconds{60 * p}, "R"));
        EXPECT_EQ(mode("R"), p < 3 ? EvaluationMode::ScoreBased : EvaluationMode::Criteria) << p;
    }
}

TEST(DetermineMode, SuccessesOutsideCycleDoNotCount) {
    const TrustConfig cfg;
    const auto now = from_unix(1'700'000'000);
    std::vector<audit::AuditEvent> events;
    for (int i = 0; i < 10; ++i) {
        events.push_back(make_event(EventKind::AuthzPermit, "u", now - Seconds{8 * 86400 + i}, "R"));
    }
    const auto profile = pip::aggregate("u", events, now, {});
    EXPECT_EQ(profile.successes("R"), 10);
    EXPECT_EQ(determine_mode(profile, "R", now, cfg), EvaluationMode::Criteria);
}

// --- authorize -------------------------------------------------------------------------------------

TEST(Authorize, NewUserInPerimeterAllowedByCriteria) {
    Harness h;
    h.policies.publish(geo_policy());
    const auto d = h.authz.authorize(h.request("u-new", kNearUser));
    EXPECT_EQ(d.outcome, Outcome::Allow);
    EXPECT_EQ(d.mode_used, EvaluationMode::Criteria);
    EXPECT_EQ(d.pdp, Decision::Permit);
    EXPECT_FALSE(d.score.has_value());
    EXPECT_EQ(h.count("u-new", EventKind::AuthzPermit), 1u);
}

TEST(Authorize, FarUserDeniedWithPenalty) {
    Harness h;
    h.policies.publish(geo_policy());
    const auto d = h.authz.authorize(h.request("u-far", kFarUser));
    EXPECT_EQ(d.outcome, Outcome::Deny);
    EXPECT_EQ(d.pdp, Decision::NotApplicable);
    EXPECT_EQ(h.count("u-far", EventKind::AuthzDeny), 1u);
    EXPECT_EQ(h.count("u-far", EventKind::Penalty), 1u);
}

TEST(Authorize, EstablishedUserWorkedScoreAllows) {
    TrustConfig cfg;
    cfg.promote_n = 5;
    Harness h(cfg);
    h.policies.publish(geo_policy());
    // n = 5 on res-1 and m = 80 overall gives factors (1, 0.5, 0.8, 1, 0).
    h.seed_permits("u", "res-1", 5);
    h.seed_permits("u", "other", 75);
    const auto d = h.authz.authorize(h.request("u", kNearUser, true, "10.9.9.9", "svc-new"));
    EXPECT_EQ(d.mode_used, EvaluationMode::ScoreBased);
    ASSERT_TRUE(d.score.has_value());
    EXPECT_NEAR(*d.score, 0.72, 1e-12);
    EXPECT_EQ(d.outcome, Outcome::Allow);
}

TEST(Authorize, ScoreBelowThresholdDeniesDespitePermit) {
    TrustConfig cfg;
    cfg.promote_n = 5;
    cfg.threshold = 0.75;
    Harness h(cfg);
    h.policies.publish(geo_policy());
    h.seed_permits("u", "res-1", 5);
    h.seed_permits("u", "other", 75);
    const auto d = h.authz.authorize(h.request("u", kNearUser, true, "10.9.9.9", "svc-new"));
    EXPECT_EQ(d.pdp, Decision::Permit);
    EXPECT_EQ(d.outcome, Outcome::Deny);
}

TEST(Authorize, IndeterminateRetriedOnceThenDenied) {
    Harness h;
    h.policies.publish(geo_policy());
    h.seed_permits("u", "res-1", 30);
    const auto d = h.authz.authorize(h.request("u", std::nullopt));
    EXPECT_EQ(d.mode_used, EvaluationMode::ScoreBased);
    ASSERT_TRUE(d.score.has_value());
    EXPECT_GE(*d.score, 0.6);
    EXPECT_EQ(d.pdp, Decision::Indeterminate);
    EXPECT_EQ(d.pdp_evaluations, 2);
    EXPECT_EQ(d.outcome, Outcome::Deny);
    EXPECT_NE(std::find(d.reasons.begin(), d.reasons.end(), "REEVALUATE_EXHAUSTED"), d.reasons.end());
}

TEST(Authorize, NoDecisionCaching) {
    Harness h;
    h.policies.publish(geo_policy());
    const auto req = h.request("u", kNearUser);
    const auto before = h.authz.pdp_evaluations();
    h.authz.authorize(req);
    h.authz.authorize(req);
    EXPECT_EQ(h.authz.pdp_evaluations() - before, 2u);
}

TEST(Authorize, ColdStoreOutageFailsClosed) {
    Harness h;
    h.policies.publish(single_rule(Effect::Permit));
    h.source.down = true;
    const auto d = h.authz.authorize(h.request("u", kNearUser));
    EXPECT_EQ(d.outcome, Outcome::Deny);
    EXPECT_EQ(d.reasons, std::vector<std::string>{"STORE_UNAVAILABLE"});
    EXPECT_EQ(d.pdp_evaluations, 0);
}

TEST(Authorize, PolicyStoreOutageFailsClosed) {
    struct DownPolicies final : PolicySource {
        std::shared_ptr<const policy::PolicySet> current() const override {
            throw PolicyStoreUnavailable("offline");
        }
    } down;
    ManualClock clock;
    audit::EventStore store;
    ztiam::testing::StoreSink sink(store);
    pip::Pip pip(store, clock, {});
    Authorizer authz(down, pip, sink, clock, {});
    AccessRequest r;
    r.user_id = "u";
    r.resource_id = "res-1";
    r.ctx = geo_context(kNearUser);
    r.mfa_verified = true;
    const auto d = authz.authorize(r);
    EXPECT_EQ(d.outcome, Outcome::Deny);
    EXPECT_EQ(d.reasons, std::vector<std::string>{"STORE_UNAVAILABLE"});
}

TEST(Authorize, PenaltyFeedbackLowersNextScore) {
    Harness h;
    h.policies.publish(geo_policy());
    h.seed_permits("u", "res-1", 30);
    const auto first = h.authz.authorize(h.request("u", kNearUser));
    ASSERT_EQ(first.mode_used, EvaluationMode::ScoreBased);

    // A far request is denied and leaves exactly one Penalty.
    const auto penalties_before = h.count("u", EventKind::Penalty);
    h.clock.advance(Seconds{1});
    h.pip.force_refresh("u");
    EXPECT_EQ(h.authz.authorize(h.request("u", kFarUser)).outcome, Outcome::Deny);
    EXPECT_EQ(h.count("u", EventKind::Penalty), penalties_before + 1);

    h.clock.advance(Seconds{1});
    h.pip.force_refresh("u");
    const auto second = h.authz.authorize(h.request("u", kNearUser));
    ASSERT_TRUE(first.score && second.score);
    EXPECT_LT(*second.score, *first.score);
}

TEST(Authorize, RandomizedStructuralProperties) {
    std::mt19937_64 rng(99);
    const std::vector<policy::PolicySet> sets = {
        geo_policy(),
        single_rule(Effect::Permit),
        single_rule(Effect::Deny),
        single_rule(Effect::Permit, policy::Expression::apply("string-equal",
                                                              {policy::Expression::attribute("subject.absent"),
                                                               policy::Expression::literal(std::string("x"))})),
        policy::PolicySet{},
    };
    const std::vector<std::optional<policy::GeoPoint>> geos = {kNearUser, kFarUser, std::nullopt, kResource};

    for (int i = 0; i < 300; ++i) {
        Harness h;
        h.policies.publish(sets[rng() % sets.size()]);
        const std::string user = "u" + std::to_string(i);
        const int permits = static_cast<int>(rng() % 3) * 15;
        h.seed_permits(user, "res-1", permits);
        for (int p = 0; p < static_cast<int>(rng() % 3); ++p) h.seed(EventKind::Penalty, user, Seconds{120}, "res-1");
        const auto req = h.request(user, geos[rng() % geos.size()], rng() % 4 != 0);
        const auto penalties_before = h.count(user, EventKind::Penalty);

        const auto d = h.authz.authorize(req);

        ASSERT_LE(d.pdp_evaluations, 2);
        ASSERT_EQ(d.score.has_value(), d.mode_used == EvaluationMode::ScoreBased);
        if (d.outcome == Outcome::Allow) {
            ASSERT_EQ(d.pdp, Decision::Permit);
            ASSERT_TRUE(req.mfa_verified);
            if (d.mode_used == EvaluationMode::Criteria) {
                const auto profile = pip::aggregate(user, h.store.events_for(user), h.clock.now(), {});
                const auto s = build_signals(profile, req.resource_id, req.ctx, h.clock.now(), req.ip,
                                             req.service_id, req.mfa_verified);
                ASSERT_TRUE(s.distance_km && *s.distance_km <= 100.0);
                ASSERT_EQ(s.penalties_in_window, 0);
            } else {
                ASSERT_GE(*d.score, 0.6);
            }
            ASSERT_EQ(h.count(user, EventKind::Penalty), penalties_before);
        } else {
            ASSERT_EQ(h.count(user, EventKind::Penalty), penalties_before + 1);
        }
    }
}
