#pragma once

#include "ztiam/clock.hpp"
#include "ztiam/pip.hpp"
#include "ztiam/policy.hpp"

#include <optional>
#include <string>
#include <vector>

namespace ztiam::trust {

struct TrustWeights {
    double geo = 0.25;
    double res = 0.20;
    double hist = 0.15;
    double pen = 0.25;
    double meta = 0.15;
};

/// Daily UTC window [start, end) in seconds since midnight; wraps when start > end.
struct DailyWindow {
    int start = 0;
    int end = 86400;

    bool contains(Timestamp t) const;
};

struct TrustConfig {
    TrustWeights weights;
    double threshold = 0.6;
    double d0_km = 100.0;
    double dmax_km = 1000.0;
    std::int64_t k_res = 5;
    std::int64_t k_hist = 20;
    std::int64_t promote_n = 10;
    Seconds cycle_window{7 * 86400};
    Seconds penalty_window{7 * 86400};
    std::int64_t demote_penalties = 3;
    std::optional<DailyWindow> access_window;

    /// Throws std::invalid_argument naming the offending key.
    void validate() const;
};

struct TrustSignals {
    Timestamp request_time{};
    std::string service_id;
    std::string ip;
    std::optional<policy::GeoPoint> geo;
    std::optional<double> distance_km;
    std::int64_t prior_requests_same_resource = 0;
    std::int64_t prior_successful_authz_total = 0;
    std::int64_t penalties_in_window = 0;
    bool ip_seen_before = false;
    bool service_seen_before = false;
    bool time_in_usual_band = false;
    bool mfa_verified_this_session = false;
};

/// Each factor lies in [0, 1].
struct TrustFactors {
    double geo = 0.0;
    double res = 0.0;
    double hist = 0.0;
    double pen = 0.0;
    double meta = 0.0;
};

enum class EvaluationMode { Criteria, ScoreBased };
enum class CombinationOutcome { Allow, Deny, Reevaluate };
enum class Outcome { Allow, Deny };

std::string_view to_string(EvaluationMode m);
std::string_view to_string(CombinationOutcome o);
std::string_view to_string(Outcome o);

struct GateResult {
    bool passed = false;
    std::vector<std::string> failed;  // GEO_UNKNOWN, GEO_OUT_OF_PERIMETER, PENALTY_PRESENT, ...
};

struct FinalDecision {
    Outcome outcome = Outcome::Deny;
    EvaluationMode mode_used = EvaluationMode::Criteria;
    policy::Decision pdp = policy::Decision::Indeterminate;
    std::optional<double> score;  // present iff mode_used == ScoreBased
    std::vector<std::string> reasons;
    std::uint64_t policy_version = 0;
    int pdp_evaluations = 0;
};

TrustFactors normalize_factors(const TrustSignals& s, const TrustConfig& cfg);

double trust_score(const TrustFactors& f, const TrustConfig& cfg);

GateResult criteria_gate(const TrustSignals& s, const TrustConfig& cfg);

/// The PDP/score outcome table; NotApplicable is denied.
CombinationOutcome combine_decision(policy::Decision pdp, double score, double threshold);

EvaluationMode determine_mode(const pip::TrustProfile& profile, const std::string& resource_id, Timestamp now,
                              const TrustConfig& cfg);

/// Signals for one request: the profile supplies history, the request supplies context.
TrustSignals build_signals(const pip::TrustProfile& profile, const std::string& resource_id,
                           const policy::RequestContext& ctx, Timestamp now, const std::string& ip,
                           const std::string& service_id, bool mfa_verified);

}  // namespace ztiam::trust
