#include "ztiam/trust.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ztiam::trust {

bool DailyWindow::contains(Timestamp t) const {
    const auto secs = to_unix(t) % 86400;
    return start <= end ? (secs >= start && secs < end) : (secs >= start || secs < end);
}

void TrustConfig::validate() const {
    const double w[] = {weights.geo, weights.res, weights.hist, weights.pen, weights.meta};
    double sum = 0.0;
    for (double x : w) {
        if (!(x >= 0.0)) throw std::invalid_argument("trust.weights.*: weights must be non-negative");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("trust.weights.*: weights must sum to 1");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("trust.threshold: must lie in [0, 1]");
    if (!(d0_km > 0.0)) throw std::invalid_argument("trust.d0_km: must be positive");
    if (!(dmax_km > d0_km)) throw std::invalid_argument("trust.dmax_km: must exceed trust.d0_km");
    if (k_res < 1) throw std::invalid_argument("trust.k_res: must be a positive integer");
    if (k_hist < 1) throw std::invalid_argument("trust.k_hist: must be a positive integer");
    if (promote_n < 1) throw std::invalid_argument("trust.promote_n: must be a positive integer");
    if (demote_penalties < 1) throw std::invalid_argument("trust.demote_penalties: must be a positive integer");
    if (cycle_window <= Seconds{0}) throw std::invalid_argument("trust.cycle_days: must be positive");
    if (penalty_window <= Seconds{0}) throw std::invalid_argument("trust.penalty_window_days: must be positive");
}

std::string_view to_string(EvaluationMode m) { return m == EvaluationMode::Criteria ? "Criteria" : "ScoreBased"; }

std::string_view to_string(CombinationOutcome o) {
    switch (o) {
        case CombinationOutcome::Allow: return "Allow";
        case CombinationOutcome::Deny: return "Deny";
        case CombinationOutcome::Reevaluate: return "Reevaluate";
    }
    return "Deny";
}

std::string_view to_string(Outcome o) { return o == Outcome::Allow ? "ALLOW" : "DENY"; }

TrustFactors normalize_factors(const TrustSignals& s, const TrustConfig& cfg) {
    TrustFactors f;
    if (s.distance_km) {
        const double d = *s.distance_km;
        if (d <= cfg.d0_km) {
            f.geo = 1.0;
        } else if (d >= cfg.dmax_km) {
            f.geo = 0.0;
        } else {
            f.geo = (cfg.dmax_km - d) / (cfg.dmax_km - cfg.d0_km);
        }
    }
    const auto saturate = [](std::int64_t n, std::int64_t k) {
        return static_cast<double>(n) / static_cast<double>(n + k);
    };
    f.res = saturate(s.prior_requests_same_resource, cfg.k_res);
    f.hist = saturate(s.prior_successful_authz_total, cfg.k_hist);
    f.pen = 1.0 / (1.0 + static_cast<double>(s.penalties_in_window));
    f.meta = 0.5 * (s.ip_seen_before ? 1.0 : 0.0) + 0.25 * (s.service_seen_before ? 1.0 : 0.0) +
             0.25 * (s.time_in_usual_band ? 1.0 : 0.0);
    return f;
}

double trust_score(const TrustFactors& f, const TrustConfig& cfg) {
    const auto& w = cfg.weights;
    const double dot = w.geo * f.geo + w.res * f.res + w.hist * f.hist + w.pen * f.pen + w.meta * f.meta;
    const double total = w.geo + w.res + w.hist + w.pen + w.meta;
    // Dividing by the same-order sum makes all-ones exactly 1.0 despite rounding in the weights.
    return std::clamp(dot / total, 0.0, 1.0);
}

GateResult criteria_gate(const TrustSignals& s, const TrustConfig& cfg) {
    GateResult r;
    if (!s.distance_km) {
        r.failed.emplace_back("GEO_UNKNOWN");
    } else if (*s.distance_km > cfg.d0_km) {
        r.failed.emplace_back("GEO_OUT_OF_PERIMETER");
    }
    if (s.penalties_in_window > 0) r.failed.emplace_back("PENALTY_PRESENT");
    if (!s.mfa_verified_this_session) r.failed.emplace_back("MFA_NOT_VERIFIED");
    if (cfg.access_window && !cfg.access_window->contains(s.request_time)) {
        r.failed.emplace_back("OUTSIDE_ACCESS_WINDOW");
    }
    r.passed = r.failed.empty();
    return r;
}

CombinationOutcome combine_decision(policy::Decision pdp, double score, double threshold) {
    const bool passes = score >= threshold;
    switch (pdp) {
        case policy::Decision::Permit: return passes ? CombinationOutcome::Allow : CombinationOutcome::Deny;
        case policy::Decision::Indeterminate:
            return passes ? CombinationOutcome::Reevaluate : CombinationOutcome::Deny;
        case policy::Decision::Deny:
        case policy::Decision::NotApplicable: return CombinationOutcome::Deny;
    }
    return CombinationOutcome::Deny;
}

EvaluationMode determine_mode(const pip::TrustProfile& profile, const std::string& resource_id, Timestamp now,
                              const TrustConfig& cfg) {
    if (profile.as_of > now) throw std::invalid_argument("profile is newer than the evaluation time");
    const bool never_granted = profile.first_granted.count(resource_id) == 0;
    const bool too_few = profile.successes_in_cycle(resource_id) < cfg.promote_n;
    const bool penalised = profile.penalties_in_window >= cfg.demote_penalties;
    return (never_granted || too_few || penalised) ? EvaluationMode::Criteria : EvaluationMode::ScoreBased;
}

TrustSignals build_signals(const pip::TrustProfile& profile, const std::string& resource_id,
                           const policy::RequestContext& ctx, Timestamp now, const std::string& ip,
                           const std::string& service_id, bool mfa_verified) {
    TrustSignals s;
    s.request_time = now;
    s.ip = ip;
    s.service_id = service_id;
    const auto geo_of = [](const policy::AttributeBag& bag) -> std::optional<policy::GeoPoint> {
        const auto it = bag.find("geo");
        if (it == bag.end()) return std::nullopt;
        if (const auto* g = std::get_if<policy::GeoPoint>(&it->second)) return *g;
        return std::nullopt;
    };
    s.geo = geo_of(ctx.subject);
    const auto resource_geo = geo_of(ctx.resource);
    if (s.geo && resource_geo) s.distance_km = policy::geo_distance_km(*s.geo, *resource_geo);
    s.prior_requests_same_resource = profile.successes(resource_id);
    s.prior_successful_authz_total = profile.total_successful_authz;
    s.penalties_in_window = profile.penalties_in_window;
    s.ip_seen_before = !ip.empty() && profile.known_ips.count(ip) > 0;
    s.service_seen_before = !service_id.empty() && profile.known_services.count(service_id) > 0;
    s.time_in_usual_band = profile.usual_hours.count(static_cast<int>((to_unix(now) % 86400) / 3600)) > 0;
    s.mfa_verified_this_session = mfa_verified;
    return s;
}

}  // namespace ztiam::trust
