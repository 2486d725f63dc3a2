#include "ztiam/authorizer.hpp"

#include <spdlog/spdlog.h>

#include <fstream>
#include <sstream>

namespace ztiam::trust {

using policy::Decision;

PolicyStore::PolicyStore() : current_(std::make_shared<const policy::PolicySet>()) {}

PolicyStore::PolicyStore(std::filesystem::path file) : PolicyStore() {
    if (std::filesystem::exists(file)) {
        std::ifstream in(file);
        std::stringstream buf;
        buf << in.rdbuf();
        current_ = std::make_shared<const policy::PolicySet>(policy::parse_policy_set(buf.str()));
    }
    file_ = std::move(file);
}

std::shared_ptr<const policy::PolicySet> PolicyStore::current() const {
    std::lock_guard lock(mutex_);
    return current_;
}

std::uint64_t PolicyStore::publish(policy::PolicySet set) {
    std::lock_guard lock(mutex_);
    set.version = current_->version + 1;
    if (file_) {
        const auto tmp = std::filesystem::path(file_->string() + ".tmp");
        {
            std::ofstream out(tmp, std::ios::trunc);
            out << policy::serialize_policy_set(set);
            if (!out) throw PolicyStoreUnavailable("cannot write " + tmp.string());
        }
        std::filesystem::rename(tmp, *file_);
    }
    current_ = std::make_shared<const policy::PolicySet>(std::move(set));
    return current_->version;
}

policy::RequestContext enrich_context(policy::RequestContext ctx, const pip::TrustProfile& profile,
                                      const std::string& resource_id) {
    ctx.subject.insert_or_assign("successful_authz", profile.total_successful_authz);
    ctx.subject.insert_or_assign("resource_successes", profile.successes(resource_id));
    ctx.subject.insert_or_assign("penalties_in_window", profile.penalties_in_window);
    return ctx;
}

Authorizer::Authorizer(const PolicySource& policies, pip::Pip& pip, audit::EventSink& sink, const Clock& clock,
                       TrustConfig cfg)
    : policies_(policies), pip_(pip), sink_(sink), clock_(clock) {
    set_config(std::move(cfg));
}

void Authorizer::set_config(TrustConfig cfg) {
    cfg.validate();
    auto next = std::make_shared<const TrustConfig>(std::move(cfg));
    std::lock_guard lock(cfg_mutex_);
    cfg_ = std::move(next);
}

std::shared_ptr<const TrustConfig> Authorizer::config() const {
    std::lock_guard lock(cfg_mutex_);
    return cfg_;
}

Decision Authorizer::run_pdp(const policy::PolicySet& set, const policy::RequestContext& ctx, FinalDecision& out) {
    ++pdp_evaluations_;
    ++out.pdp_evaluations;
    policy::Diagnostics diag;
    const auto d = policy::evaluate(set, ctx, &diag);
    for (const auto& msg : diag) spdlog::warn("pdp: {}", msg);
    return d;
}

FinalDecision Authorizer::authorize(const AccessRequest& request) {
    const auto cfg = config();
    const auto now = clock_.now();
    FinalDecision out;

    std::shared_ptr<const policy::PolicySet> set;
    pip::TrustProfile profile;
    try {
        set = policies_.current();
        profile = pip_.get(request.user_id, now);
    } catch (const PolicyStoreUnavailable& ex) {
        spdlog::error("authorize: policy store unavailable: {}", ex.what());
        out.reasons = {"STORE_UNAVAILABLE"};
        emit_outcome(request, out);
        return out;
    } catch (const audit::StoreUnavailable& ex) {
        spdlog::error("authorize: attribute store unavailable: {}", ex.what());
        out.reasons = {"STORE_UNAVAILABLE"};
        emit_outcome(request, out);
        return out;
    }
    out.policy_version = set->version;
    out.mode_used = determine_mode(profile, request.resource_id, now, *cfg);

    auto ctx = enrich_context(request.ctx, profile, request.resource_id);
    out.pdp = run_pdp(*set, ctx, out);
    auto signals = build_signals(profile, request.resource_id, ctx, now, request.ip, request.service_id,
                                 request.mfa_verified);

    if (out.mode_used == EvaluationMode::Criteria) {
        const auto gate = criteria_gate(signals, *cfg);
        if (gate.passed) {
            out.reasons.emplace_back("CRITERIA_PASSED");
        } else {
            out.reasons.emplace_back("CRITERIA_FAILED");
            out.reasons.insert(out.reasons.end(), gate.failed.begin(), gate.failed.end());
        }
        out.reasons.push_back("PDP_" + std::string(policy::to_string(out.pdp)));
        out.outcome = (gate.passed && out.pdp == Decision::Permit) ? Outcome::Allow : Outcome::Deny;
        emit_outcome(request, out);
        return out;
    }

    double score = trust_score(normalize_factors(signals, *cfg), *cfg);
    if (!request.mfa_verified) {
        out.score = score;
        out.reasons = {"MFA_NOT_VERIFIED", "PDP_" + std::string(policy::to_string(out.pdp))};
        out.outcome = Outcome::Deny;
        emit_outcome(request, out);
        return out;
    }
    auto combined = combine_decision(out.pdp, score, cfg->threshold);
    if (combined == CombinationOutcome::Reevaluate) {
        out.reasons.emplace_back("REEVALUATE");
        try {
            profile = pip_.force_refresh(request.user_id);
        } catch (const audit::StoreUnavailable&) {
            out.score = score;
            out.reasons.emplace_back("STORE_UNAVAILABLE");
            out.outcome = Outcome::Deny;
            emit_outcome(request, out);
            return out;
        }
        ctx = enrich_context(request.ctx, profile, request.resource_id);
        out.pdp = run_pdp(*set, ctx, out);
        signals = build_signals(profile, request.resource_id, ctx, now, request.ip, request.service_id,
                                request.mfa_verified);
        score = trust_score(normalize_factors(signals, *cfg), *cfg);
        combined = combine_decision(out.pdp, score, cfg->threshold);
        if (combined == CombinationOutcome::Reevaluate) {
            combined = CombinationOutcome::Deny;
            out.reasons.emplace_back("REEVALUATE_EXHAUSTED");
        }
    }
    out.score = score;
    out.reasons.push_back("PDP_" + std::string(policy::to_string(out.pdp)));
    out.reasons.emplace_back(score >= cfg->threshold ? "SCORE_ABOVE_THRESHOLD" : "SCORE_BELOW_THRESHOLD");
    out.outcome = combined == CombinationOutcome::Allow ? Outcome::Allow : Outcome::Deny;
    emit_outcome(request, out);
    return out;
}

void Authorizer::emit_outcome(const AccessRequest& request, const FinalDecision& decision) {
    audit::AuditEvent e;
    e.kind = decision.outcome == Outcome::Allow ? audit::EventKind::AuthzPermit : audit::EventKind::AuthzDeny;
    e.principal = request.user_id;
    e.resource_id = request.resource_id;
    e.time = clock_.now();
    e.ip = request.ip;
    e.service_id = request.service_id;
    if (const auto it = request.ctx.subject.find("geo"); it != request.ctx.subject.end()) {
        if (const auto* g = std::get_if<policy::GeoPoint>(&it->second)) e.geo = *g;
    }
    e.detail["mode"] = std::string(to_string(decision.mode_used));
    e.detail["pdp"] = std::string(policy::to_string(decision.pdp));
    e.detail["policy_version"] = std::to_string(decision.policy_version);
    if (decision.score) e.detail["score"] = std::to_string(*decision.score);
    std::string reasons;
    for (const auto& r : decision.reasons) reasons += (reasons.empty() ? "" : ",") + r;
    e.detail["reasons"] = reasons;

    if (decision.outcome == Outcome::Allow) {
        sink_.emit(std::move(e));
        return;
    }
    audit::AuditEvent penalty = e;
    penalty.kind = audit::EventKind::Penalty;
    penalty.detail = {{"cause", "AuthzDeny"}, {"reasons", reasons}};
    sink_.emit(std::move(e));
    sink_.emit(std::move(penalty));
}

}  // namespace ztiam::trust
