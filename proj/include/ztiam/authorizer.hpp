#pragma once

#include "ztiam/clock.hpp"
#include "ztiam/event_log.hpp"
#include "ztiam/pip.hpp"
#include "ztiam/policy.hpp"
#include "ztiam/trust.hpp"

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>

namespace ztiam::trust {

class PolicyStoreUnavailable : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class PolicySource {
public:
    virtual ~PolicySource() = default;
    /// Immutable snapshot; evaluations keep the version they started with.
    /// Throws PolicyStoreUnavailable.
    virtual std::shared_ptr<const policy::PolicySet> current() const = 0;
};

/// Policy administration point: publishes validated policy sets under strictly
/// increasing versions, optionally persisted to a document file.
class PolicyStore final : public PolicySource {
public:
    PolicyStore();
    explicit PolicyStore(std::filesystem::path file);

    std::shared_ptr<const policy::PolicySet> current() const override;

    /// Assigns version = current + 1 and swaps the snapshot atomically. Returns the new version.
    std::uint64_t publish(policy::PolicySet set);

private:
    mutable std::mutex mutex_;
    std::shared_ptr<const policy::PolicySet> current_;
    std::optional<std::filesystem::path> file_;
};

/// One authenticated access request. Subject attributes are already injected from
/// the session and user record; environment.time is server time.
struct AccessRequest {
    std::string user_id;
    std::string resource_id;
    policy::RequestContext ctx;
    std::string ip;
    std::string service_id;
    bool mfa_verified = false;
};

/// Policy enforcement: mode selection, PDP evaluation, scoring and the final
/// PDP/score combination, with audit emission for every outcome.
class Authorizer {
public:
    Authorizer(const PolicySource& policies, pip::Pip& pip, audit::EventSink& sink, const Clock& clock,
               TrustConfig cfg);

    FinalDecision authorize(const AccessRequest& request);

    /// Applied atomically; in-flight requests finish on the config they read.
    void set_config(TrustConfig cfg);
    std::shared_ptr<const TrustConfig> config() const;

    /// Total PDP evaluations performed (instrumentation for the no-caching property).
    std::uint64_t pdp_evaluations() const { return pdp_evaluations_.load(); }

private:
    policy::Decision run_pdp(const policy::PolicySet& set, const policy::RequestContext& ctx, FinalDecision& out);
    void emit_outcome(const AccessRequest& request, const FinalDecision& decision);

    const PolicySource& policies_;
    pip::Pip& pip_;
    audit::EventSink& sink_;
    const Clock& clock_;

    mutable std::mutex cfg_mutex_;
    std::shared_ptr<const TrustConfig> cfg_;
    std::atomic<std::uint64_t> pdp_evaluations_{0};
};

/// Adds profile-derived subject attributes (successful_authz, resource_successes,
/// penalties_in_window) so policies can condition on history.
policy::RequestContext enrich_context(policy::RequestContext ctx, const pip::TrustProfile& profile,
                                      const std::string& resource_id);

}  // namespace ztiam::trust
