#pragma once

#include "ztiam/authn.hpp"
#include "ztiam/authorizer.hpp"
#include "ztiam/clock.hpp"
#include "ztiam/config.hpp"
#include "ztiam/event_log.hpp"
#include "ztiam/pip.hpp"
#include "ztiam/pki.hpp"

#include <memory>

namespace ztiam {

/// Owns every component of a running instance and wires them together.
/// With an empty data_dir all state is memory-only.
class Service {
public:
    struct Options {
        /// Defaults to the system clock.
        const Clock* clock = nullptr;
        bool start_background = true;
    };

    Service(ServiceConfig cfg, crypto::Bytes master_key, Options options);
    Service(ServiceConfig cfg, crypto::Bytes master_key) : Service(std::move(cfg), std::move(master_key), Options{}) {}
    ~Service();

    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Applies the hot-reloadable sections (trust.*, pip.*). Other changes need a restart.
    void reload(const ServiceConfig& next);
    ServiceConfig config() const;

    const Clock& clock() const { return *clock_; }
    audit::EventStore& events() { return *store_; }
    audit::EventLog& log() { return *log_; }
    pip::Pip& pip() { return *pip_; }
    trust::PolicyStore& policies() { return *policies_; }
    trust::Authorizer& authorizer() { return *authorizer_; }
    authn::AuthService& auth() { return *auth_; }
    pki::Keystore& keystore() { return *keystore_; }
    pki::CertificateAuthority& ca() { return *ca_; }
    const authn::StaticGeoResolver& geo() const { return *geo_; }

    /// Flushes the audit log and stops background threads.
    void shutdown();

private:
    mutable std::mutex cfg_mutex_;
    ServiceConfig cfg_;
    SystemClock system_clock_;
    const Clock* clock_;

    std::unique_ptr<audit::EventStore> store_;
    std::unique_ptr<audit::EventLog> log_;
    std::unique_ptr<pip::Pip> pip_;
    std::unique_ptr<trust::PolicyStore> policies_;
    std::unique_ptr<trust::Authorizer> authorizer_;
    std::unique_ptr<pki::Keystore> keystore_;
    std::unique_ptr<authn::AuthService> auth_;
    std::unique_ptr<pki::CertificateAuthority> ca_;
    std::unique_ptr<authn::StaticGeoResolver> geo_;
    bool stopped_ = false;
};

}  // namespace ztiam
