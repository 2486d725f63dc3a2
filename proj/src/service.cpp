#include "ztiam/service.hpp"

#include "ztiam/policy_json.hpp"

#include <spdlog/spdlog.h>

#include <fstream>
#include <sstream>

namespace ztiam {

namespace fs = std::filesystem;

Service::Service(ServiceConfig cfg, crypto::Bytes master_key, Options options)
    : cfg_(std::move(cfg)), clock_(options.clock ? options.clock : &system_clock_) {
    const bool persistent = !cfg_.data_dir.empty();
    const fs::path dir = cfg_.data_dir;
    if (persistent) fs::create_directories(dir);

    store_ = persistent ? std::make_unique<audit::EventStore>(dir / "events.log") : std::make_unique<audit::EventStore>();
    log_ = std::make_unique<audit::EventLog>(*store_, audit::EventLog::Options{cfg_.queue_capacity, true});
    pip_ = std::make_unique<pip::Pip>(*store_, *clock_, cfg_.pip);
    policies_ = persistent ? std::make_unique<trust::PolicyStore>(dir / "policy.json")
                           : std::make_unique<trust::PolicyStore>();
    authorizer_ = std::make_unique<trust::Authorizer>(*policies_, *pip_, *log_, *clock_, cfg_.trust);
    keystore_ = persistent ? std::make_unique<pki::Keystore>(dir / "keystore.bin", master_key)
                           : std::make_unique<pki::Keystore>(master_key);
    auth_ = std::make_unique<authn::AuthService>(
        *keystore_, *log_, *clock_, cfg_.auth,
        persistent ? std::optional<fs::path>(dir / "accounts.json") : std::nullopt);
    ca_ = std::make_unique<pki::CertificateAuthority>(*keystore_, *log_, *clock_);
    if (!ca_->initialized()) ca_->init_ca(cfg_.ca_subject, cfg_.ca_validity_years);
    geo_ = std::make_unique<authn::StaticGeoResolver>(cfg_.geo_static);

    if (!cfg_.policy_file.empty() && policies_->current()->version == 0) {
        std::ifstream in(cfg_.policy_file);
        if (!in) throw std::runtime_error("cannot read policy.file " + cfg_.policy_file);
        std::stringstream buf;
        buf << in.rdbuf();
        const auto version = policies_->publish(policy::parse_policy_set(buf.str()));
        spdlog::info("published {} as policy version {}", cfg_.policy_file, version);
    }
    if (options.start_background) pip_->start_background();
}

Service::~Service() {
    try {
        shutdown();
    } catch (const std::exception& ex) {
        spdlog::error("shutdown: {}", ex.what());
    }
}

void Service::shutdown() {
    if (stopped_) return;
    stopped_ = true;
    pip_->stop_background();
    log_->stop();
}

void Service::reload(const ServiceConfig& next) {
    auto pip_cfg = next.pip;
    pip_cfg.validate();
    authorizer_->set_config(next.trust);
    pip_->set_config(pip_cfg);
    std::lock_guard lock(cfg_mutex_);
    cfg_.trust = next.trust;
    cfg_.pip = pip_cfg;
}

ServiceConfig Service::config() const {
    std::lock_guard lock(cfg_mutex_);
    return cfg_;
}

}  // namespace ztiam
