#pragma once

#include "ztiam/authn.hpp"
#include "ztiam/pip.hpp"
#include "ztiam/trust.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ztiam {

class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string source, int line, const std::string& message)
        : std::runtime_error(source + ":" + std::to_string(line) + ": " + message),
          source_(std::move(source)),
          line_(line) {}

    const std::string& source() const { return source_; }
    int line() const { return line_; }

private:
    std::string source_;
    int line_;
};

struct TlsSettings {
    bool enabled = false;
    /// Empty paths with TLS enabled: a server certificate is issued by the internal CA.
    std::string cert_file;
    std::string key_file;
    bool require_client_cert = false;
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8443;  // 0 picks an ephemeral port
    /// Empty means memory-only state.
    std::string data_dir;
    TlsSettings tls;
    std::string admin_token;
    std::size_t queue_capacity = 4096;
    std::vector<std::string> proxy_allowlist;
    double rate_limit_per_second = 10.0;
    double rate_limit_burst = 20.0;

    pip::PipConfig pip;
    trust::TrustConfig trust;
    authn::AuthnConfig auth;
    std::map<std::string, policy::GeoPoint> geo_static;

    std::string policy_file;
    std::string ca_subject = "ztiam internal CA";
    int ca_validity_years = 10;
    int device_validity_days = 365;
};

/// Line-oriented `key = value` text; `#` starts a comment. Unknown keys, duplicate
/// keys, malformed values and cross-field violations raise ConfigError with the line.
ServiceConfig parse_config(const std::string& text, const std::string& source = "<config>");
ServiceConfig load_config(const std::filesystem::path& file);

/// The keys accepted by parse_config (geo.static.<ip> is a prefix).
std::vector<std::string> config_keys();

}  // namespace ztiam
