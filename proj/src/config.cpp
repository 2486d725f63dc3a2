#include "ztiam/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace ztiam {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        auto t = trim(item);
        if (!t.empty()) out.push_back(std::move(t));
    }
    return out;
}

double parse_double(const std::string& v) {
    std::size_t used = 0;
    double d = 0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("expected a number, got '" + v + "'");
    }
    if (used != v.size()) throw std::invalid_argument("expected a number, got '" + v + "'");
    return d;
}

std::int64_t parse_int(const std::string& v) {
    std::int64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw std::invalid_argument("expected an integer, got '" + v + "'");
    return out;
}

std::int64_t parse_positive(const std::string& v) {
    const auto n = parse_int(v);
    if (n <= 0) throw std::invalid_argument("must be a positive integer");
    return n;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
    if (v == "false" || v == "no" || v == "off" || v == "0") return false;
    throw std::invalid_argument("expected true or false, got '" + v + "'");
}

policy::GeoPoint parse_geo(const std::string& v) {
    const auto parts = split(v, ',');
    if (parts.size() != 2) throw std::invalid_argument("expected 'lat,lon'");
    return policy::GeoPoint::make(parse_double(parts[0]), parse_double(parts[1]));
}

int parse_clock(const std::string& v) {
    int h = 0, m = 0;
    if (v.size() != 5 || v[2] != ':' || !std::isdigit(static_cast<unsigned char>(v[0])) ||
        !std::isdigit(static_cast<unsigned char>(v[1])) || !std::isdigit(static_cast<unsigned char>(v[3])) ||
        !std::isdigit(static_cast<unsigned char>(v[4]))) {
        throw std::invalid_argument("expected HH:MM");
    }
    h = (v[0] - '0') * 10 + (v[1] - '0');
    m = (v[3] - '0') * 10 + (v[4] - '0');
    if (h > 24 || m > 59 || (h == 24 && m != 0)) throw std::invalid_argument("time of day out of range");
    return h * 3600 + m * 60;
}

using Setter = std::function<void(ServiceConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"listen.host", [](ServiceConfig& c, const std::string& v) { c.host = v; }},
        {"listen.port",
         [](ServiceConfig& c, const std::string& v) {
             const auto p = parse_int(v);
             if (p < 0 || p > 65535) throw std::invalid_argument("port out of range");
             c.port = static_cast<int>(p);
         }},
        {"data_dir", [](ServiceConfig& c, const std::string& v) { c.data_dir = v; }},
        {"tls.enabled", [](ServiceConfig& c, const std::string& v) { c.tls.enabled = parse_bool(v); }},
        {"tls.cert_file", [](ServiceConfig& c, const std::string& v) { c.tls.cert_file = v; }},
        {"tls.key_file", [](ServiceConfig& c, const std::string& v) { c.tls.key_file = v; }},
        {"tls.require_client_cert",
         [](ServiceConfig& c, const std::string& v) { c.tls.require_client_cert = parse_bool(v); }},
        {"admin.token",
         [](ServiceConfig& c, const std::string& v) {
             if (v.size() < 16) throw std::invalid_argument("admin token must be at least 16 characters");
             c.admin_token = v;
         }},
        {"queue.capacity",
         [](ServiceConfig& c, const std::string& v) { c.queue_capacity = static_cast<std::size_t>(parse_positive(v)); }},
        {"proxy.allowlist", [](ServiceConfig& c, const std::string& v) { c.proxy_allowlist = split(v, ','); }},
        {"rate_limit.per_second",
         [](ServiceConfig& c, const std::string& v) {
             c.rate_limit_per_second = parse_double(v);
             if (!(c.rate_limit_per_second > 0)) throw std::invalid_argument("must be positive");
         }},
        {"rate_limit.burst",
         [](ServiceConfig& c, const std::string& v) {
             c.rate_limit_burst = parse_double(v);
             if (!(c.rate_limit_burst >= 1)) throw std::invalid_argument("must be at least 1");
         }},
        {"pip.refresh_seconds",
         [](ServiceConfig& c, const std::string& v) { c.pip.refresh_interval = Seconds{parse_positive(v)}; }},
        {"pip.staleness_seconds",
         [](ServiceConfig& c, const std::string& v) { c.pip.staleness_bound = Seconds{parse_positive(v)}; }},
        {"pip.usual_hour_min_logins",
         [](ServiceConfig& c, const std::string& v) { c.pip.usual_hour_min_logins = static_cast<int>(parse_positive(v)); }},
        {"trust.weights.geo", [](ServiceConfig& c, const std::string& v) { c.trust.weights.geo = parse_double(v); }},
        {"trust.weights.res", [](ServiceConfig& c, const std::string& v) { c.trust.weights.res = parse_double(v); }},
        {"trust.weights.hist", [](ServiceConfig& c, const std::string& v) { c.trust.weights.hist = parse_double(v); }},
        {"trust.weights.pen", [](ServiceConfig& c, const std::string& v) { c.trust.weights.pen = parse_double(v); }},
        {"trust.weights.meta", [](ServiceConfig& c, const std::string& v) { c.trust.weights.meta = parse_double(v); }},
        {"trust.threshold", [](ServiceConfig& c, const std::string& v) { c.trust.threshold = parse_double(v); }},
        {"trust.d0_km", [](ServiceConfig& c, const std::string& v) { c.trust.d0_km = parse_double(v); }},
        {"trust.dmax_km", [](ServiceConfig& c, const std::string& v) { c.trust.dmax_km = parse_double(v); }},
        {"trust.k_res", [](ServiceConfig& c, const std::string& v) { c.trust.k_res = parse_int(v); }},
        {"trust.k_hist", [](ServiceConfig& c, const std::string& v) { c.trust.k_hist = parse_int(v); }},
        {"trust.promote_n", [](ServiceConfig& c, const std::string& v) { c.trust.promote_n = parse_int(v); }},
        {"trust.cycle_days",
         [](ServiceConfig& c, const std::string& v) { c.trust.cycle_window = Seconds{parse_int(v) * 86400}; }},
        {"trust.penalty_window_days",
         [](ServiceConfig& c, const std::string& v) { c.trust.penalty_window = Seconds{parse_int(v) * 86400}; }},
        {"trust.demote_penalties",
         [](ServiceConfig& c, const std::string& v) { c.trust.demote_penalties = parse_int(v); }},
        {"trust.access_window",
         [](ServiceConfig& c, const std::string& v) {
             const auto dash = v.find('-');
             if (dash == std::string::npos) throw std::invalid_argument("expected HH:MM-HH:MM");
             c.trust.access_window =
                 trust::DailyWindow{parse_clock(trim(v.substr(0, dash))), parse_clock(trim(v.substr(dash + 1)))};
         }},
        {"auth.issuer", [](ServiceConfig& c, const std::string& v) { c.auth.issuer = v; }},
        {"auth.session_ttl_seconds",
         [](ServiceConfig& c, const std::string& v) { c.auth.session_ttl = Seconds{parse_positive(v)}; }},
        {"auth.min_password_length",
         [](ServiceConfig& c, const std::string& v) {
             c.auth.min_password_length = static_cast<std::size_t>(parse_positive(v));
         }},
        {"auth.kdf.scrypt_n",
         [](ServiceConfig& c, const std::string& v) {
             const auto n = parse_positive(v);
             if (n < 2 || (n & (n - 1)) != 0) throw std::invalid_argument("must be a power of two");
             c.auth.kdf.n = static_cast<std::uint64_t>(n);
         }},
        {"auth.lockout_threshold",
         [](ServiceConfig& c, const std::string& v) { c.auth.lockout_threshold = static_cast<int>(parse_positive(v)); }},
        {"auth.lockout_window_seconds",
         [](ServiceConfig& c, const std::string& v) { c.auth.lockout_window = Seconds{parse_positive(v)}; }},
        {"auth.lockout_duration_seconds",
         [](ServiceConfig& c, const std::string& v) { c.auth.lockout_duration = Seconds{parse_positive(v)}; }},
        {"policy.file", [](ServiceConfig& c, const std::string& v) { c.policy_file = v; }},
        {"ca.subject", [](ServiceConfig& c, const std::string& v) { c.ca_subject = v; }},
        {"ca.validity_years",
         [](ServiceConfig& c, const std::string& v) { c.ca_validity_years = static_cast<int>(parse_positive(v)); }},
        {"ca.device_validity_days",
         [](ServiceConfig& c, const std::string& v) { c.device_validity_days = static_cast<int>(parse_positive(v)); }},
    };
    return table;
}

constexpr std::string_view kGeoPrefix = "geo.static.";

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& [k, _] : setters()) out.push_back(k);
    out.push_back(std::string(kGeoPrefix) + "<ip>");
    return out;
}

ServiceConfig parse_config(const std::string& text, const std::string& source) {
    ServiceConfig cfg;
    std::map<std::string, int> seen;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const auto line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(source, line_no, "expected 'key = value'");
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(source, line_no, "missing key");
        if (const auto it = seen.find(key); it != seen.end()) {
            throw ConfigError(source, line_no, "duplicate key '" + key + "' (first set on line " +
                                                   std::to_string(it->second) + ")");
        }
        seen[key] = line_no;
        try {
            if (key.rfind(kGeoPrefix, 0) == 0 && key.size() > kGeoPrefix.size()) {
                cfg.geo_static[key.substr(kGeoPrefix.size())] = parse_geo(value);
                continue;
            }
            const auto it = setters().find(key);
            if (it == setters().end()) throw ConfigError(source, line_no, "unknown key '" + key + "'");
            it->second(cfg, value);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& ex) {
            throw ConfigError(source, line_no, key + ": " + ex.what());
        }
    }

    const auto line_of = [&](std::initializer_list<std::string_view> keys) {
        for (auto k : keys) {
            for (const auto& [key, ln] : seen) {
                if (key.rfind(k, 0) == 0) return ln;
            }
        }
        return 0;
    };

    cfg.pip.cycle_window = cfg.trust.cycle_window;
    cfg.pip.penalty_window = cfg.trust.penalty_window;
    try {
        cfg.trust.validate();
    } catch (const std::invalid_argument& ex) {
        const std::string msg = ex.what();
        const auto key = msg.substr(0, msg.find(':'));
        const std::string prefix = key.back() == '*' ? key.substr(0, key.size() - 1) : key;
        throw ConfigError(source, line_of({prefix, "trust."}), msg);
    }
    try {
        cfg.pip.validate();
    } catch (const std::invalid_argument& ex) {
        throw ConfigError(source, line_of({"pip."}), ex.what());
    }
    if (cfg.tls.require_client_cert && !cfg.tls.enabled) {
        throw ConfigError(source, line_of({"tls.require_client_cert"}), "tls.require_client_cert needs tls.enabled");
    }
    if (cfg.tls.cert_file.empty() != cfg.tls.key_file.empty()) {
        throw ConfigError(source, line_of({"tls.cert_file", "tls.key_file"}),
                          "tls.cert_file and tls.key_file must be set together");
    }
    return cfg;
}

ServiceConfig load_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError(file.string(), 0, "cannot read config file");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), file.string());
}

}  // namespace ztiam
