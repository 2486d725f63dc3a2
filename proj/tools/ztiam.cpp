// ztiam: administrator command-line tool.
//
// Exit codes: 0 success, 1 operational error, 2 usage error.

#include "ztiam/config.hpp"
#include "ztiam/gateway.hpp"
#include "ztiam/policy_json.hpp"
#include "ztiam/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

namespace {

using nlohmann::json;
using namespace ztiam;

constexpr int kOk = 0;
constexpr int kFail = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Output {
    bool structured = false;

    void record(const json& j) const { std::cout << j.dump() << std::endl; }
    void line(const std::string& s) const { std::cout << s << std::endl; }
    void error(const std::string& message, json extra = json::object()) const {
        if (structured) {
            extra["ok"] = false;
            extra["message"] = message;
            record(extra);
        } else {
            std::cerr << "error: " << message << std::endl;
        }
    }
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

/// Shortest decimal text that survives a 12-significant-digit round, so
/// outputs are stable across harmless floating-point noise.
double tidy(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return std::strtod(buf, nullptr);
}

std::string tidy_text(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

std::string config_path(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("ZTIAM_CONFIG"); env && *env) return env;
    return {};
}

// --- policy ---------------------------------------------------------------------

int policy_lint(const Output& out, const std::string& file) {
    std::string text;
    try {
        text = read_file(file);
    } catch (const std::exception& ex) {
        out.error(ex.what(), json{{"file", file}});
        return kFail;
    }
    try {
        const auto set = policy::parse_policy_set(text);
        std::size_t rules = 0;
        for (const auto& p : set.policies) rules += p.rules.size();
        if (out.structured) {
            out.record(json{{"ok", true},
                            {"file", file},
                            {"policy_set_id", set.id},
                            {"policies", set.policies.size()},
                            {"rules", rules}});
        } else {
            out.line("ok: " + set.id + " (" + std::to_string(set.policies.size()) + " policies, " +
                     std::to_string(rules) + " rules)");
        }
        return kOk;
    } catch (const policy::PolicyError& ex) {
        if (out.structured) {
            out.record(json{{"ok", false},
                            {"file", file},
                            {"error", policy::to_string(ex.code())},
                            {"location", ex.location()},
                            {"message", ex.what()}});
        } else {
            std::cout << file << ": " << ex.what() << std::endl;
        }
        return kFail;
    }
}

int policy_eval(const Output& out, const std::string& file, const std::string& context_file) {
    try {
        const auto set = policy::parse_policy_set(read_file(file));
        const auto ctx = policy::context_from_json(json::parse(read_file(context_file)));
        policy::Diagnostics diag;
        const auto decision = policy::evaluate(set, ctx, &diag);
        if (out.structured) {
            out.record(json{{"decision", policy::to_string(decision)}, {"diagnostics", diag}});
        } else {
            out.line(std::string(policy::to_string(decision)));
            for (const auto& d : diag) std::cerr << "note: " << d << std::endl;
        }
        return kOk;
    } catch (const std::exception& ex) {
        out.error(ex.what());
        return kFail;
    }
}

// --- trust ----------------------------------------------------------------------

trust::TrustFactors parse_factors(const std::string& spec) {
    std::map<std::string, double*> slots;
    trust::TrustFactors f;
    slots["f_geo"] = &f.geo;
    slots["f_res"] = &f.res;
    slots["f_hist"] = &f.hist;
    slots["f_pen"] = &f.pen;
    slots["f_meta"] = &f.meta;
    std::set<std::string> seen;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw UsageError("factor '" + item + "' must be name=value");
        const auto name = item.substr(0, eq);
        const auto it = slots.find(name);
        if (it == slots.end()) throw UsageError("unknown factor '" + name + "'");
        if (!seen.insert(name).second) throw UsageError("factor '" + name + "' given twice");
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(item.substr(eq + 1), &used);
        } catch (const std::exception&) {
            throw UsageError("factor '" + name + "' is not a number");
        }
        if (used != item.size() - eq - 1) throw UsageError("factor '" + name + "' is not a number");
        if (!(v >= 0.0 && v <= 1.0)) throw UsageError("factor '" + name + "' must lie in [0, 1]");
        *it->second = v;
    }
    if (seen.size() != slots.size()) throw UsageError("all of f_geo, f_res, f_hist, f_pen, f_meta are required");
    return f;
}

int trust_score_cmd(const Output& out, const std::string& factors_spec, const std::string& cfg_file) {
    const auto factors = parse_factors(factors_spec);
    trust::TrustConfig cfg;
    if (!cfg_file.empty()) {
        try {
            cfg = load_config(cfg_file).trust;
        } catch (const std::exception& ex) {
            out.error(ex.what());
            return kFail;
        }
    }
    const double score = trust::trust_score(factors, cfg);
    const policy::Decision pdps[] = {policy::Decision::Permit, policy::Decision::Deny,
                                     policy::Decision::Indeterminate, policy::Decision::NotApplicable};
    if (out.structured) {
        json outcomes = json::object();
        for (auto d : pdps) {
            outcomes[std::string(policy::to_string(d))] = trust::to_string(trust::combine_decision(d, score, cfg.threshold));
        }
        out.record(json{{"score", tidy(score)}, {"threshold", tidy(cfg.threshold)}, {"outcomes", outcomes}});
    } else {
        out.line("score " + tidy_text(score));
        out.line("threshold " + tidy_text(cfg.threshold));
        for (auto d : pdps) {
            out.line(std::string(policy::to_string(d)) + " -> " +
                     std::string(trust::to_string(trust::combine_decision(d, score, cfg.threshold))));
        }
    }
    return kOk;
}

// --- client verbs ----------------------------------------------------------------

struct ClientOptions {
    std::string server = "http://127.0.0.1:8443";
    std::string token;
    std::string ca_cert;
    bool insecure = false;
};

std::unique_ptr<httplib::Client> make_client(const ClientOptions& o) {
    auto client = std::make_unique<httplib::Client>(o.server);
    if (!client->is_valid()) throw std::runtime_error("invalid server URL " + o.server);
    client->set_connection_timeout(5);
    client->set_read_timeout(10);
    if (!o.ca_cert.empty()) client->set_ca_cert_path(o.ca_cert.c_str());
    if (o.insecure) client->enable_server_certificate_verification(false);
    const auto token = !o.token.empty() ? o.token : [] {
        const char* env = std::getenv("ZTIAM_ADMIN_TOKEN");
        return std::string(env ? env : "");
    }();
    if (!token.empty()) client->set_bearer_token_auth(token);
    return client;
}

std::string describe(const httplib::Result& r) {
    if (!r) return "request failed: " + httplib::to_string(r.error());
    std::string msg = "HTTP " + std::to_string(r->status);
    try {
        const auto j = json::parse(r->body);
        if (j.contains("error")) msg += " " + j["error"].get<std::string>();
        if (j.contains("message")) msg += ": " + j["message"].get<std::string>();
    } catch (const std::exception&) {
    }
    return msg;
}

int device_enroll(const Output& out, const ClientOptions& co, const std::string& id, const std::string& pubkey_file,
                  const std::string& out_file, int validity_days) {
    try {
        json body{{"device_id", id}, {"public_key", read_file(pubkey_file)}};
        if (validity_days > 0) body["validity_days"] = validity_days;
        auto client = make_client(co);
        const auto r = client->Post("/v1/device/enroll", body.dump(), "application/json");
        if (!r || r->status != 200) {
            out.error(describe(r));
            return kFail;
        }
        const auto j = json::parse(r->body);
        const auto path = out_file.empty() ? id + ".crt" : out_file;
        std::ofstream(path, std::ios::trunc) << j.at("certificate").get<std::string>();
        if (out.structured) {
            out.record(json{{"ok", true}, {"device_id", id}, {"serial", j.at("serial")}, {"certificate_file", path}});
        } else {
            out.line("enrolled " + id + " serial " + std::to_string(j.at("serial").get<std::uint64_t>()) + " -> " +
                     path);
        }
        return kOk;
    } catch (const std::exception& ex) {
        out.error(ex.what());
        return kFail;
    }
}

int events_tail(const Output& out, const ClientOptions& co, std::uint64_t after, bool follow, double timeout_s,
                int poll_ms) {
    try {
        auto client = make_client(co);
        const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
        for (;;) {
            const auto r = client->Get("/v1/events?after=" + std::to_string(after));
            if (!r || r->status != 200) {
                out.error(describe(r));
                return kFail;
            }
            std::stringstream lines(r->body);
            std::string line;
            while (std::getline(lines, line)) {
                if (line.empty()) continue;
                const auto e = audit::decode_event(line);
                after = std::max(after, e.seq);
                if (out.structured) {
                    out.line(line);
                } else {
                    std::string text = std::to_string(e.seq) + " " + std::to_string(to_unix(e.time)) + " " +
                                       std::string(audit::to_string(e.kind)) + " " + e.principal;
                    if (e.resource_id) text += " resource=" + *e.resource_id;
                    if (!e.ip.empty()) text += " ip=" + e.ip;
                    for (const auto& [k, v] : e.detail) text += " " + k + "=" + v;
                    out.line(text);
                }
            }
            if (!follow) return kOk;
            if (timeout_s > 0 && std::chrono::steady_clock::now() >= deadline) return kOk;
            std::this_thread::sleep_for(std::chrono::milliseconds(poll_ms));
        }
    } catch (const std::exception& ex) {
        out.error(ex.what());
        return kFail;
    }
}

// --- serve ------------------------------------------------------------------------

int serve(const Output& out, const std::string& cfg_flag) {
    const auto path = config_path(cfg_flag);
    if (path.empty()) throw UsageError("serve needs --config or ZTIAM_CONFIG");

    ServiceConfig cfg;
    try {
        cfg = load_config(path);
    } catch (const ConfigError& ex) {
        out.error(ex.what(), json{{"file", ex.source()}, {"line", ex.line()}});
        return kFail;
    }

    crypto::Bytes key;
    try {
        key = pki::master_key_from_env();
    } catch (const pki::KeystoreError& ex) {
        if (!cfg.data_dir.empty()) {
            out.error(ex.what());
            return kFail;
        }
        spdlog::warn("{}; using an ephemeral key for this memory-only instance", ex.what());
        key = crypto::random_bytes(crypto::kAeadKeySize);
    }

    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    sigaddset(&signals, SIGHUP);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    try {
        Service svc(cfg, key);
        gateway::Gateway gw(svc);
        const int port = gw.start();
        if (out.structured) {
            out.record(json{{"event", "listening"}, {"host", cfg.host}, {"port", port}, {"tls", gw.tls()}});
        } else {
            out.line(std::string("listening on ") + (gw.tls() ? "https://" : "http://") + cfg.host + ":" +
                     std::to_string(port));
        }
        for (;;) {
            int sig = 0;
            sigwait(&signals, &sig);
            if (sig != SIGHUP) break;
            try {
                svc.reload(load_config(path));
                spdlog::info("configuration reloaded from {}", path);
            } catch (const std::exception& ex) {
                spdlog::error("reload rejected, keeping current configuration: {}", ex.what());
            }
        }
        gw.stop();
        svc.shutdown();
        return kOk;
    } catch (const std::exception& ex) {
        out.error(ex.what());
        return kFail;
    }
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("ztiam"));
    spdlog::set_level(spdlog::level::info);

    CLI::App app{"ztiam administration tool"};
    app.require_subcommand(1);
    Output out;
    std::string output_mode = "text";
    app.add_option("--output", output_mode, "Output format")->check(CLI::IsMember({"text", "structured"}));
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Debug logging");

    std::string cfg_file;
    auto* serve_cmd = app.add_subcommand("serve", "Run the gateway until SIGINT/SIGTERM (SIGHUP reloads)");
    serve_cmd->add_option("--config", cfg_file, "Service config file (default: $ZTIAM_CONFIG)");

    auto* policy_cmd = app.add_subcommand("policy", "Policy documents");
    policy_cmd->require_subcommand(1);
    std::string policy_file, context_file;
    auto* lint_cmd = policy_cmd->add_subcommand("lint", "Validate a policy document");
    lint_cmd->add_option("--file", policy_file, "Policy document")->required();
    auto* eval_cmd = policy_cmd->add_subcommand("eval", "Evaluate a policy document against a request context");
    eval_cmd->add_option("--file", policy_file, "Policy document")->required();
    eval_cmd->add_option("--context", context_file, "Request context document")->required();

    auto* trust_cmd = app.add_subcommand("trust", "Trust score what-ifs");
    trust_cmd->require_subcommand(1);
    std::string factors;
    auto* score_cmd = trust_cmd->add_subcommand("score", "Score a factor vector and show the outcome table");
    score_cmd->add_option("--factors", factors, "f_geo=..,f_res=..,f_hist=..,f_pen=..,f_meta=..")->required();
    score_cmd->add_option("--config", cfg_file, "Service config file for weights and threshold");

    ClientOptions client;
    const auto add_client_flags = [&](CLI::App* cmd) {
        cmd->add_option("--server", client.server, "Service base URL")->capture_default_str();
        cmd->add_option("--token", client.token, "Admin token (default: $ZTIAM_ADMIN_TOKEN)");
        cmd->add_option("--ca-cert", client.ca_cert, "CA bundle for https");
        cmd->add_flag("--insecure", client.insecure, "Skip server certificate verification");
    };

    auto* device_cmd = app.add_subcommand("device", "Device identities");
    device_cmd->require_subcommand(1);
    std::string device_id, pubkey_file, cert_out;
    int validity_days = 0;
    auto* enroll_cmd = device_cmd->add_subcommand("enroll", "Enroll a device and write its certificate");
    enroll_cmd->add_option("--id", device_id, "Device id")->required();
    enroll_cmd->add_option("--pubkey", pubkey_file, "Ed25519 public key (PEM)")->required();
    enroll_cmd->add_option("--out", cert_out, "Certificate output path (default: <id>.crt)");
    enroll_cmd->add_option("--validity-days", validity_days, "Certificate lifetime");
    add_client_flags(enroll_cmd);

    auto* events_cmd = app.add_subcommand("events", "Audit events");
    events_cmd->require_subcommand(1);
    std::uint64_t after = 0;
    bool follow = false;
    double timeout_s = 0;
    int poll_ms = 500;
    auto* tail_cmd = events_cmd->add_subcommand("tail", "Print audit events");
    tail_cmd->add_option("--after", after, "Start after this sequence number");
    tail_cmd->add_flag("-f,--follow", follow, "Keep polling for new events");
    tail_cmd->add_option("--timeout", timeout_s, "Stop following after this many seconds (0: never)");
    tail_cmd->add_option("--poll-ms", poll_ms, "Polling interval")->check(CLI::Range(10, 60000));
    add_client_flags(tail_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }
    out.structured = output_mode == "structured";
    if (verbose) spdlog::set_level(spdlog::level::debug);

    try {
        if (*serve_cmd) return serve(out, cfg_file);
        if (*lint_cmd) return policy_lint(out, policy_file);
        if (*eval_cmd) return policy_eval(out, policy_file, context_file);
        if (*score_cmd) return trust_score_cmd(out, factors, cfg_file);
        if (*enroll_cmd) return device_enroll(out, client, device_id, pubkey_file, cert_out, validity_days);
        if (*tail_cmd) return events_tail(out, client, after, follow, timeout_s, poll_ms);
    } catch (const UsageError& ex) {
        out.error(ex.what());
        return kUsage;
    }
    return kUsage;
}
