#include "ztiam/gateway.hpp"

#include "ztiam/policy_json.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <openssl/pem.h>
#include <openssl/ssl.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <thread>

namespace ztiam::gateway {

using nlohmann::json;
using httplib::Request;
using httplib::Response;

bool RateLimiter::allow(const std::string& key, Clock::time_point now) {
    std::lock_guard lock(mutex_);
    auto [it, inserted] = buckets_.try_emplace(key, Bucket{burst_, now});
    auto& b = it->second;
    if (!inserted) {
        const double elapsed = std::chrono::duration<double>(now - b.last).count();
        b.tokens = std::min(burst_, b.tokens + std::max(0.0, elapsed) * rate_);
        b.last = std::max(b.last, now);
    }
    if (b.tokens < 1.0) return false;
    b.tokens -= 1.0;
    if (buckets_.size() > 10000) {
        std::erase_if(buckets_, [&](const auto& kv) {
            return std::chrono::duration<double>(now - kv.second.last).count() * rate_ >= burst_;
        });
    }
    return true;
}

namespace {

struct HttpError : std::runtime_error {
    HttpError(int status, std::string code, const std::string& message)
        : std::runtime_error(message), status(status), code(std::move(code)) {}
    int status;
    std::string code;
};

void reply(Response& res, int status, json body) {
    if (body.is_object()) body["correlation_id"] = audit::CorrelationScope::current();
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void reply_error(Response& res, int status, std::string_view code, const std::string& message, json extra = {}) {
    json body = extra.is_object() ? std::move(extra) : json::object();
    body["error"] = code;
    body["message"] = message;
    reply(res, status, std::move(body));
}

json parse_body(const Request& req) {
    json body;
    try {
        body = json::parse(req.body);
    } catch (const json::parse_error& ex) {
        throw HttpError(400, "MALFORMED_BODY", ex.what());
    }
    if (!body.is_object()) throw HttpError(400, "MALFORMED_BODY", "body must be a JSON object");
    return body;
}

std::string required_string(const json& body, const char* field) {
    const auto it = body.find(field);
    if (it == body.end() || !it->is_string()) {
        throw HttpError(400, "MALFORMED_BODY", std::string("field '") + field + "' must be a string");
    }
    return it->get<std::string>();
}

std::string bearer_token(const Request& req) {
    const auto h = req.get_header_value("Authorization");
    constexpr std::string_view prefix = "Bearer ";
    if (h.size() <= prefix.size() || h.compare(0, prefix.size(), prefix) != 0) return {};
    return h.substr(prefix.size());
}

int auth_status(authn::AuthError::Code c) {
    using C = authn::AuthError::Code;
    switch (c) {
        case C::UsernameTaken: return 409;
        case C::WeakPassword: return 400;
        case C::AccountLocked: return 423;
        case C::BadCredentials:
        case C::CodeInvalid:
        case C::PendingExpired:
        case C::TooManyAttempts: return 401;
    }
    return 400;
}

int pki_status(pki::PkiError::Code c) {
    using C = pki::PkiError::Code;
    switch (c) {
        case C::CaExists:
        case C::DuplicateDevice: return 409;
        case C::NoCa: return 503;
        case C::MalformedKey: return 400;
        case C::UnknownDevice:
        case C::UnknownSerial: return 404;
        default: return 401;
    }
}

policy::GeoPoint parse_geo_param(const std::string& v) {
    const auto comma = v.find(',');
    if (comma == std::string::npos) throw HttpError(400, "MALFORMED_QUERY", "geo must be 'lat,lon'");
    try {
        return policy::GeoPoint::make(std::stod(v.substr(0, comma)), std::stod(v.substr(comma + 1)));
    } catch (const std::exception& ex) {
        throw HttpError(400, "MALFORMED_QUERY", std::string("geo: ") + ex.what());
    }
}

std::string pem_of(X509* x) {
    BIO* b = BIO_new(BIO_s_mem());
    PEM_write_bio_X509(b, x);
    char* data = nullptr;
    const long n = BIO_get_mem_data(b, &data);
    std::string out(data, static_cast<std::size_t>(n));
    BIO_free(b);
    return out;
}

X509* x509_from_pem(const std::string& pem) {
    BIO* b = BIO_new_mem_buf(pem.data(), static_cast<int>(pem.size()));
    X509* x = PEM_read_bio_X509(b, nullptr, nullptr, nullptr);
    BIO_free(b);
    return x;
}

EVP_PKEY* key_from_pem(const std::string& pem) {
    BIO* b = BIO_new_mem_buf(pem.data(), static_cast<int>(pem.size()));
    EVP_PKEY* k = PEM_read_bio_PrivateKey(b, nullptr, nullptr, nullptr);
    BIO_free(b);
    return k;
}

json decision_json(const trust::FinalDecision& d) {
    json j;
    j["decision"] = trust::to_string(d.outcome);
    j["mode"] = trust::to_string(d.mode_used);
    j["pdp"] = policy::to_string(d.pdp);
    if (d.score) j["score"] = *d.score;
    j["reasons"] = d.reasons;
    j["policy_version"] = d.policy_version;
    return j;
}

}  // namespace

struct Gateway::Impl {
    Service& svc;
    ServiceConfig cfg;
    RateLimiter limiter;
    std::unique_ptr<httplib::Server> server;
    std::thread thread;
    int port = -1;
    bool tls = false;

    explicit Impl(Service& s)
        : svc(s), cfg(s.config()), limiter(cfg.rate_limit_per_second, cfg.rate_limit_burst) {
        make_server();
        routes();
    }

    void make_server() {
        if (!cfg.tls.enabled) {
            server = std::make_unique<httplib::Server>();
            return;
        }
        tls = true;
        std::string cert_pem, key_pem;
        if (cfg.tls.cert_file.empty()) {
            const auto issued = svc.ca().issue_server_certificate("localhost");
            cert_pem = issued.certificate_pem;
            key_pem = issued.private_key_pem;
        }
        const auto ca_pem = svc.ca().ca_certificate_pem();
        const auto setup = [this, cert_pem, key_pem, ca_pem](SSL_CTX& ctx) {
            SSL_CTX_set_min_proto_version(&ctx, TLS1_2_VERSION);
            SSL_CTX_set_options(&ctx, SSL_OP_NO_COMPRESSION);
            if (cert_pem.empty()) {
                if (SSL_CTX_use_certificate_chain_file(&ctx, cfg.tls.cert_file.c_str()) != 1 ||
                    SSL_CTX_use_PrivateKey_file(&ctx, cfg.tls.key_file.c_str(), SSL_FILETYPE_PEM) != 1) {
                    return false;
                }
            } else {
                X509* cert = x509_from_pem(cert_pem);
                EVP_PKEY* key = key_from_pem(key_pem);
                const bool ok = cert && key && SSL_CTX_use_certificate(&ctx, cert) == 1 &&
                                SSL_CTX_use_PrivateKey(&ctx, key) == 1;
                X509_free(cert);
                EVP_PKEY_free(key);
                if (!ok) return false;
            }
            if (cfg.tls.require_client_cert) {
                X509* ca = x509_from_pem(ca_pem);
                const bool ok = ca && X509_STORE_add_cert(SSL_CTX_get_cert_store(&ctx), ca) == 1;
                X509_free(ca);
                if (!ok) return false;
                SSL_CTX_set_verify(&ctx, SSL_VERIFY_PEER | SSL_VERIFY_FAIL_IF_NO_PEER_CERT, nullptr);
            }
            return true;
        };
        auto ssl = std::make_unique<httplib::SSLServer>(setup);
        if (!ssl->is_valid()) throw std::runtime_error("TLS setup failed (check tls.cert_file / tls.key_file)");
        server = std::move(ssl);
    }

    using Handler = std::function<void(const Request&, Response&)>;

    httplib::Server::Handler wrap(Handler h, bool rate_limited) {
        return [this, h = std::move(h), rate_limited](const Request& req, Response& res) {
            audit::CorrelationScope scope(crypto::random_token(8));
            res.set_header(std::string(kCorrelationHeader), audit::CorrelationScope::current());
            if (rate_limited && !limiter.allow(req.remote_addr)) {
                reply_error(res, 429, "RATE_LIMITED", "too many requests");
                return;
            }
            try {
                h(req, res);
            } catch (const HttpError& e) {
                reply_error(res, e.status, e.code, e.what());
            } catch (const authn::AuthError& e) {
                reply_error(res, auth_status(e.code()), authn::to_string(e.code()), e.what());
            } catch (const pki::PkiError& e) {
                reply_error(res, pki_status(e.code()), pki::to_string(e.code()), e.what());
            } catch (const policy::PolicyError& e) {
                reply_error(res, 422, policy::to_string(e.code()), e.what(), json{{"location", e.location()}});
            } catch (const audit::QueueFull& e) {
                reply_error(res, 503, "QUEUE_FULL", e.what());
            } catch (const audit::StoreUnavailable& e) {
                reply_error(res, 503, "STORE_UNAVAILABLE", e.what());
            } catch (const json::exception& e) {
                reply_error(res, 400, "MALFORMED_BODY", e.what());
            } catch (const std::invalid_argument& e) {
                reply_error(res, 400, "MALFORMED_BODY", e.what());
            } catch (const std::exception& e) {
                spdlog::error("{} {}: {}", req.method, req.path, e.what());
                reply_error(res, 500, "INTERNAL", "internal error");
            }
        };
    }

    void require_admin(const Request& req) const {
        const auto token = bearer_token(req);
        if (token.empty()) throw HttpError(401, "UNAUTHENTICATED", "admin bearer token required");
        if (cfg.admin_token.empty() ||
            !crypto::constant_time_equal(crypto::as_bytes(token), crypto::as_bytes(cfg.admin_token))) {
            throw HttpError(403, "FORBIDDEN", "admin token required");
        }
    }

    authn::LoginContext context_of(const Request& req) const {
        authn::TransportMetadata meta;
        meta.peer_ip = req.remote_addr;
        for (const auto& [name, value] : req.headers) {
            std::string lower = name;
            std::transform(lower.begin(), lower.end(), lower.begin(),
                           [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
            meta.headers.emplace(std::move(lower), value);
        }
        return authn::extract_context(meta, svc.geo(), svc.clock(), cfg.proxy_allowlist);
    }

    void routes() {
        auto& s = *server;
        s.set_logger([](const Request& req, const Response& res) {
            spdlog::debug("{} {} -> {}", req.method, req.path, res.status);
        });
        if (tls && cfg.tls.require_client_cert) {
            s.set_pre_routing_handler([this](const Request& req, Response& res) {
                X509* peer = req.ssl ? SSL_get1_peer_certificate(req.ssl) : nullptr;
                if (!peer) {
                    reply_error(res, 401, "CLIENT_CERT_REQUIRED", "client certificate required");
                    return httplib::Server::HandlerResponse::Handled;
                }
                const auto pem = pem_of(peer);
                X509_free(peer);
                const auto status = svc.ca().verify_cert_chain(pem, svc.clock().now());
                if (status != pki::CertStatus::Valid) {
                    reply_error(res, 401, pki::to_string(status), "client certificate rejected");
                    return httplib::Server::HandlerResponse::Handled;
                }
                return httplib::Server::HandlerResponse::Unhandled;
            });
        }

        s.Get("/healthz", [](const Request&, Response& res) { res.set_content("{\"status\":\"ok\"}", "application/json"); });

        s.Post("/v1/auth/register", wrap([this](const Request& req, Response& res) { on_register(req, res); }, true));
        s.Post("/v1/auth/login", wrap([this](const Request& req, Response& res) { on_login(req, res); }, true));
        s.Post("/v1/auth/totp", wrap([this](const Request& req, Response& res) { on_totp(req, res); }, true));
        s.Post("/v1/auth/logout", wrap([this](const Request& req, Response& res) { on_logout(req, res); }, false));
        s.Post("/v1/authorize", wrap([this](const Request& req, Response& res) { on_authorize(req, res); }, false));

        s.Post("/v1/device/enroll", wrap([this](const Request& req, Response& res) { on_enroll(req, res); }, false));
        s.Post("/v1/device/challenge",
               wrap([this](const Request& req, Response& res) { on_challenge(req, res); }, true));
        s.Post("/v1/device/respond", wrap([this](const Request& req, Response& res) { on_respond(req, res); }, true));
        s.Post("/v1/device/revoke", wrap([this](const Request& req, Response& res) { on_revoke(req, res); }, false));
        s.Get("/v1/ca", wrap([this](const Request&, Response& res) {
                  reply(res, 200, json{{"certificate", svc.ca().ca_certificate_pem()}});
              }, false));

        s.Put("/v1/policies", wrap([this](const Request& req, Response& res) { on_put_policies(req, res); }, false));
        s.Get("/v1/policies", wrap([this](const Request& req, Response& res) {
                  require_admin(req);
                  res.status = 200;
                  res.set_content(policy::serialize_policy_set(*svc.policies().current()), "application/json");
              }, false));
        s.Get(R"(/v1/trust/([^/]+))", wrap([this](const Request& req, Response& res) { on_trust(req, res); }, false));
        s.Get("/v1/events", wrap([this](const Request& req, Response& res) { on_events(req, res); }, false));
    }

    // --- authentication ---

    void on_register(const Request& req, Response& res) {
        const auto body = parse_body(req);
        const auto ctx = context_of(req);
        const auto reg = svc.auth().register_user(required_string(body, "username"), required_string(body, "password"),
                                                  body.value("org", std::string()), ctx);
        reply(res, 201, json{{"user_id", reg.account.user_id}, {"provisioning_uri", reg.provisioning_uri}});
    }

    void on_login(const Request& req, Response& res) {
        const auto body = parse_body(req);
        const auto pending = svc.auth().start_login(required_string(body, "username"),
                                                    required_string(body, "password"), context_of(req));
        reply(res, 200, json{{"pending_id", pending.pending_id}, {"expires_at", to_unix(pending.expires_at)}});
    }

    void on_totp(const Request& req, Response& res) {
        const auto body = parse_body(req);
        const auto issued = svc.auth().verify_totp(required_string(body, "pending_id"), required_string(body, "code"));
        reply(res, 200, json{{"token", issued.token},
                             {"user_id", issued.session.user_id},
                             {"expires_at", to_unix(issued.session.expires_at)}});
    }

    authn::Session require_session(const Request& req) const {
        const auto session = svc.auth().validate_session(bearer_token(req));
        if (!session) throw HttpError(401, "INVALID_SESSION", "missing, expired or unknown session token");
        return *session;
    }

    void on_logout(const Request& req, Response& res) {
        require_session(req);
        svc.auth().revoke_session(bearer_token(req));
        reply(res, 200, json::object());
    }

    void on_authorize(const Request& req, Response& res) {
        const auto session = require_session(req);
        const auto body = parse_body(req);
        const auto account = svc.auth().find_user(session.user_id);
        if (!account) throw HttpError(401, "INVALID_SESSION", "account no longer exists");
        const auto login = context_of(req);

        trust::AccessRequest ar;
        ar.user_id = session.user_id;
        ar.resource_id = required_string(body, "resource_id");
        ar.ip = login.ip;
        ar.service_id = login.service_id;
        // Sessions are only issued after the second factor.
        ar.mfa_verified = true;
        try {
            ar.ctx.resource = policy::bag_from_json(body.value("resource", json()));
            if (const auto it = body.find("action"); it != body.end()) {
                if (it->is_string()) {
                    ar.ctx.action["id"] = it->get<std::string>();
                } else {
                    ar.ctx.action = policy::bag_from_json(*it);
                }
            }
            ar.ctx.environment = policy::bag_from_json(body.value("environment", json()));
        } catch (const std::invalid_argument& ex) {
            throw HttpError(400, "MALFORMED_BODY", ex.what());
        }
        if (body.contains("subject")) spdlog::debug("authorize: ignoring client-supplied subject attributes");
        ar.ctx.resource.insert_or_assign("id", ar.resource_id);
        ar.ctx.subject["id"] = account->user_id;
        ar.ctx.subject["username"] = account->username;
        ar.ctx.subject["org"] = account->org;
        ar.ctx.subject["ip"] = login.ip;
        if (login.geo) ar.ctx.subject["geo"] = *login.geo;
        ar.ctx.environment.insert_or_assign("time", svc.clock().now());

        trust::FinalDecision decision;
        try {
            decision = svc.authorizer().authorize(ar);
        } catch (const audit::QueueFull&) {
            reply_error(res, 503, "QUEUE_FULL", "audit queue full", json{{"decision", "DENY"}});
            return;
        }
        auto out = decision_json(decision);
        const bool unavailable =
            std::find(decision.reasons.begin(), decision.reasons.end(), "STORE_UNAVAILABLE") != decision.reasons.end();
        if (unavailable) out["error"] = "STORE_UNAVAILABLE";
        reply(res, unavailable ? 503 : 200, std::move(out));
    }

    // --- devices ---

    void on_enroll(const Request& req, Response& res) {
        require_admin(req);
        const auto body = parse_body(req);
        const int days = body.value("validity_days", cfg.device_validity_days);
        const auto d =
            svc.ca().enroll_device(required_string(body, "device_id"), required_string(body, "public_key"), days);
        reply(res, 200, json{{"device_id", d.device_id},
                             {"serial", d.serial},
                             {"certificate", d.certificate_pem},
                             {"ca_certificate", svc.ca().ca_certificate_pem()}});
    }

    void on_challenge(const Request& req, Response& res) {
        const auto body = parse_body(req);
        const auto c = svc.ca().create_challenge(required_string(body, "device_id"));
        reply(res, 200, json{{"challenge_id", c.challenge_id},
                             {"nonce", crypto::base64_encode(c.nonce)},
                             {"expires_at", to_unix(c.expires_at)}});
    }

    void on_respond(const Request& req, Response& res) {
        const auto body = parse_body(req);
        crypto::Bytes signature;
        try {
            signature = crypto::base64_decode(required_string(body, "signature"));
        } catch (const HttpError&) {
            throw;
        } catch (const std::exception&) {
            throw HttpError(400, "MALFORMED_BODY", "signature must be base64");
        }
        const auto s = svc.ca().verify_challenge_response(required_string(body, "challenge_id"), signature);
        reply(res, 200, json{{"device_id", s.device_id},
                             {"serial", s.serial},
                             {"token", s.token},
                             {"expires_at", to_unix(s.expires_at)}});
    }

    void on_revoke(const Request& req, Response& res) {
        require_admin(req);
        const auto body = parse_body(req);
        std::uint64_t serial = 0;
        if (body.contains("serial")) {
            serial = body.at("serial").get<std::uint64_t>();
        } else {
            const auto d = svc.ca().find_device(required_string(body, "device_id"));
            if (!d) throw pki::PkiError(pki::PkiError::Code::UnknownDevice, "unknown device");
            serial = d->serial;
        }
        svc.ca().revoke(serial, body.value("reason", std::string("unspecified")));
        reply(res, 200, json{{"serial", serial}, {"revoked", true}});
    }

    // --- administration ---

    void on_put_policies(const Request& req, Response& res) {
        require_admin(req);
        auto set = policy::parse_policy_set(req.body);
        const auto id = set.id;
        const auto version = svc.policies().publish(std::move(set));
        audit::AuditEvent e;
        e.kind = audit::EventKind::PolicyUpdated;
        e.principal = "admin";
        e.time = svc.clock().now();
        e.ip = req.remote_addr;
        e.detail = {{"policy_set_id", id}, {"version", std::to_string(version)}};
        svc.log().emit(std::move(e));
        reply(res, 200, json{{"version", version}, {"policy_set_id", id}});
    }

    void on_trust(const Request& req, Response& res) {
        require_admin(req);
        const std::string user_id = req.matches[1];
        if (!svc.auth().find_user(user_id)) throw HttpError(404, "UNKNOWN_USER", "no such user: " + user_id);
        const auto now = svc.clock().now();
        const auto cfg_now = svc.config();
        const auto trust_cfg = svc.authorizer().config();
        const auto profile = pip::aggregate(user_id, svc.events().events_for(user_id), now, cfg_now.pip);

        const auto resource_id = req.get_param_value("resource_id");
        const auto ip = req.get_param_value("ip");
        const auto service_id = req.get_param_value("service_id");
        policy::RequestContext ctx;
        if (req.has_param("geo")) {
            ctx.subject["geo"] = parse_geo_param(req.get_param_value("geo"));
        } else if (const auto g = svc.geo().resolve(ip)) {
            ctx.subject["geo"] = *g;
        }
        if (req.has_param("resource_geo")) ctx.resource["geo"] = parse_geo_param(req.get_param_value("resource_geo"));

        const auto signals = trust::build_signals(profile, resource_id, ctx, now, ip, service_id, true);
        const auto factors = trust::normalize_factors(signals, *trust_cfg);
        json out;
        out["user_id"] = user_id;
        out["profile"] = pip::profile_to_json(profile);
        out["resource_id"] = resource_id;
        out["mode"] = trust::to_string(trust::determine_mode(profile, resource_id, now, *trust_cfg));
        out["signals"] = {{"distance_km", signals.distance_km ? json(*signals.distance_km) : json()},
                          {"prior_requests_same_resource", signals.prior_requests_same_resource},
                          {"prior_successful_authz_total", signals.prior_successful_authz_total},
                          {"penalties_in_window", signals.penalties_in_window},
                          {"ip_seen_before", signals.ip_seen_before},
                          {"service_seen_before", signals.service_seen_before},
                          {"time_in_usual_band", signals.time_in_usual_band}};
        out["factors"] = {{"f_geo", factors.geo},
                          {"f_res", factors.res},
                          {"f_hist", factors.hist},
                          {"f_pen", factors.pen},
                          {"f_meta", factors.meta}};
        out["score"] = trust::trust_score(factors, *trust_cfg);
        out["threshold"] = trust_cfg->threshold;
        reply(res, 200, std::move(out));
    }

    void on_events(const Request& req, Response& res) {
        require_admin(req);
        std::uint64_t after = 0;
        std::size_t limit = 1000;
        try {
            if (req.has_param("after")) after = std::stoull(req.get_param_value("after"));
            if (req.has_param("limit")) limit = std::min<std::size_t>(std::stoull(req.get_param_value("limit")), 10000);
        } catch (const std::exception&) {
            throw HttpError(400, "MALFORMED_QUERY", "after and limit must be non-negative integers");
        }
        std::string out;
        for (const auto& e : svc.events().events_after(after, limit)) {
            out += audit::encode_event(e);
            out += '\n';
        }
        res.status = 200;
        res.set_content(out, "application/x-ndjson");
    }
};

Gateway::Gateway(Service& service) : impl_(std::make_unique<Impl>(service)) {}

Gateway::~Gateway() { stop(); }

int Gateway::bind() {
    auto& s = *impl_->server;
    const auto& c = impl_->cfg;
    if (c.port == 0) {
        impl_->port = s.bind_to_any_port(c.host);
    } else {
        impl_->port = s.bind_to_port(c.host, c.port) ? c.port : -1;
    }
    if (impl_->port < 0) throw std::runtime_error("cannot bind " + c.host + ":" + std::to_string(c.port));
    return impl_->port;
}

void Gateway::run() { impl_->server->listen_after_bind(); }

int Gateway::start() {
    const int p = bind();
    impl_->thread = std::thread([this] { run(); });
    impl_->server->wait_until_ready();
    return p;
}

void Gateway::stop() {
    if (!impl_) return;
    impl_->server->stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

int Gateway::port() const { return impl_->port; }

bool Gateway::tls() const { return impl_->tls; }

}  // namespace ztiam::gateway
