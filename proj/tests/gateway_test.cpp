#include "test_support.hpp"

#include "ztiam/gateway.hpp"
#include "ztiam/policy_json.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <numbers>

using namespace ztiam;
using nlohmann::json;
using ztiam::testing::kFarUser;
using ztiam::testing::kNearUser;
using ztiam::testing::kResource;
using ztiam::testing::TempDir;

namespace {

const std::string kAdminToken = "admin-token-0123456789abcdef";

ServiceConfig test_config() {
    ServiceConfig cfg;
    cfg.port = 0;
    cfg.admin_token = kAdminToken;
    cfg.rate_limit_per_second = 1000;
    cfg.rate_limit_burst = 1000;
    cfg.auth.kdf = {1u << 10, 8, 1};
    cfg.policy_file = ZTIAM_GEO_POLICY;
    cfg.geo_static["127.0.0.1"] = kNearUser;
    return cfg;
}

httplib::Headers bearer(const std::string& token) { return {{"Authorization", "Bearer " + token}}; }

struct Server {
    explicit Server(ServiceConfig cfg = test_config(), const Clock* clock = nullptr)
        : service(std::move(cfg), crypto::random_bytes(32), Service::Options{clock ? clock : &manual, false}),
          gateway(service) {
        port = gateway.start();
    }
    ~Server() { gateway.stop(); }

    ManualClock manual;
    Service service;
    gateway::Gateway gateway;
    int port = 0;

    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_connection_timeout(5);
        c.set_read_timeout(10);
        return c;
    }

    httplib::Result post(const std::string& path, const json& body, const httplib::Headers& headers = {}) const {
        return client().Post(path, headers, body.dump(), "application/json");
    }
    httplib::Result get(const std::string& path, const httplib::Headers& headers = {}) const {
        return client().Get(path, headers);
    }

    struct User {
        std::string user_id;
        std::string token;
        crypto::Bytes secret;
    };

    User register_user(const std::string& name, const std::string& org = "org-a") const {
        const auto r = post("/v1/auth/register", {{"username", name}, {"password", "correct horse battery"}, {"org", org}});
        EXPECT_EQ(r->status, 201) << r->body;
        const auto body = json::parse(r->body);
        const std::string uri = body.at("provisioning_uri");
        const auto start = uri.find("secret=") + 7;
        return {body.at("user_id"), "", crypto::base32_decode(uri.substr(start, uri.find('&', start) - start))};
    }

    User login(const std::string& name, const std::string& org = "org-a") const {
        auto user = register_user(name, org);
        const auto r = post("/v1/auth/login", {{"username", name}, {"password", "correct horse battery"}});
        EXPECT_EQ(r->status, 200) << r->body;
        const std::string pending = json::parse(r->body).at("pending_id");
        const auto code = authn::totp_code(user.secret, service.clock().now());
        const auto t = post("/v1/auth/totp", {{"pending_id", pending}, {"code", code}});
        EXPECT_EQ(t->status, 200) << t->body;
        user.token = json::parse(t->body).at("token");
        return user;
    }

    httplib::Result authorize(const std::string& token, const json& extra = json::object()) const {
        json body = {{"resource_id", "res-1"},
                     {"resource", {{"org", "org-a"}, {"geo", {kResource.lat, kResource.lon}}}},
                     {"action", "READ"}};
        body.update(extra);
        return post("/v1/authorize", body, bearer(token));
    }
};

}  // namespace

TEST(Gateway, Health) {
    Server s;
    const auto r = s.get("/healthz");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
}

TEST(Gateway, RegisterLoginTotpAuthorize) {
    Server s;
    const auto user = s.login("alice");
    ASSERT_FALSE(user.token.empty());
    const auto r = s.authorize(user.token);
    ASSERT_EQ(r->status, 200) << r->body;
    const auto body = json::parse(r->body);
    EXPECT_EQ(body.at("decision"), "ALLOW");
    EXPECT_EQ(body.at("mode"), "Criteria");
    EXPECT_EQ(body.at("pdp"), "Permit");
    EXPECT_FALSE(body.contains("score"));
    EXPECT_EQ(body.at("policy_version"), 1);
}

TEST(Gateway, FarRequesterDenied) {
    auto cfg = test_config();
    cfg.geo_static["127.0.0.1"] = kFarUser;
    Server s(cfg);
    const auto user = s.login("bob");
    const auto body = json::parse(s.authorize(user.token)->body);
    EXPECT_EQ(body.at("decision"), "DENY");
    EXPECT_EQ(body.at("pdp"), "NotApplicable");
}

TEST(Gateway, ClientSuppliedSubjectIgnored) {
    Server s;
    const auto user = s.login("carol", "org-b");
    // Claiming org-a and a nearby location in the body changes nothing.
    const auto r = s.authorize(user.token, {{"subject", {{"org", "org-a"}, {"geo", {kResource.lat, kResource.lon}}}}});
    const auto body = json::parse(r->body);
    EXPECT_EQ(body.at("decision"), "DENY");
    EXPECT_EQ(body.at("pdp"), "NotApplicable");
}

TEST(Gateway, WrongTotpIs401) {
    Server s;
    const auto user = s.register_user("dave");
    const auto r = s.post("/v1/auth/login", {{"username", "dave"}, {"password", "correct horse battery"}});
    const std::string pending = json::parse(r->body).at("pending_id");
    const auto good = authn::totp_code(user.secret, s.service.clock().now());
    const auto t = s.post("/v1/auth/totp", {{"pending_id", pending}, {"code", good == "000000" ? "111111" : "000000"}});
    EXPECT_EQ(t->status, 401);
    EXPECT_EQ(json::parse(t->body).at("error"), "CODE_INVALID");
}

TEST(Gateway, SixthBadPasswordLocks) {
    Server s;
    s.register_user("erin");
    for (int i = 0; i < 5; ++i) {
        const auto r = s.post("/v1/auth/login", {{"username", "erin"}, {"password", "wrong password!!"}});
        EXPECT_EQ(r->status, 401);
        EXPECT_EQ(json::parse(r->body).at("error"), "BAD_CREDENTIALS");
    }
    const auto r = s.post("/v1/auth/login", {{"username", "erin"}, {"password", "correct horse battery"}});
    EXPECT_EQ(r->status, 423);
    EXPECT_EQ(json::parse(r->body).at("error"), "ACCOUNT_LOCKED");
}

TEST(Gateway, SessionRequiredAndExpires) {
    Server s;
    EXPECT_EQ(s.authorize("")->status, 401);
    EXPECT_EQ(s.authorize("not-a-token")->status, 401);
    const auto user = s.login("frank");
    EXPECT_EQ(s.authorize(user.token)->status, 200);
    s.manual.advance(Seconds{3601});
    const auto r = s.authorize(user.token);
    EXPECT_EQ(r->status, 401);
    EXPECT_EQ(json::parse(r->body).at("error"), "INVALID_SESSION");
}

TEST(Gateway, LogoutEndsSession) {
    Server s;
    const auto user = s.login("gina");
    EXPECT_EQ(s.post("/v1/auth/logout", json::object(), bearer(user.token))->status, 200);
    EXPECT_EQ(s.authorize(user.token)->status, 401);
}

TEST(Gateway, MalformedBody) {
    Server s;
    const auto r = s.client().Post("/v1/auth/login", "{not json", "application/json");
    EXPECT_EQ(r->status, 400);
    EXPECT_EQ(json::parse(r->body).at("error"), "MALFORMED_BODY");
}

TEST(Gateway, DeviceEnrollChallengeRespondRevoke) {
    Server s;
    const auto key = pki::generate_ed25519();
    const auto admin = bearer(kAdminToken);

    EXPECT_EQ(s.post("/v1/device/enroll", {{"device_id", "cam-1"}, {"public_key", key.public_key_pem}})->status, 401);
    const auto e = s.post("/v1/device/enroll", {{"device_id", "cam-1"}, {"public_key", key.public_key_pem}}, admin);
    ASSERT_EQ(e->status, 200) << e->body;
    const auto enrolled = json::parse(e->body);
    EXPECT_EQ(enrolled.at("serial"), 1);
    EXPECT_EQ(s.service.ca().verify_cert_chain(enrolled.at("certificate"), s.service.clock().now()),
              pki::CertStatus::Valid);

    const auto respond = [&](const json& challenge) {
        const auto nonce = crypto::base64_decode(challenge.at("nonce").get<std::string>());
        return s.post("/v1/device/respond",
                      {{"challenge_id", challenge.at("challenge_id")},
                       {"signature", crypto::base64_encode(pki::ed25519_sign(key.private_key_pem, nonce))}});
    };
    const auto ch = json::parse(s.post("/v1/device/challenge", {{"device_id", "cam-1"}})->body);
    const auto ok = respond(ch);
    ASSERT_EQ(ok->status, 200) << ok->body;
    EXPECT_FALSE(json::parse(ok->body).at("token").get<std::string>().empty());

    const auto replay = respond(ch);
    EXPECT_EQ(replay->status, 401);
    EXPECT_EQ(json::parse(replay->body).at("error"), "CHALLENGE_REUSED");

    const auto ch2 = json::parse(s.post("/v1/device/challenge", {{"device_id", "cam-1"}})->body);
    EXPECT_EQ(s.post("/v1/device/revoke", {{"device_id", "cam-1"}, {"reason", "lost"}}, admin)->status, 200);
    const auto revoked = respond(ch2);
    EXPECT_EQ(revoked->status, 401);
    EXPECT_EQ(json::parse(revoked->body).at("error"), "DEVICE_REVOKED");

    const auto dup = s.post("/v1/device/enroll", {{"device_id", "cam-1"}, {"public_key", key.public_key_pem}}, admin);
    EXPECT_EQ(dup->status, 409);
}

TEST(Gateway, PolicyAdministration) {
    Server s;
    const auto admin = bearer(kAdminToken);
    const auto doc = ztiam::testing::read_text(ZTIAM_GEO_POLICY);

    EXPECT_EQ(s.client().Put("/v1/policies", doc, "application/json")->status, 401);
    EXPECT_EQ(s.client().Put("/v1/policies", bearer("wrong-token-wrong-token"), doc, "application/json")->status, 403);

    const auto put = s.client().Put("/v1/policies", admin, doc, "application/json");
    ASSERT_EQ(put->status, 200) << put->body;
    EXPECT_EQ(json::parse(put->body).at("version"), 2);

    std::string bad = doc;
    bad.replace(bad.find("\"string-equal\""), 14, "\"string-equalz\"");
    const auto rejected = s.client().Put("/v1/policies", admin, bad, "application/json");
    EXPECT_EQ(rejected->status, 422);
    const auto err = json::parse(rejected->body);
    EXPECT_EQ(err.at("error"), "UnknownFunction");
    EXPECT_FALSE(err.at("location").get<std::string>().empty());

    const auto current = s.get("/v1/policies", admin);
    ASSERT_EQ(current->status, 200);
    EXPECT_EQ(policy::parse_policy_set(current->body).version, 2u);

    s.service.log().flush();
    audit::CountQuery q;
    q.principal = "admin";
    q.kinds = {audit::EventKind::PolicyUpdated};
    EXPECT_EQ(s.service.events().count(q), 1u);
}

TEST(Gateway, TrustWhatIfFactors) {
    Server s;
    const auto user = s.register_user("hank");
    auto& store = s.service.events();
    const auto now = s.service.clock().now();
    const auto add = [&](audit::EventKind kind, const std::string& res, int minutes_ago) {
        store.append(ztiam::testing::make_event(kind, user.user_id, now - Seconds{60 * minutes_ago}, res, "10.0.0.7",
                                                "svc-a"));
    };
    for (int i = 0; i < 5; ++i) add(audit::EventKind::AuthzPermit, "res-x", 10 + i);
    for (int i = 0; i < 15; ++i) add(audit::EventKind::AuthzPermit, "res-y", 30 + i);
    add(audit::EventKind::Penalty, "res-y", 5);

    // 550 km due north of the resource.
    const double lat = kResource.lat + 550.0 / 6371.0 * 180.0 / std::numbers::pi;
    ASSERT_NEAR(ztiam::testing::oracle_distance_km(lat, kResource.lon, kResource.lat, kResource.lon), 550.0, 1e-6);

    const auto before = store.size();
    const auto path = "/v1/trust/" + user.user_id + "?resource_id=res-x&ip=10.0.0.7&service_id=svc-a&geo=" +
                      std::to_string(lat) + "," + std::to_string(kResource.lon) + "&resource_geo=" +
                      std::to_string(kResource.lat) + "," + std::to_string(kResource.lon);
    const auto r = s.get(path, bearer(kAdminToken));
    ASSERT_EQ(r->status, 200) << r->body;
    const auto body = json::parse(r->body);
    const auto& f = body.at("factors");
    EXPECT_NEAR(f.at("f_geo").get<double>(), 0.5, 1e-5);
    EXPECT_DOUBLE_EQ(f.at("f_res").get<double>(), 0.5);
    EXPECT_DOUBLE_EQ(f.at("f_hist").get<double>(), 0.5);
    EXPECT_DOUBLE_EQ(f.at("f_pen").get<double>(), 0.5);
    EXPECT_DOUBLE_EQ(f.at("f_meta").get<double>(), 0.75);
    EXPECT_NEAR(body.at("score").get<double>(), 0.25 * 0.5 + 0.2 * 0.5 + 0.15 * 0.5 + 0.25 * 0.5 + 0.15 * 0.75, 1e-5);
    EXPECT_EQ(store.size(), before);

    EXPECT_EQ(s.get("/v1/trust/u-nobody", bearer(kAdminToken))->status, 404);
}

TEST(Gateway, CorrelationIdReachesAuditEvent) {
    Server s;
    const auto user = s.login("ivan");
    const auto r = s.authorize(user.token);
    const auto header = r->get_header_value(std::string(gateway::kCorrelationHeader));
    ASSERT_FALSE(header.empty());
    EXPECT_EQ(json::parse(r->body).at("correlation_id"), header);
    s.service.log().flush();
    const auto last = s.service.events().last(user.user_id, audit::EventKind::AuthzPermit);
    ASSERT_TRUE(last.has_value());
    EXPECT_EQ(last->detail.at("correlation_id"), header);
}

TEST(Gateway, EventsFeedIsNdjson) {
    Server s;
    s.login("judy");
    s.service.log().flush();
    EXPECT_EQ(s.get("/v1/events")->status, 401);
    const auto r = s.get("/v1/events?after=0&limit=100", bearer(kAdminToken));
    ASSERT_EQ(r->status, 200);
    std::istringstream lines(r->body);
    std::vector<audit::AuditEvent> events;
    for (std::string line; std::getline(lines, line);) events.push_back(audit::decode_event(line));
    ASSERT_FALSE(events.empty());
    EXPECT_EQ(events.front().kind, audit::EventKind::Register);
    EXPECT_TRUE(std::any_of(events.begin(), events.end(), [](const auto& e) {
        return e.kind == audit::EventKind::LoginSuccess && e.detail.count("stage") && e.detail.at("stage") == "mfa";
    }));
}

TEST(Gateway, RateLimitOnPublicEndpoints) {
    auto cfg = test_config();
    cfg.rate_limit_per_second = 1;
    cfg.rate_limit_burst = 3;
    Server s(cfg);
    int limited = 0;
    for (int i = 0; i < 6; ++i) {
        const auto r = s.post("/v1/auth/login", {{"username", "nobody"}, {"password", "whatever-whatever"}});
        if (r->status == 429) {
            ++limited;
            EXPECT_EQ(json::parse(r->body).at("error"), "RATE_LIMITED");
        }
    }
    EXPECT_GE(limited, 2);
}

TEST(RateLimiter, TokenBucketRefills) {
    gateway::RateLimiter limiter(2, 2);
    const auto t0 = gateway::RateLimiter::Clock::now();
    EXPECT_TRUE(limiter.allow("a", t0));
    EXPECT_TRUE(limiter.allow("a", t0));
    EXPECT_FALSE(limiter.allow("a", t0));
    EXPECT_TRUE(limiter.allow("b", t0));
    EXPECT_TRUE(limiter.allow("a", t0 + std::chrono::milliseconds(500)));
    EXPECT_FALSE(limiter.allow("a", t0 + std::chrono::milliseconds(600)));
}

TEST(Gateway, MutualTlsRequiresCaIssuedClientCertificate) {
    TempDir dir;
    auto cfg = test_config();
    cfg.tls.enabled = true;
    cfg.tls.require_client_cert = true;
    SystemClock clock;
    Server s(cfg, &clock);
    ASSERT_TRUE(s.gateway.tls());

    ztiam::testing::write_text(dir / "ca.pem", s.service.ca().ca_certificate_pem());
    const auto key = pki::generate_ed25519();
    const auto device = s.service.ca().enroll_device("edge-1", key.public_key_pem);
    ztiam::testing::write_text(dir / "client.pem", device.certificate_pem);
    ztiam::testing::write_text(dir / "client.key", key.private_key_pem);

    const auto client = [&](bool with_cert) {
        auto c = with_cert ? std::make_unique<httplib::SSLClient>("127.0.0.1", s.port, (dir / "client.pem").string(),
                                                                  (dir / "client.key").string())
                           : std::make_unique<httplib::SSLClient>("127.0.0.1", s.port);
        c->set_ca_cert_path((dir / "ca.pem").string());
        c->enable_server_certificate_verification(true);
        c->set_connection_timeout(5);
        return c;
    };

    const auto ok = client(true)->Get("/healthz");
    ASSERT_TRUE(ok) << httplib::to_string(ok.error());
    EXPECT_EQ(ok->status, 200);

    const auto anonymous = client(false)->Get("/healthz");
    EXPECT_TRUE(!anonymous || anonymous->status != 200);

    s.service.ca().revoke(device.serial, "test");
    const auto revoked = client(true)->Get("/healthz");
    EXPECT_TRUE(!revoked || revoked->status == 401);
}
