#include "ztiam/pki.hpp"

#include <nlohmann/json.hpp>
#include <openssl/bio.h>
#include <openssl/evp.h>
#include <openssl/pem.h>
#include <openssl/x509.h>
#include <openssl/x509v3.h>
#include <spdlog/spdlog.h>

#include <memory>

namespace ztiam::pki {

using crypto::Bytes;
using crypto::ByteView;

namespace {

struct Free {
    void operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); }
    void operator()(X509* p) const { X509_free(p); }
    void operator()(BIO* p) const { BIO_free(p); }
    void operator()(EVP_MD_CTX* p) const { EVP_MD_CTX_free(p); }
    void operator()(EVP_PKEY_CTX* p) const { EVP_PKEY_CTX_free(p); }
    void operator()(X509_EXTENSION* p) const { X509_EXTENSION_free(p); }
};
using PKey = std::unique_ptr<EVP_PKEY, Free>;
using Cert = std::unique_ptr<X509, Free>;
using Bio = std::unique_ptr<BIO, Free>;

[[noreturn]] void fail(const std::string& what) { throw crypto::CryptoError(what); }

Bio mem_bio(std::string_view pem) {
    Bio b(BIO_new_mem_buf(pem.data(), static_cast<int>(pem.size())));
    if (!b) fail("BIO_new_mem_buf");
    return b;
}

std::string bio_string(BIO* b) {
    char* data = nullptr;
    const long n = BIO_get_mem_data(b, &data);
    return std::string(data, static_cast<std::size_t>(n));
}

PKey read_private(const std::string& pem) {
    auto b = mem_bio(pem);
    return PKey(PEM_read_bio_PrivateKey(b.get(), nullptr, nullptr, nullptr));
}

PKey read_public(const std::string& pem) {
    auto b = mem_bio(pem);
    return PKey(PEM_read_bio_PUBKEY(b.get(), nullptr, nullptr, nullptr));
}

Cert read_cert(const std::string& pem) {
    auto b = mem_bio(pem);
    return Cert(PEM_read_bio_X509(b.get(), nullptr, nullptr, nullptr));
}

std::string write_cert(X509* x) {
    Bio b(BIO_new(BIO_s_mem()));
    if (!b || PEM_write_bio_X509(b.get(), x) != 1) fail("PEM_write_bio_X509");
    return bio_string(b.get());
}

std::string write_private(EVP_PKEY* k) {
    Bio b(BIO_new(BIO_s_mem()));
    if (!b || PEM_write_bio_PrivateKey(b.get(), k, nullptr, nullptr, 0, nullptr, nullptr) != 1) {
        fail("PEM_write_bio_PrivateKey");
    }
    return bio_string(b.get());
}

std::string write_public(EVP_PKEY* k) {
    Bio b(BIO_new(BIO_s_mem()));
    if (!b || PEM_write_bio_PUBKEY(b.get(), k) != 1) fail("PEM_write_bio_PUBKEY");
    return bio_string(b.get());
}

PKey new_ed25519() {
    std::unique_ptr<EVP_PKEY_CTX, Free> ctx(EVP_PKEY_CTX_new_id(EVP_PKEY_ED25519, nullptr));
    EVP_PKEY* raw = nullptr;
    if (!ctx || EVP_PKEY_keygen_init(ctx.get()) != 1 || EVP_PKEY_keygen(ctx.get(), &raw) != 1) {
        fail("Ed25519 key generation");
    }
    return PKey(raw);
}

bool ed25519_verify(EVP_PKEY* key, ByteView message, ByteView signature) {
    std::unique_ptr<EVP_MD_CTX, Free> ctx(EVP_MD_CTX_new());
    if (!ctx || EVP_DigestVerifyInit(ctx.get(), nullptr, nullptr, nullptr, key) != 1) return false;
    return EVP_DigestVerify(ctx.get(), signature.data(), signature.size(), message.data(), message.size()) == 1;
}

void add_ext(X509* cert, X509* issuer, int nid, const char* value) {
    X509V3_CTX ctx;
    X509V3_set_ctx_nodb(&ctx);
    X509V3_set_ctx(&ctx, issuer, cert, nullptr, nullptr, 0);
    std::unique_ptr<X509_EXTENSION, Free> ext(X509V3_EXT_conf_nid(nullptr, &ctx, nid, value));
    if (!ext || X509_add_ext(cert, ext.get(), -1) != 1) fail("X509 extension " + std::string(OBJ_nid2sn(nid)));
}

void set_name(X509_NAME* name, const std::string& cn) {
    if (X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_UTF8, reinterpret_cast<const unsigned char*>(cn.c_str()),
                                   -1, -1, 0) != 1) {
        fail("X509 subject name");
    }
}

void set_validity(X509* x, Timestamp from, Timestamp to) {
    if (!ASN1_TIME_set(X509_getm_notBefore(x), static_cast<time_t>(to_unix(from))) ||
        !ASN1_TIME_set(X509_getm_notAfter(x), static_cast<time_t>(to_unix(to)))) {
        fail("X509 validity");
    }
}

std::string common_name(X509* x) {
    X509_NAME* name = X509_get_subject_name(x);
    const int idx = X509_NAME_get_index_by_NID(name, NID_commonName, -1);
    if (idx < 0) return {};
    const ASN1_STRING* data = X509_NAME_ENTRY_get_data(X509_NAME_get_entry(name, idx));
    unsigned char* utf8 = nullptr;
    const int n = ASN1_STRING_to_UTF8(&utf8, data);
    if (n < 0) return {};
    std::string out(reinterpret_cast<char*>(utf8), static_cast<std::size_t>(n));
    OPENSSL_free(utf8);
    return out;
}

std::optional<std::uint64_t> serial_of(X509* x) {
    std::uint64_t v = 0;
    if (ASN1_INTEGER_get_uint64(&v, X509_get0_serialNumber(x)) != 1) return std::nullopt;
    return v;
}

std::string token_key(const std::string& token) { return crypto::hex_encode(crypto::sha256(crypto::as_bytes(token))); }

std::string device_key(const std::string& id) { return "device/" + id; }

nlohmann::json device_to_json(const DeviceIdentity& d) {
    return {{"device_id", d.device_id},
            {"public_key", d.public_key_pem},
            {"certificate", d.certificate_pem},
            {"serial", d.serial},
            {"enrolled_at", to_unix(d.enrolled_at)},
            {"status", d.status == DeviceStatus::Active ? "Active" : "Revoked"}};
}

DeviceIdentity device_from_json(const nlohmann::json& j) {
    DeviceIdentity d;
    d.device_id = j.at("device_id").get<std::string>();
    d.public_key_pem = j.at("public_key").get<std::string>();
    d.certificate_pem = j.at("certificate").get<std::string>();
    d.serial = j.at("serial").get<std::uint64_t>();
    d.enrolled_at = from_unix(j.at("enrolled_at").get<std::int64_t>());
    d.status = j.at("status").get<std::string>() == "Revoked" ? DeviceStatus::Revoked : DeviceStatus::Active;
    return d;
}

std::string bytes_text(const Bytes& b) { return std::string(b.begin(), b.end()); }

}  // namespace

std::string_view to_string(CertStatus s) {
    switch (s) {
        case CertStatus::Valid: return "VALID";
        case CertStatus::Malformed: return "MALFORMED";
        case CertStatus::UnknownIssuer: return "UNKNOWN_ISSUER";
        case CertStatus::BadSignature: return "BAD_SIGNATURE";
        case CertStatus::Revoked: return "REVOKED";
        case CertStatus::NotYetValid: return "NOT_YET_VALID";
        case CertStatus::Expired: return "EXPIRED";
    }
    return "UNKNOWN";
}

std::string_view to_string(PkiError::Code c) {
    switch (c) {
        case PkiError::Code::CaExists: return "CA_EXISTS";
        case PkiError::Code::NoCa: return "NO_CA";
        case PkiError::Code::DuplicateDevice: return "DUPLICATE_DEVICE";
        case PkiError::Code::MalformedKey: return "MALFORMED_KEY";
        case PkiError::Code::UnknownDevice: return "UNKNOWN_DEVICE";
        case PkiError::Code::DeviceRevoked: return "DEVICE_REVOKED";
        case PkiError::Code::UnknownSerial: return "UNKNOWN_SERIAL";
        case PkiError::Code::UnknownChallenge: return "UNKNOWN_CHALLENGE";
        case PkiError::Code::ChallengeExpired: return "CHALLENGE_EXPIRED";
        case PkiError::Code::ChallengeReused: return "CHALLENGE_REUSED";
        case PkiError::Code::BadSignature: return "BAD_SIGNATURE";
        case PkiError::Code::CertificateInvalid: return "CERTIFICATE_INVALID";
    }
    return "PKI_ERROR";
}

Ed25519KeyPair generate_ed25519() {
    auto key = new_ed25519();
    return {write_private(key.get()), write_public(key.get())};
}

Bytes ed25519_sign(const std::string& private_key_pem, ByteView message) {
    auto key = read_private(private_key_pem);
    if (!key) fail("cannot parse private key");
    std::unique_ptr<EVP_MD_CTX, Free> ctx(EVP_MD_CTX_new());
    std::size_t len = 0;
    if (!ctx || EVP_DigestSignInit(ctx.get(), nullptr, nullptr, nullptr, key.get()) != 1 ||
        EVP_DigestSign(ctx.get(), nullptr, &len, message.data(), message.size()) != 1) {
        fail("EVP_DigestSignInit");
    }
    Bytes sig(len);
    if (EVP_DigestSign(ctx.get(), sig.data(), &len, message.data(), message.size()) != 1) fail("EVP_DigestSign");
    sig.resize(len);
    return sig;
}

// --- CertificateAuthority ------------------------------------------------------

CertificateAuthority::CertificateAuthority(Keystore& keystore, audit::EventSink& sink, const Clock& clock,
                                           PkiConfig cfg)
    : keystore_(keystore), sink_(sink), clock_(clock), cfg_(cfg) {
    if (keystore_.contains("ca/state")) {
        const auto j = nlohmann::json::parse(bytes_text(keystore_.get("ca/state")));
        state_.certificate_pem = bytes_text(keystore_.get("ca/cert"));
        state_.serial_counter = j.at("serial_counter").get<std::uint64_t>();
        for (const auto& [serial, at] : j.at("revoked").items()) {
            state_.revoked[std::stoull(serial)] = from_unix(at.get<std::int64_t>());
        }
        loaded_ = true;
    }
}

void CertificateAuthority::require_ca() const {
    if (!loaded_) throw PkiError(PkiError::Code::NoCa, "certificate authority not initialized");
}

void CertificateAuthority::save_state() {
    nlohmann::json revoked = nlohmann::json::object();
    for (const auto& [serial, at] : state_.revoked) revoked[std::to_string(serial)] = to_unix(at);
    const auto text = nlohmann::json{{"serial_counter", state_.serial_counter}, {"revoked", revoked}}.dump();
    keystore_.put("ca/state", crypto::as_bytes(text));
}

void CertificateAuthority::save_device(const DeviceIdentity& d) {
    keystore_.put(device_key(d.device_id), crypto::as_bytes(device_to_json(d).dump()));
}

void CertificateAuthority::emit(audit::EventKind kind, const std::string& principal,
                                std::map<std::string, std::string> detail) {
    audit::AuditEvent e;
    e.kind = kind;
    e.principal = principal;
    e.time = clock_.now();
    e.detail = std::move(detail);
    sink_.emit(std::move(e));
}

CaState CertificateAuthority::init_ca(const std::string& subject_name, int validity_years, bool overwrite) {
    if (subject_name.empty()) throw std::invalid_argument("CA subject name must not be empty");
    if (validity_years <= 0) throw std::invalid_argument("CA validity must be positive");
    std::lock_guard lock(mutex_);
    if (loaded_ && !overwrite) throw PkiError(PkiError::Code::CaExists, "certificate authority already exists");

    auto key = new_ed25519();
    Cert x(X509_new());
    if (!x) fail("X509_new");
    X509_set_version(x.get(), 2);
    ASN1_INTEGER_set_uint64(X509_get_serialNumber(x.get()), 0);
    const auto now = clock_.now();
    set_validity(x.get(), now, now + Seconds{std::int64_t{validity_years} * 365 * 86400});
    set_name(X509_get_subject_name(x.get()), subject_name);
    set_name(X509_get_issuer_name(x.get()), subject_name);
    X509_set_pubkey(x.get(), key.get());
    add_ext(x.get(), x.get(), NID_basic_constraints, "critical,CA:TRUE,pathlen:0");
    add_ext(x.get(), x.get(), NID_key_usage, "critical,keyCertSign,cRLSign,digitalSignature");
    add_ext(x.get(), x.get(), NID_subject_key_identifier, "hash");
    add_ext(x.get(), x.get(), NID_authority_key_identifier, "keyid:always");
    if (X509_sign(x.get(), key.get(), nullptr) <= 0) fail("X509_sign");

    CaState next;
    next.certificate_pem = write_cert(x.get());
    // A re-initialized CA continues the serial sequence so serials are never reused.
    next.serial_counter = state_.serial_counter;
    keystore_.put("ca/key", crypto::as_bytes(write_private(key.get())));
    keystore_.put("ca/cert", crypto::as_bytes(next.certificate_pem));
    state_ = next;
    loaded_ = true;
    save_state();
    return state_;
}

bool CertificateAuthority::initialized() const {
    std::lock_guard lock(mutex_);
    return loaded_;
}

CaState CertificateAuthority::state() const {
    std::lock_guard lock(mutex_);
    require_ca();
    return state_;
}

std::string CertificateAuthority::ca_certificate_pem() const { return state().certificate_pem; }

std::string CertificateAuthority::sign_leaf(const std::string& cn, const std::string& public_key_pem,
                                            int validity_days, bool server, std::uint64_t serial) {
    auto subject_key = read_public(public_key_pem);
    if (!subject_key) throw PkiError(PkiError::Code::MalformedKey, "cannot parse public key");
    auto ca_cert = read_cert(state_.certificate_pem);
    auto ca_key = read_private(bytes_text(keystore_.get("ca/key")));
    if (!ca_cert || !ca_key) fail("CA material unreadable");

    Cert x(X509_new());
    if (!x) fail("X509_new");
    X509_set_version(x.get(), 2);
    ASN1_INTEGER_set_uint64(X509_get_serialNumber(x.get()), serial);
    const auto now = clock_.now();
    set_validity(x.get(), now, now + Seconds{std::int64_t{validity_days} * 86400});
    set_name(X509_get_subject_name(x.get()), cn);
    X509_set_issuer_name(x.get(), X509_get_subject_name(ca_cert.get()));
    X509_set_pubkey(x.get(), subject_key.get());
    add_ext(x.get(), ca_cert.get(), NID_basic_constraints, "critical,CA:FALSE");
    add_ext(x.get(), ca_cert.get(), NID_key_usage, "critical,digitalSignature");
    add_ext(x.get(), ca_cert.get(), NID_ext_key_usage, server ? "serverAuth" : "clientAuth");
    add_ext(x.get(), ca_cert.get(), NID_subject_key_identifier, "hash");
    add_ext(x.get(), ca_cert.get(), NID_authority_key_identifier, "keyid:always");
    if (server) add_ext(x.get(), ca_cert.get(), NID_subject_alt_name, "DNS:localhost,IP:127.0.0.1");
    if (X509_sign(x.get(), ca_key.get(), nullptr) <= 0) fail("X509_sign");
    return write_cert(x.get());
}

DeviceIdentity CertificateAuthority::enroll_device(const std::string& device_id, const std::string& public_key_pem,
                                                   int validity_days) {
    if (device_id.empty()) throw std::invalid_argument("device_id must not be empty");
    if (validity_days <= 0) throw std::invalid_argument("validity_days must be positive");
    auto key = read_public(public_key_pem);
    if (!key || EVP_PKEY_id(key.get()) != EVP_PKEY_ED25519) {
        throw PkiError(PkiError::Code::MalformedKey, "public key must be an Ed25519 PEM public key");
    }
    DeviceIdentity d;
    {
        std::lock_guard lock(mutex_);
        require_ca();
        if (keystore_.contains(device_key(device_id))) {
            throw PkiError(PkiError::Code::DuplicateDevice, "device already enrolled: " + device_id);
        }
        const auto serial = state_.serial_counter + 1;
        d.device_id = device_id;
        d.public_key_pem = write_public(key.get());
        d.certificate_pem = sign_leaf(device_id, d.public_key_pem, validity_days, false, serial);
        d.serial = serial;
        d.enrolled_at = clock_.now();
        state_.serial_counter = serial;
        save_state();
        save_device(d);
    }
    emit(audit::EventKind::DeviceEnrolled, device_id, {{"serial", std::to_string(d.serial)}});
    return d;
}

std::optional<DeviceIdentity> CertificateAuthority::find_device(const std::string& device_id) const {
    if (!keystore_.contains(device_key(device_id))) return std::nullopt;
    return device_from_json(nlohmann::json::parse(bytes_text(keystore_.get(device_key(device_id)))));
}

IssuedKeyPair CertificateAuthority::issue_server_certificate(const std::string& common_name, int validity_days) {
    auto key = new_ed25519();
    std::lock_guard lock(mutex_);
    require_ca();
    const auto serial = ++state_.serial_counter;
    save_state();
    return {sign_leaf(common_name, write_public(key.get()), validity_days, true, serial), write_private(key.get())};
}

CertStatus CertificateAuthority::verify_cert_chain(const std::string& certificate_pem, Timestamp now) const {
    CaState st;
    {
        std::lock_guard lock(mutex_);
        require_ca();
        st = state_;
    }
    auto cert = read_cert(certificate_pem);
    if (!cert) return CertStatus::Malformed;
    const auto serial = serial_of(cert.get());
    if (!serial || common_name(cert.get()).empty()) return CertStatus::Malformed;

    auto ca = read_cert(st.certificate_pem);
    if (!ca) fail("CA certificate unreadable");
    if (X509_NAME_cmp(X509_get_issuer_name(cert.get()), X509_get_subject_name(ca.get())) != 0) {
        return CertStatus::UnknownIssuer;
    }
    const ASN1_OCTET_STRING* akid = X509_get0_authority_key_id(cert.get());
    const ASN1_OCTET_STRING* skid = X509_get0_subject_key_id(ca.get());
    if (akid && skid && ASN1_OCTET_STRING_cmp(akid, skid) != 0) return CertStatus::UnknownIssuer;

    EVP_PKEY* ca_key = X509_get0_pubkey(ca.get());
    if (!ca_key || X509_verify(cert.get(), ca_key) != 1) return CertStatus::BadSignature;

    if (*serial == 0 || *serial > st.serial_counter) return CertStatus::UnknownIssuer;
    if (st.revoked.count(*serial)) return CertStatus::Revoked;

    const auto t = static_cast<time_t>(to_unix(now));
    if (ASN1_TIME_cmp_time_t(X509_get0_notBefore(cert.get()), t) > 0) return CertStatus::NotYetValid;
    if (ASN1_TIME_cmp_time_t(X509_get0_notAfter(cert.get()), t) < 0) return CertStatus::Expired;
    return CertStatus::Valid;
}

ChallengeRecord CertificateAuthority::create_challenge(const std::string& device_id) {
    const auto device = find_device(device_id);
    if (!device) throw PkiError(PkiError::Code::UnknownDevice, "unknown device: " + device_id);
    if (device->status == DeviceStatus::Revoked) throw PkiError(PkiError::Code::DeviceRevoked, "device revoked");

    ChallengeRecord c;
    c.challenge_id = crypto::random_token(16);
    c.device_id = device_id;
    c.nonce = crypto::random_bytes(32);
    c.issued_at = clock_.now();
    c.expires_at = c.issued_at + cfg_.challenge_ttl;
    std::lock_guard lock(mutex_);
    std::erase_if(challenges_, [&](const auto& kv) { return c.issued_at >= kv.second.expires_at + Seconds{600}; });
    challenges_[c.challenge_id] = c;
    return c;
}

DeviceSession CertificateAuthority::verify_challenge_response(const std::string& challenge_id, ByteView signature) {
    const auto now = clock_.now();
    ChallengeRecord c;
    {
        std::lock_guard lock(mutex_);
        const auto it = challenges_.find(challenge_id);
        if (it == challenges_.end()) {
            emit(audit::EventKind::DeviceAuthFailure, "unknown", {{"reason", "UNKNOWN_CHALLENGE"}});
            throw PkiError(PkiError::Code::UnknownChallenge, "unknown challenge");
        }
        c = it->second;
        it->second.used = true;
    }
    const auto reject = [&](PkiError::Code code, const std::string& message) -> PkiError {
        emit(audit::EventKind::DeviceAuthFailure, c.device_id, {{"reason", std::string(to_string(code))}});
        return PkiError(code, message);
    };
    if (c.used) throw reject(PkiError::Code::ChallengeReused, "challenge already used");
    if (now >= c.expires_at) throw reject(PkiError::Code::ChallengeExpired, "challenge expired");

    const auto device = find_device(c.device_id);
    if (!device) throw reject(PkiError::Code::UnknownDevice, "unknown device");
    if (device->status == DeviceStatus::Revoked) throw reject(PkiError::Code::DeviceRevoked, "device revoked");
    const auto status = verify_cert_chain(device->certificate_pem, now);
    if (status == CertStatus::Revoked) throw reject(PkiError::Code::DeviceRevoked, "device certificate revoked");
    if (status != CertStatus::Valid) {
        throw reject(PkiError::Code::CertificateInvalid, "certificate " + std::string(to_string(status)));
    }

    auto cert = read_cert(device->certificate_pem);
    EVP_PKEY* key = cert ? X509_get0_pubkey(cert.get()) : nullptr;
    if (!key || !ed25519_verify(key, c.nonce, signature)) {
        throw reject(PkiError::Code::BadSignature, "signature does not verify");
    }

    DeviceSession s;
    s.device_id = c.device_id;
    s.serial = device->serial;
    s.token = crypto::random_token(32);
    s.issued_at = now;
    s.expires_at = now + cfg_.device_session_ttl;
    {
        std::lock_guard lock(mutex_);
        sessions_[token_key(s.token)] = s;
    }
    emit(audit::EventKind::DeviceAuthSuccess, c.device_id, {{"serial", std::to_string(s.serial)}});
    return s;
}

std::optional<DeviceSession> CertificateAuthority::validate_device_session(const std::string& token) const {
    const auto now = clock_.now();
    std::lock_guard lock(mutex_);
    const auto it = sessions_.find(token_key(token));
    if (it == sessions_.end() || now >= it->second.expires_at) return std::nullopt;
    if (state_.revoked.count(it->second.serial)) return std::nullopt;
    return it->second;
}

void CertificateAuthority::revoke(std::uint64_t serial, const std::string& reason) {
    std::lock_guard lock(mutex_);
    require_ca();
    if (serial == 0 || serial > state_.serial_counter) {
        throw PkiError(PkiError::Code::UnknownSerial, "serial never issued: " + std::to_string(serial));
    }
    if (state_.revoked.count(serial)) return;
    state_.revoked[serial] = clock_.now();
    save_state();
    for (const auto& name : keystore_.names()) {
        if (name.rfind("device/", 0) != 0) continue;
        auto d = device_from_json(nlohmann::json::parse(bytes_text(keystore_.get(name))));
        if (d.serial == serial) {
            d.status = DeviceStatus::Revoked;
            save_device(d);
            break;
        }
    }
    spdlog::info("revoked serial {}: {}", serial, reason);
}

}  // namespace ztiam::pki
