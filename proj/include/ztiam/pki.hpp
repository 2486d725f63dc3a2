#pragma once

#include "ztiam/clock.hpp"
#include "ztiam/crypto.hpp"
#include "ztiam/event_log.hpp"
#include "ztiam/secret_store.hpp"

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ztiam::pki {

// --- keystore ------------------------------------------------------------------

class KeystoreError : public std::runtime_error {
public:
    enum class Code { SealFailure, IntegrityFailure, NotFound, MasterKeyMissing };

    KeystoreError(Code code, std::string message) : std::runtime_error(std::move(message)), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

inline constexpr const char* kMasterKeyEnv = "ZTIAM_MASTER_KEY";

/// Decodes the base64 master key from the environment; it must be 32 bytes.
crypto::Bytes master_key_from_env(const char* var = kMasterKeyEnv);

/// Named secrets sealed with AES-256-GCM (entry name as associated data).
///
/// File layout: "ZTKS1\n" then records of
///   u32be name_len | name | u32be blob_len | blob
/// where blob = nonce(12) | ciphertext | tag(16) and blob_len == 0 deletes the name.
/// Later records win. The file is rewritten when dead records outweigh live ones.
class Keystore final : public SecretStore {
public:
    /// Memory-only store.
    explicit Keystore(crypto::Bytes master_key);
    /// Opens or creates the keystore file. Structural damage raises IntegrityFailure.
    Keystore(const std::filesystem::path& file, crypto::Bytes master_key);

    void put(const std::string& name, crypto::ByteView secret) override;
    /// Throws KeystoreError NotFound or IntegrityFailure.
    crypto::Bytes get(const std::string& name) const override;
    bool contains(const std::string& name) const override;
    void remove(const std::string& name);
    std::vector<std::string> names() const;

    /// Rewrites the file with only live entries.
    void compact();

private:
    void load();
    void append_record(const std::string& name, crypto::ByteView blob);
    void compact_locked();

    crypto::Bytes key_;
    std::optional<std::filesystem::path> path_;
    mutable std::mutex mutex_;
    std::map<std::string, crypto::Bytes> sealed_;
    std::size_t dead_records_ = 0;
};

// --- certificate authority -----------------------------------------------------

enum class CertStatus { Valid, Malformed, UnknownIssuer, BadSignature, Revoked, NotYetValid, Expired };

/// Wire form, e.g. "BAD_SIGNATURE".
std::string_view to_string(CertStatus s);

enum class DeviceStatus { Active, Revoked };

struct CaState {
    std::string certificate_pem;
    std::uint64_t serial_counter = 0;
    std::map<std::uint64_t, Timestamp> revoked;
};

struct DeviceIdentity {
    std::string device_id;
    std::string public_key_pem;
    std::string certificate_pem;
    std::uint64_t serial = 0;
    Timestamp enrolled_at{};
    DeviceStatus status = DeviceStatus::Active;
};

struct ChallengeRecord {
    std::string challenge_id;
    std::string device_id;
    crypto::Bytes nonce;
    Timestamp issued_at{};
    Timestamp expires_at{};
    bool used = false;
};

struct DeviceSession {
    std::string device_id;
    std::uint64_t serial = 0;
    std::string token;
    Timestamp issued_at{};
    Timestamp expires_at{};
};

class PkiError : public std::runtime_error {
public:
    enum class Code {
        CaExists,
        NoCa,
        DuplicateDevice,
        MalformedKey,
        UnknownDevice,
        DeviceRevoked,
        UnknownSerial,
        UnknownChallenge,
        ChallengeExpired,
        ChallengeReused,
        BadSignature,
        CertificateInvalid,
    };

    PkiError(Code code, std::string message) : std::runtime_error(std::move(message)), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

/// Wire form, e.g. "CHALLENGE_REUSED".
std::string_view to_string(PkiError::Code c);

/// A freshly issued leaf with its private key (server certificates, test devices).
struct IssuedKeyPair {
    std::string certificate_pem;
    std::string private_key_pem;
};

/// Ed25519 key pair in PEM (PKCS#8 private, SubjectPublicKeyInfo public).
struct Ed25519KeyPair {
    std::string private_key_pem;
    std::string public_key_pem;
};
Ed25519KeyPair generate_ed25519();
/// Signs `message` with a PEM private key. Throws crypto::CryptoError.
crypto::Bytes ed25519_sign(const std::string& private_key_pem, crypto::ByteView message);

struct PkiConfig {
    Seconds challenge_ttl{60};
    Seconds device_session_ttl{3600};
};

/// Internal CA. Key material, CA state and device records are held in the keystore
/// under "ca/key", "ca/cert", "ca/state" and "device/<id>".
class CertificateAuthority {
public:
    CertificateAuthority(Keystore& keystore, audit::EventSink& sink, const Clock& clock, PkiConfig cfg = {});

    CaState init_ca(const std::string& subject_name, int validity_years, bool overwrite = false);
    bool initialized() const;
    CaState state() const;
    std::string ca_certificate_pem() const;

    DeviceIdentity enroll_device(const std::string& device_id, const std::string& public_key_pem,
                                 int validity_days = 365);
    std::optional<DeviceIdentity> find_device(const std::string& device_id) const;

    /// Checks in order: parse, issuer, signature, revocation, validity window.
    CertStatus verify_cert_chain(const std::string& certificate_pem, Timestamp now) const;

    ChallengeRecord create_challenge(const std::string& device_id);
    /// The device signs the raw nonce bytes. Any attempt consumes the challenge.
    DeviceSession verify_challenge_response(const std::string& challenge_id, crypto::ByteView signature);
    std::optional<DeviceSession> validate_device_session(const std::string& token) const;

    void revoke(std::uint64_t serial, const std::string& reason);

    /// Leaf for the TLS listener (serverAuth, SAN localhost and 127.0.0.1).
    IssuedKeyPair issue_server_certificate(const std::string& common_name, int validity_days = 365);

private:
    void require_ca() const;
    void save_state();
    void save_device(const DeviceIdentity& d);
    std::string sign_leaf(const std::string& cn, const std::string& public_key_pem, int validity_days, bool server,
                          std::uint64_t serial);
    void emit(audit::EventKind kind, const std::string& principal, std::map<std::string, std::string> detail);

    Keystore& keystore_;
    audit::EventSink& sink_;
    const Clock& clock_;
    PkiConfig cfg_;

    mutable std::mutex mutex_;
    CaState state_;
    bool loaded_ = false;
    std::unordered_map<std::string, ChallengeRecord> challenges_;
    std::unordered_map<std::string, DeviceSession> sessions_;  // keyed by hex sha256(token)
};

}  // namespace ztiam::pki
