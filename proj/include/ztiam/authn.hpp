#pragma once

#include "ztiam/clock.hpp"
#include "ztiam/crypto.hpp"
#include "ztiam/event_log.hpp"
#include "ztiam/policy.hpp"
#include "ztiam/secret_store.hpp"

#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ztiam::authn {

/// Request context captured server-side at authentication time.
struct LoginContext {
    std::string ip;
    std::optional<policy::GeoPoint> geo;
    Timestamp timestamp{};
    std::string service_id;
};

enum class AccountStatus { Active, Locked };

struct PasswordRecord {
    std::string kdf_id = "scrypt";
    crypto::Bytes salt;
    crypto::ScryptParams params;
    crypto::Bytes digest;
};

PasswordRecord hash_password(std::string_view password, const crypto::ScryptParams& params);
/// Constant-time digest comparison.
bool verify_password(const PasswordRecord& record, std::string_view password);

/// The secret itself lives in the SecretStore under "totp/<user_id>".
struct TotpEnrollment {
    int digits = 6;
    int step = 30;
    bool confirmed = false;
};

struct UserAccount {
    std::string user_id;
    std::string username;
    PasswordRecord password;
    std::optional<TotpEnrollment> totp;
    std::string org;
    Timestamp created_at{};
    AccountStatus status = AccountStatus::Active;
    Timestamp locked_until{};
};

struct PendingLogin {
    std::string pending_id;
    std::string user_id;
    LoginContext context;
    Timestamp issued_at{};
    Timestamp expires_at{};
};

struct Session {
    std::string user_id;
    Timestamp issued_at{};
    Timestamp expires_at{};
    LoginContext context;
};

struct IssuedSession {
    std::string token;  // returned once; only its hash is retained
    Session session;
};

class AuthError : public std::runtime_error {
public:
    enum class Code {
        UsernameTaken,
        WeakPassword,
        BadCredentials,
        AccountLocked,
        CodeInvalid,
        PendingExpired,
        TooManyAttempts,
    };

    AuthError(Code code, std::string message) : std::runtime_error(std::move(message)), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

/// Wire form, e.g. "CODE_INVALID".
std::string_view to_string(AuthError::Code c);

/// Standard TOTP: HMAC-SHA-1 over the big-endian counter floor(t / step),
/// dynamic truncation, modulo 10^digits, left-zero-padded. digits must be 6 or 8.
std::string totp_code(crypto::ByteView secret, Timestamp t, int step = 30, int digits = 6);

std::string provisioning_uri(std::string_view issuer, std::string_view username, crypto::ByteView secret);

struct AuthnConfig {
    std::string issuer = "ztiam";
    std::size_t min_password_length = 12;
    crypto::ScryptParams kdf;
    Seconds pending_ttl{120};
    int max_totp_attempts = 3;
    int totp_skew_windows = 1;
    int lockout_threshold = 5;
    Seconds lockout_window{15 * 60};
    Seconds lockout_duration{15 * 60};
    Seconds session_ttl{3600};
};

struct Registration {
    UserAccount account;
    std::string provisioning_uri;
};

/// Two-stage login: password (start_login) then TOTP (verify_totp). A session
/// is only ever issued by verify_totp on a pending login created by start_login.
class AuthService {
public:
    AuthService(SecretStore& secrets, audit::EventSink& sink, const Clock& clock, AuthnConfig cfg,
                std::optional<std::filesystem::path> accounts_file = std::nullopt);

    Registration register_user(const std::string& username, const std::string& password, const std::string& org,
                               const LoginContext& ctx);
    PendingLogin start_login(const std::string& username, const std::string& password, const LoginContext& ctx);
    IssuedSession verify_totp(const std::string& pending_id, const std::string& code);

    std::optional<Session> validate_session(const std::string& token) const;
    void revoke_session(const std::string& token);

    std::optional<UserAccount> find_user(const std::string& user_id) const;
    std::optional<UserAccount> find_by_username(const std::string& username) const;

    const AuthnConfig& config() const { return cfg_; }

private:
    struct AccountState {
        UserAccount account;
        std::deque<Timestamp> failures;
    };
    struct PendingState {
        PendingLogin pending;
        int attempts = 0;
        bool consumed = false;
    };

    void emit(audit::EventKind kind, const std::string& principal, const LoginContext& ctx,
              std::map<std::string, std::string> detail);
    void load_accounts();
    void save_accounts() const;
    void purge_expired(Timestamp now);

    SecretStore& secrets_;
    audit::EventSink& sink_;
    const Clock& clock_;
    AuthnConfig cfg_;
    std::optional<std::filesystem::path> accounts_file_;
    PasswordRecord dummy_record_;

    mutable std::mutex mutex_;
    std::unordered_map<std::string, AccountState> accounts_;  // by user_id
    std::unordered_map<std::string, std::string> by_username_;
    std::unordered_map<std::string, PendingState> pending_;
    std::unordered_map<std::string, Session> sessions_;  // keyed by hex sha256(token)
};

// --- request context extraction ---------------------------------------------

class GeoResolver {
public:
    virtual ~GeoResolver() = default;
    virtual std::optional<policy::GeoPoint> resolve(const std::string& ip) const = 0;
};

class StaticGeoResolver final : public GeoResolver {
public:
    StaticGeoResolver() = default;
    explicit StaticGeoResolver(std::map<std::string, policy::GeoPoint> table) : table_(std::move(table)) {}

    void add(std::string ip, policy::GeoPoint p) { table_.insert_or_assign(std::move(ip), p); }
    std::optional<policy::GeoPoint> resolve(const std::string& ip) const override;

private:
    std::map<std::string, policy::GeoPoint> table_;
};

struct TransportMetadata {
    std::string peer_ip;
    std::map<std::string, std::string> headers;  // lower-case names
};

inline constexpr std::string_view kServiceIdHeader = "x-service-id";
inline constexpr std::string_view kForwardedForHeader = "x-forwarded-for";

/// IP from the connection, or X-Forwarded-For only when the peer is an allowlisted
/// proxy; geo from the resolver; timestamp always from the server clock.
LoginContext extract_context(const TransportMetadata& meta, const GeoResolver& resolver, const Clock& clock,
                             const std::vector<std::string>& proxy_allowlist = {});

}  // namespace ztiam::authn
