#include "ztiam/authn.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace ztiam::authn {

using audit::EventKind;
using crypto::Bytes;
using crypto::ByteView;

namespace {

constexpr std::size_t kSaltSize = 16;
constexpr std::size_t kDigestSize = 32;
constexpr std::size_t kTotpSecretSize = 20;

std::string totp_secret_name(const std::string& user_id) { return "totp/" + user_id; }

std::string token_key(const std::string& token) { return crypto::hex_encode(crypto::sha256(crypto::as_bytes(token))); }

std::string percent_encode(std::string_view s) {
    static constexpr char hex[] = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '.' || c == '_' || c == '~') {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back('%');
            out.push_back(hex[c >> 4]);
            out.push_back(hex[c & 0x0f]);
        }
    }
    return out;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::string_view to_string(AuthError::Code c) {
    switch (c) {
        case AuthError::Code::UsernameTaken: return "USERNAME_TAKEN";
        case AuthError::Code::WeakPassword: return "WEAK_PASSWORD";
        case AuthError::Code::BadCredentials: return "BAD_CREDENTIALS";
        case AuthError::Code::AccountLocked: return "ACCOUNT_LOCKED";
        case AuthError::Code::CodeInvalid: return "CODE_INVALID";
        case AuthError::Code::PendingExpired: return "PENDING_EXPIRED";
        case AuthError::Code::TooManyAttempts: return "TOO_MANY_ATTEMPTS";
    }
    return "AUTH_ERROR";
}

PasswordRecord hash_password(std::string_view password, const crypto::ScryptParams& params) {
    PasswordRecord r;
    r.salt = crypto::random_bytes(kSaltSize);
    r.params = params;
    r.digest = crypto::scrypt(password, r.salt, params, kDigestSize);
    return r;
}

bool verify_password(const PasswordRecord& record, std::string_view password) {
    if (record.kdf_id != "scrypt") return false;
    const auto digest = crypto::scrypt(password, record.salt, record.params, record.digest.size());
    return crypto::constant_time_equal(digest, record.digest);
}

std::string totp_code(ByteView secret, Timestamp t, int step, int digits) {
    if (digits != 6 && digits != 8) throw std::invalid_argument("TOTP digits must be 6 or 8");
    if (step <= 0) throw std::invalid_argument("TOTP step must be positive");
    const auto seconds = to_unix(t);
    if (seconds < 0) throw std::invalid_argument("TOTP time must be non-negative");
    const auto counter = static_cast<std::uint64_t>(seconds / step);

    std::uint8_t msg[8];
    for (int i = 0; i < 8; ++i) msg[i] = static_cast<std::uint8_t>(counter >> (8 * (7 - i)));
    const auto mac = crypto::hmac_sha1(secret, msg);

    const int offset = mac[19] & 0x0f;
    const std::uint32_t binary = (std::uint32_t{mac[offset] & 0x7fu} << 24) | (std::uint32_t{mac[offset + 1]} << 16) |
                                 (std::uint32_t{mac[offset + 2]} << 8) | std::uint32_t{mac[offset + 3]};
    std::uint32_t modulus = 1;
    for (int i = 0; i < digits; ++i) modulus *= 10;
    auto code = std::to_string(binary % modulus);
    code.insert(0, static_cast<std::size_t>(digits) - code.size(), '0');
    return code;
}

std::string provisioning_uri(std::string_view issuer, std::string_view username, ByteView secret) {
    const auto iss = percent_encode(issuer);
    return "otpauth://totp/" + iss + ":" + percent_encode(username) + "?secret=" + crypto::base32_encode(secret) +
           "&issuer=" + iss + "&digits=6&period=30&algorithm=SHA1";
}

// --- AuthService -------------------------------------------------------------

AuthService::AuthService(SecretStore& secrets, audit::EventSink& sink, const Clock& clock, AuthnConfig cfg,
                         std::optional<std::filesystem::path> accounts_file)
    : secrets_(secrets), sink_(sink), clock_(clock), cfg_(std::move(cfg)), accounts_file_(std::move(accounts_file)) {
    dummy_record_ = hash_password(crypto::random_token(16), cfg_.kdf);
    if (accounts_file_) load_accounts();
}

void AuthService::emit(EventKind kind, const std::string& principal, const LoginContext& ctx,
                       std::map<std::string, std::string> detail) {
    audit::AuditEvent e;
    e.kind = kind;
    e.principal = principal;
    e.time = ctx.timestamp;
    e.ip = ctx.ip;
    e.geo = ctx.geo;
    e.service_id = ctx.service_id;
    e.detail = std::move(detail);
    sink_.emit(std::move(e));
}

Registration AuthService::register_user(const std::string& username, const std::string& password,
                                        const std::string& org, const LoginContext& ctx) {
    if (username.empty() || username.size() > 64 || username.find_first_of(": \t\r\n") != std::string::npos) {
        throw std::invalid_argument("username must be 1-64 characters without spaces or ':'");
    }
    if (password.size() < cfg_.min_password_length) {
        throw AuthError(AuthError::Code::WeakPassword,
                        "password must be at least " + std::to_string(cfg_.min_password_length) + " characters");
    }
    {
        std::lock_guard lock(mutex_);
        if (by_username_.count(username)) throw AuthError(AuthError::Code::UsernameTaken, "username taken");
    }
    auto record = hash_password(password, cfg_.kdf);
    const auto secret = crypto::random_bytes(kTotpSecretSize);

    UserAccount account;
    account.user_id = "u-" + crypto::random_token(8);
    account.username = username;
    account.password = std::move(record);
    account.totp = TotpEnrollment{};
    account.org = org;
    account.created_at = clock_.now();
    {
        std::lock_guard lock(mutex_);
        if (by_username_.count(username)) throw AuthError(AuthError::Code::UsernameTaken, "username taken");
        secrets_.put(totp_secret_name(account.user_id), secret);
        by_username_[username] = account.user_id;
        accounts_[account.user_id] = AccountState{account, {}};
        save_accounts();
    }
    emit(EventKind::Register, account.user_id, ctx, {{"username", username}, {"org", org}});
    return Registration{account, provisioning_uri(cfg_.issuer, username, secret)};
}

PendingLogin AuthService::start_login(const std::string& username, const std::string& password,
                                      const LoginContext& ctx) {
    const auto now = clock_.now();
    std::optional<PasswordRecord> record;
    std::string user_id;
    {
        std::lock_guard lock(mutex_);
        if (const auto it = by_username_.find(username); it != by_username_.end()) {
            auto& state = accounts_.at(it->second);
            user_id = state.account.user_id;
            if (state.account.status == AccountStatus::Locked) {
                if (now < state.account.locked_until) {
                    emit(EventKind::LoginFailure, user_id, ctx, {{"reason", "locked"}, {"stage", "password"}});
                    throw AuthError(AuthError::Code::AccountLocked, "account locked");
                }
                state.account.status = AccountStatus::Active;
                state.failures.clear();
                save_accounts();
            }
            record = state.account.password;
        }
    }

    if (!record) {
        // Same KDF cost as a real verification so unknown users are not distinguishable by timing.
        (void)verify_password(dummy_record_, password);
        emit(EventKind::LoginFailure, username, ctx, {{"reason", "bad_credentials"}, {"stage", "password"}});
        throw AuthError(AuthError::Code::BadCredentials, "bad credentials");
    }

    const bool ok = verify_password(*record, password);

    std::lock_guard lock(mutex_);
    auto& state = accounts_.at(user_id);
    if (!ok) {
        while (!state.failures.empty() && state.failures.front() <= now - cfg_.lockout_window) {
            state.failures.pop_front();
        }
        state.failures.push_back(now);
        std::map<std::string, std::string> detail{{"reason", "bad_credentials"}, {"stage", "password"}};
        if (static_cast<int>(state.failures.size()) >= cfg_.lockout_threshold) {
            state.account.status = AccountStatus::Locked;
            state.account.locked_until = now + cfg_.lockout_duration;
            state.failures.clear();
            detail["locked_until"] = std::to_string(to_unix(state.account.locked_until));
            save_accounts();
        }
        emit(EventKind::LoginFailure, user_id, ctx, std::move(detail));
        throw AuthError(AuthError::Code::BadCredentials, "bad credentials");
    }
    state.failures.clear();
    purge_expired(now);

    PendingLogin pending;
    pending.pending_id = crypto::random_token(16);
    pending.user_id = user_id;
    pending.context = ctx;
    pending.issued_at = now;
    pending.expires_at = now + cfg_.pending_ttl;
    pending_[pending.pending_id] = PendingState{pending, 0, false};
    emit(EventKind::LoginSuccess, user_id, ctx, {{"stage", "password"}});
    return pending;
}

IssuedSession AuthService::verify_totp(const std::string& pending_id, const std::string& code) {
    const auto now = clock_.now();
    std::lock_guard lock(mutex_);
    const auto it = pending_.find(pending_id);
    if (it == pending_.end() || it->second.consumed || now >= it->second.pending.expires_at) {
        const std::string principal = it == pending_.end() ? std::string("unknown") : it->second.pending.user_id;
        LoginContext ctx = it == pending_.end() ? LoginContext{} : it->second.pending.context;
        ctx.timestamp = now;
        emit(EventKind::MfaFailure, principal, ctx, {{"reason", "pending_expired"}});
        throw AuthError(AuthError::Code::PendingExpired, "login expired or already used");
    }
    auto& state = it->second;
    auto ctx = state.pending.context;
    ctx.timestamp = now;
    if (state.attempts >= cfg_.max_totp_attempts) {
        emit(EventKind::MfaFailure, state.pending.user_id, ctx, {{"reason", "too_many_attempts"}});
        throw AuthError(AuthError::Code::TooManyAttempts, "too many attempts");
    }

    auto& account = accounts_.at(state.pending.user_id).account;
    const auto enrollment = account.totp.value_or(TotpEnrollment{});
    const auto secret = secrets_.get(totp_secret_name(account.user_id));
    bool match = false;
    for (int w = -cfg_.totp_skew_windows; w <= cfg_.totp_skew_windows; ++w) {
        const auto t = now + Seconds{static_cast<std::int64_t>(w) * enrollment.step};
        if (to_unix(t) < 0) continue;
        const auto expected = totp_code(secret, t, enrollment.step, enrollment.digits);
        match |= crypto::constant_time_equal(crypto::as_bytes(expected), crypto::as_bytes(code));
    }
    if (!match) {
        ++state.attempts;
        emit(EventKind::MfaFailure, account.user_id, ctx,
             {{"reason", "code_invalid"}, {"attempt", std::to_string(state.attempts)}});
        throw AuthError(AuthError::Code::CodeInvalid, "invalid code");
    }

    state.consumed = true;
    if (account.totp && !account.totp->confirmed) {
        account.totp->confirmed = true;
        save_accounts();
    }
    IssuedSession issued;
    issued.token = crypto::random_token(32);
    issued.session = Session{account.user_id, now, now + cfg_.session_ttl, ctx};
    sessions_[token_key(issued.token)] = issued.session;
    emit(EventKind::LoginSuccess, account.user_id, ctx, {{"stage", "mfa"}});
    return issued;
}

std::optional<Session> AuthService::validate_session(const std::string& token) const {
    if (token.empty()) return std::nullopt;
    const auto key = token_key(token);
    const auto now = clock_.now();
    std::lock_guard lock(mutex_);
    const auto it = sessions_.find(key);
    if (it == sessions_.end() || now >= it->second.expires_at) return std::nullopt;
    return it->second;
}

void AuthService::revoke_session(const std::string& token) {
    std::lock_guard lock(mutex_);
    sessions_.erase(token_key(token));
}

std::optional<UserAccount> AuthService::find_user(const std::string& user_id) const {
    std::lock_guard lock(mutex_);
    const auto it = accounts_.find(user_id);
    if (it == accounts_.end()) return std::nullopt;
    return it->second.account;
}

std::optional<UserAccount> AuthService::find_by_username(const std::string& username) const {
    std::lock_guard lock(mutex_);
    const auto it = by_username_.find(username);
    if (it == by_username_.end()) return std::nullopt;
    return accounts_.at(it->second).account;
}

void AuthService::purge_expired(Timestamp now) {
    std::erase_if(pending_, [&](const auto& kv) { return now >= kv.second.pending.expires_at + Seconds{600}; });
    std::erase_if(sessions_, [&](const auto& kv) { return now >= kv.second.expires_at; });
}

void AuthService::load_accounts() {
    if (!std::filesystem::exists(*accounts_file_)) return;
    std::ifstream in(*accounts_file_);
    const auto doc = nlohmann::json::parse(in);
    for (const auto& j : doc.at("accounts")) {
        UserAccount a;
        a.user_id = j.at("user_id").get<std::string>();
        a.username = j.at("username").get<std::string>();
        a.org = j.at("org").get<std::string>();
        a.created_at = from_unix(j.at("created_at").get<std::int64_t>());
        a.status = j.at("status").get<std::string>() == "Locked" ? AccountStatus::Locked : AccountStatus::Active;
        a.locked_until = from_unix(j.at("locked_until").get<std::int64_t>());
        const auto& pw = j.at("password");
        a.password.kdf_id = pw.at("kdf").get<std::string>();
        a.password.salt = crypto::base64_decode(pw.at("salt").get<std::string>());
        a.password.digest = crypto::base64_decode(pw.at("digest").get<std::string>());
        a.password.params = {pw.at("n").get<std::uint64_t>(), pw.at("r").get<std::uint64_t>(),
                             pw.at("p").get<std::uint64_t>()};
        if (j.contains("totp")) {
            const auto& t = j["totp"];
            a.totp = TotpEnrollment{t.at("digits").get<int>(), t.at("step").get<int>(), t.at("confirmed").get<bool>()};
        }
        by_username_[a.username] = a.user_id;
        const auto id = a.user_id;
        accounts_[id] = AccountState{std::move(a), {}};
    }
}

void AuthService::save_accounts() const {
    if (!accounts_file_) return;
    nlohmann::json list = nlohmann::json::array();
    for (const auto& [id, state] : accounts_) {
        const auto& a = state.account;
        nlohmann::json j;
        j["user_id"] = a.user_id;
        j["username"] = a.username;
        j["org"] = a.org;
        j["created_at"] = to_unix(a.created_at);
        j["status"] = a.status == AccountStatus::Locked ? "Locked" : "Active";
        j["locked_until"] = to_unix(a.locked_until);
        j["password"] = {{"kdf", a.password.kdf_id},
                         {"salt", crypto::base64_encode(a.password.salt)},
                         {"digest", crypto::base64_encode(a.password.digest)},
                         {"n", a.password.params.n},
                         {"r", a.password.params.r},
                         {"p", a.password.params.p}};
        if (a.totp) j["totp"] = {{"digits", a.totp->digits}, {"step", a.totp->step}, {"confirmed", a.totp->confirmed}};
        list.push_back(std::move(j));
    }
    const auto tmp = std::filesystem::path(accounts_file_->string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << nlohmann::json{{"accounts", list}}.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, *accounts_file_);
}

// --- context extraction ------------------------------------------------------

std::optional<policy::GeoPoint> StaticGeoResolver::resolve(const std::string& ip) const {
    const auto it = table_.find(ip);
    if (it == table_.end()) return std::nullopt;
    return it->second;
}

LoginContext extract_context(const TransportMetadata& meta, const GeoResolver& resolver, const Clock& clock,
                             const std::vector<std::string>& proxy_allowlist) {
    LoginContext ctx;
    ctx.ip = meta.peer_ip;
    const bool trusted_proxy =
        std::find(proxy_allowlist.begin(), proxy_allowlist.end(), meta.peer_ip) != proxy_allowlist.end();
    if (trusted_proxy) {
        if (const auto it = meta.headers.find(std::string(kForwardedForHeader)); it != meta.headers.end()) {
            const auto first = trim(std::string_view(it->second).substr(0, it->second.find(',')));
            if (!first.empty()) ctx.ip = first;
        }
    }
    try {
        ctx.geo = resolver.resolve(ctx.ip);
    } catch (const std::exception& ex) {
        spdlog::warn("geo resolver failed for {}: {}", ctx.ip, ex.what());
        ctx.geo.reset();
    }
    ctx.timestamp = clock.now();
    if (const auto it = meta.headers.find(std::string(kServiceIdHeader)); it != meta.headers.end()) {
        ctx.service_id = it->second;
    }
    return ctx;
}

}  // namespace ztiam::authn
