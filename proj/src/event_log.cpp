#include "ztiam/event_log.hpp"

#include <nlohmann/json.hpp>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ztiam::audit {

namespace {

constexpr std::array kKinds = {
    EventKind::Register,      EventKind::LoginSuccess,   EventKind::LoginFailure,      EventKind::MfaFailure,
    EventKind::AuthzPermit,   EventKind::AuthzDeny,      EventKind::Penalty,           EventKind::DeviceEnrolled,
    EventKind::DeviceAuthSuccess, EventKind::DeviceAuthFailure, EventKind::PolicyUpdated,
};

thread_local std::string t_correlation_id;

bool in_window(const AuditEvent& e, Timestamp from, Timestamp to) { return e.time >= from && e.time < to; }

bool kind_matches(const std::vector<EventKind>& kinds, EventKind k) {
    return kinds.empty() || std::find(kinds.begin(), kinds.end(), k) != kinds.end();
}

[[noreturn]] void throw_errno(const std::string& what) {
    throw StoreUnavailable(what + ": " + std::strerror(errno));
}

}  // namespace

std::string_view to_string(EventKind k) {
    switch (k) {
        case EventKind::Register: return "Register";
        case EventKind::LoginSuccess: return "LoginSuccess";
        case EventKind::LoginFailure: return "LoginFailure";
        case EventKind::MfaFailure: return "MfaFailure";
        case EventKind::AuthzPermit: return "AuthzPermit";
        case EventKind::AuthzDeny: return "AuthzDeny";
        case EventKind::Penalty: return "Penalty";
        case EventKind::DeviceEnrolled: return "DeviceEnrolled";
        case EventKind::DeviceAuthSuccess: return "DeviceAuthSuccess";
        case EventKind::DeviceAuthFailure: return "DeviceAuthFailure";
        case EventKind::PolicyUpdated: return "PolicyUpdated";
    }
    return "Unknown";
}

std::optional<EventKind> event_kind_from_string(std::string_view s) {
    for (auto k : kKinds) {
        if (to_string(k) == s) return k;
    }
    return std::nullopt;
}

std::string encode_event(const AuditEvent& e) {
    nlohmann::ordered_json j;
    j["seq"] = e.seq;
    j["kind"] = std::string(to_string(e.kind));
    j["principal"] = e.principal;
    j["resource_id"] = e.resource_id ? nlohmann::ordered_json(*e.resource_id) : nlohmann::ordered_json(nullptr);
    j["time"] = to_unix(e.time);
    j["ip"] = e.ip;
    j["geo"] = e.geo ? nlohmann::ordered_json::array({e.geo->lat, e.geo->lon}) : nlohmann::ordered_json(nullptr);
    j["service_id"] = e.service_id;
    j["detail"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : e.detail) j["detail"][k] = v;
    return j.dump();
}

AuditEvent decode_event(std::string_view text) {
    try {
        const auto j = nlohmann::json::parse(text);
        AuditEvent e;
        e.seq = j.at("seq").get<std::uint64_t>();
        const auto kind = event_kind_from_string(j.at("kind").get<std::string>());
        if (!kind) throw std::invalid_argument("unknown event kind");
        e.kind = *kind;
        e.principal = j.at("principal").get<std::string>();
        if (!j.at("resource_id").is_null()) e.resource_id = j["resource_id"].get<std::string>();
        e.time = from_unix(j.at("time").get<std::int64_t>());
        e.ip = j.at("ip").get<std::string>();
        if (!j.at("geo").is_null()) e.geo = policy::GeoPoint::make(j["geo"][0].get<double>(), j["geo"][1].get<double>());
        e.service_id = j.at("service_id").get<std::string>();
        for (const auto& [k, v] : j.at("detail").items()) e.detail[k] = v.get<std::string>();
        return e;
    } catch (const nlohmann::json::exception& ex) {
        throw std::invalid_argument(std::string("malformed audit event: ") + ex.what());
    }
}

CorrelationScope::CorrelationScope(std::string id) : previous_(std::exchange(t_correlation_id, std::move(id))) {}
CorrelationScope::~CorrelationScope() { t_correlation_id = std::move(previous_); }
const std::string& CorrelationScope::current() { return t_correlation_id; }

// --- EventStore --------------------------------------------------------------

EventStore::EventStore() = default;

EventStore::EventStore(const std::filesystem::path& file) : path_(file) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    fd_ = ::open(file.c_str(), O_RDWR | O_CREAT | O_APPEND | O_CLOEXEC, 0600);
    if (fd_ < 0) throw_errno("open " + file.string());
    load();
}

EventStore::~EventStore() {
    if (fd_ >= 0) ::close(fd_);
}

void EventStore::load() {
    std::ifstream in(path_, std::ios::binary);
    const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    while (pos + 4 <= data.size()) {
        const auto* p = reinterpret_cast<const unsigned char*>(data.data() + pos);
        const std::size_t len = (std::size_t{p[0]} << 24) | (std::size_t{p[1]} << 16) | (std::size_t{p[2]} << 8) | p[3];
        if (pos + 4 + len > data.size()) break;
        auto e = decode_event(std::string_view(data).substr(pos + 4, len));
        if (e.seq != events_.size() + 1) throw std::invalid_argument("audit log sequence gap at " + std::to_string(e.seq));
        by_principal_[e.principal].push_back(events_.size());
        events_.push_back(std::move(e));
        pos += 4 + len;
    }
    if (pos != data.size() && ::ftruncate(fd_, static_cast<off_t>(pos)) != 0) throw_errno("truncate torn record");
}

void EventStore::write_record(const std::string& payload) {
    std::string record(4, '\0');
    const auto len = static_cast<std::uint32_t>(payload.size());
    record[0] = static_cast<char>(len >> 24);
    record[1] = static_cast<char>(len >> 16);
    record[2] = static_cast<char>(len >> 8);
    record[3] = static_cast<char>(len);
    record += payload;
    std::size_t off = 0;
    while (off < record.size()) {
        const auto n = ::write(fd_, record.data() + off, record.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("append audit record");
        }
        off += static_cast<std::size_t>(n);
    }
}

std::uint64_t EventStore::append(AuditEvent event) {
    std::unique_lock lock(mutex_);
    event.seq = events_.size() + 1;
    if (fd_ >= 0) write_record(encode_event(event));
    by_principal_[event.principal].push_back(events_.size());
    events_.push_back(std::move(event));
    return events_.back().seq;
}

void EventStore::sync() {
    if (fd_ >= 0 && ::fdatasync(fd_) != 0) throw_errno("fdatasync audit log");
}

std::size_t EventStore::count(const CountQuery& q) const {
    std::shared_lock lock(mutex_);
    const auto it = by_principal_.find(q.principal);
    if (it == by_principal_.end()) return 0;
    return static_cast<std::size_t>(std::count_if(it->second.begin(), it->second.end(), [&](std::size_t i) {
        const auto& e = events_[i];
        return kind_matches(q.kinds, e.kind) && in_window(e, q.from, q.to) &&
               (!q.resource_id || e.resource_id == q.resource_id);
    }));
}

std::optional<AuditEvent> EventStore::last(std::string_view principal, EventKind kind) const {
    std::shared_lock lock(mutex_);
    const auto it = by_principal_.find(std::string(principal));
    if (it == by_principal_.end()) return std::nullopt;
    for (auto idx = it->second.rbegin(); idx != it->second.rend(); ++idx) {
        if (events_[*idx].kind == kind) return events_[*idx];
    }
    return std::nullopt;
}

std::set<std::string> EventStore::known_values(std::string_view principal, ContextField field, Timestamp from,
                                               Timestamp to, const std::vector<EventKind>& kinds) const {
    std::shared_lock lock(mutex_);
    std::set<std::string> out;
    const auto it = by_principal_.find(std::string(principal));
    if (it == by_principal_.end()) return out;
    for (auto i : it->second) {
        const auto& e = events_[i];
        if (!kind_matches(kinds, e.kind) || !in_window(e, from, to)) continue;
        const auto& value = field == ContextField::Ip ? e.ip : e.service_id;
        if (!value.empty()) out.insert(value);
    }
    return out;
}

std::vector<AuditEvent> EventStore::events_for(std::string_view principal) const {
    std::shared_lock lock(mutex_);
    std::vector<AuditEvent> out;
    const auto it = by_principal_.find(std::string(principal));
    if (it == by_principal_.end()) return out;
    out.reserve(it->second.size());
    for (auto i : it->second) out.push_back(events_[i]);
    return out;
}

std::vector<AuditEvent> EventStore::events_after(std::uint64_t seq, std::size_t limit) const {
    std::shared_lock lock(mutex_);
    std::vector<AuditEvent> out;
    for (auto i = static_cast<std::size_t>(seq); i < events_.size() && out.size() < limit; ++i) out.push_back(events_[i]);
    return out;
}

std::size_t EventStore::size() const {
    std::shared_lock lock(mutex_);
    return events_.size();
}

// --- EventQueue --------------------------------------------------------------

EventQueue::EventQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("queue capacity must be positive");
}

bool EventQueue::try_push(AuditEvent event) {
    {
        std::lock_guard lock(mutex_);
        if (closed_ || items_.size() >= capacity_) return false;
        items_.push_back(std::move(event));
    }
    cv_.notify_one();
    return true;
}

std::deque<AuditEvent> EventQueue::take_all() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return !items_.empty() || closed_ || woken_; });
    woken_ = false;
    return std::exchange(items_, {});
}

void EventQueue::close() {
    {
        std::lock_guard lock(mutex_);
        closed_ = true;
    }
    cv_.notify_all();
}

bool EventQueue::closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
}

void EventQueue::wake() {
    {
        std::lock_guard lock(mutex_);
        woken_ = true;
    }
    cv_.notify_all();
}

std::size_t EventQueue::size() const {
    std::lock_guard lock(mutex_);
    return items_.size();
}

// --- EventLog ----------------------------------------------------------------

EventLog::EventLog(EventStore& store, Options options) : store_(store), queue_(options.capacity) {
    if (options.start_consumer) start();
}

EventLog::~EventLog() { stop(); }

void EventLog::emit(AuditEvent event) {
    const auto& cid = CorrelationScope::current();
    if (!cid.empty()) event.detail.emplace("correlation_id", cid);
    if (!queue_.try_push(std::move(event))) throw QueueFull();
    std::lock_guard lock(progress_mutex_);
    ++enqueued_;
}

void EventLog::start() {
    if (consumer_.joinable()) return;
    consumer_ = std::thread([this] { run(); });
}

void EventLog::stop() {
    if (!consumer_.joinable()) return;
    queue_.close();
    consumer_.join();
}

void EventLog::flush() {
    std::unique_lock lock(progress_mutex_);
    const auto target = enqueued_;
    if (!consumer_.joinable()) {
        lock.unlock();
        queue_.wake();
        drain_once();
        lock.lock();
    } else {
        queue_.wake();
        progress_cv_.wait(lock, [&] { return durable_ >= target || !error_.empty(); });
    }
    if (durable_ < target) throw StoreUnavailable("audit log not durable: " + error_);
}

bool EventLog::drain_once() {
    auto batch = queue_.take_all();
    for (auto& e : batch) pending_.push_back(std::move(e));
    const bool had_work = !pending_.empty();
    try {
        while (!pending_.empty()) {
            store_.append(std::move(pending_.front()));
            pending_.pop_front();
            ++appended_;
        }
        store_.sync();
        std::lock_guard lock(progress_mutex_);
        durable_ = appended_;
        error_.clear();
    } catch (const std::exception& ex) {
        std::lock_guard lock(progress_mutex_);
        error_ = ex.what();
    }
    progress_cv_.notify_all();
    return had_work;
}

void EventLog::run() {
    for (;;) {
        const bool had_work = drain_once();
        if (!had_work && queue_.closed()) break;
        if (!pending_.empty()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
}

}  // namespace ztiam::audit
