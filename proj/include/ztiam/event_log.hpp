#pragma once

#include "ztiam/clock.hpp"
#include "ztiam/policy.hpp"

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

namespace ztiam::audit {

enum class EventKind {
    Register,
    LoginSuccess,
    LoginFailure,
    MfaFailure,
    AuthzPermit,
    AuthzDeny,
    Penalty,
    DeviceEnrolled,
    DeviceAuthSuccess,
    DeviceAuthFailure,
    PolicyUpdated,
};

std::string_view to_string(EventKind k);
std::optional<EventKind> event_kind_from_string(std::string_view s);

struct AuditEvent {
    std::uint64_t seq = 0;  // assigned on append; gapless per store
    EventKind kind = EventKind::Register;
    std::string principal;  // user_id or device_id
    std::optional<std::string> resource_id;
    Timestamp time{};
    std::string ip;
    std::optional<policy::GeoPoint> geo;
    std::string service_id;
    std::map<std::string, std::string> detail;

    friend bool operator==(const AuditEvent&, const AuditEvent&) = default;
};

/// Canonical single-line JSON with fixed field order
/// (seq, kind, principal, resource_id, time, ip, geo, service_id, detail).
std::string encode_event(const AuditEvent& e);
/// Throws std::invalid_argument on malformed input.
AuditEvent decode_event(std::string_view text);

class QueueFull : public std::runtime_error {
public:
    QueueFull() : std::runtime_error("audit queue full") {}
};

class StoreUnavailable : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Attaches a request correlation id to every event emitted on this thread
/// while the scope is alive.
class CorrelationScope {
public:
    explicit CorrelationScope(std::string id);
    ~CorrelationScope();
    CorrelationScope(const CorrelationScope&) = delete;
    CorrelationScope& operator=(const CorrelationScope&) = delete;

    static const std::string& current();

private:
    std::string previous_;
};

class EventSink {
public:
    virtual ~EventSink() = default;
    /// Returns after enqueue. Throws QueueFull when the bound is reached.
    virtual void emit(AuditEvent event) = 0;
};

/// Query side of the log, as consumed by the PIP.
class EventSource {
public:
    virtual ~EventSource() = default;
    /// Every persisted event of one principal in append order, read atomically.
    /// Throws StoreUnavailable.
    virtual std::vector<AuditEvent> events_for(std::string_view principal) const = 0;
};

struct CountQuery {
    std::string principal;
    std::vector<EventKind> kinds;
    Timestamp from{};                // inclusive
    Timestamp to = Timestamp::max(); // exclusive
    std::optional<std::string> resource_id;
};

enum class ContextField { Ip, ServiceId };

/// Append-only log file of length-prefixed records (4-byte big-endian length,
/// then encode_event text) with an in-memory per-principal index rebuilt on open.
class EventStore final : public EventSource {
public:
    /// Memory-only store.
    EventStore();
    /// Opens or creates the log file. A torn trailing record is truncated away.
    explicit EventStore(const std::filesystem::path& file);
    ~EventStore() override;

    EventStore(const EventStore&) = delete;
    EventStore& operator=(const EventStore&) = delete;

    std::uint64_t append(AuditEvent event);
    void sync();

    std::size_t count(const CountQuery& q) const;
    std::optional<AuditEvent> last(std::string_view principal, EventKind kind) const;
    std::set<std::string> known_values(std::string_view principal, ContextField field, Timestamp from,
                                       Timestamp to, const std::vector<EventKind>& kinds = {}) const;
    std::vector<AuditEvent> events_for(std::string_view principal) const override;
    std::vector<AuditEvent> events_after(std::uint64_t seq, std::size_t limit) const;
    std::size_t size() const;

private:
    void load();
    void write_record(const std::string& payload);

    mutable std::shared_mutex mutex_;
    std::vector<AuditEvent> events_;
    std::unordered_map<std::string, std::vector<std::size_t>> by_principal_;
    int fd_ = -1;
    std::filesystem::path path_;
};

/// Bounded multi-producer queue; the single consumer is owned by EventLog.
class EventQueue {
public:
    explicit EventQueue(std::size_t capacity);

    bool try_push(AuditEvent event);
    /// Waits until events are available, `wake` is called, or the queue is closed.
    std::deque<AuditEvent> take_all();
    void close();
    void wake();
    bool closed() const;
    std::size_t capacity() const { return capacity_; }
    std::size_t size() const;

private:
    const std::size_t capacity_;
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<AuditEvent> items_;
    bool closed_ = false;
    bool woken_ = false;
};

class EventLog final : public EventSink {
public:
    struct Options {
        std::size_t capacity = 4096;
        bool start_consumer = true;
    };

    EventLog(EventStore& store, Options options);
    explicit EventLog(EventStore& store) : EventLog(store, Options{}) {}
    ~EventLog() override;

    EventLog(const EventLog&) = delete;
    EventLog& operator=(const EventLog&) = delete;

    void emit(AuditEvent event) override;

    /// Blocks until every event emitted before the call is persisted and synced.
    /// Throws StoreUnavailable when the store rejects writes.
    void flush();

    void start();
    /// Drains what is queued, then joins the consumer.
    void stop();

    EventStore& store() { return store_; }

private:
    void run();
    bool drain_once();

    EventStore& store_;
    EventQueue queue_;
    std::thread consumer_;

    std::mutex progress_mutex_;
    std::condition_variable progress_cv_;
    std::uint64_t enqueued_ = 0;
    std::uint64_t durable_ = 0;
    std::string error_;

    // Consumer-side state: events taken off the queue but not yet appended.
    std::deque<AuditEvent> pending_;
    std::uint64_t appended_ = 0;
};

}  // namespace ztiam::audit
