#pragma once

#include "ztiam/clock.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace ztiam::policy {

struct GeoPoint {
    double lat = 0.0;  // degrees, [-90, 90]
    double lon = 0.0;  // degrees, [-180, 180]

    /// Throws std::invalid_argument when either component is out of range.
    static GeoPoint make(double lat, double lon);
    friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

using AttributeValue = std::variant<std::string, double, std::int64_t, bool, GeoPoint, Timestamp>;

enum class ValueType { String, Double, Integer, Boolean, Geo, Time };

ValueType type_of(const AttributeValue& v);
std::string_view to_string(ValueType t);
std::optional<ValueType> value_type_from_string(std::string_view s);
std::string describe(const AttributeValue& v);

enum class Category { Subject, Resource, Action, Environment };

std::string_view to_string(Category c);

struct AttributeRef {
    Category category = Category::Subject;
    std::string key;

    /// Parses "<category>.<key>", e.g. "subject.org". Throws std::invalid_argument.
    static AttributeRef parse(std::string_view path);
    std::string path() const;
    friend bool operator==(const AttributeRef&, const AttributeRef&) = default;
};

struct Expression;

struct Literal {
    AttributeValue value;
    friend bool operator==(const Literal&, const Literal&) = default;
};

struct Apply {
    std::string function;
    std::vector<Expression> args;
    friend bool operator==(const Apply&, const Apply&);
};

struct Expression {
    std::variant<Literal, AttributeRef, Apply> node;

    static Expression literal(AttributeValue v) { return {Literal{std::move(v)}}; }
    static Expression attribute(std::string_view path) { return {AttributeRef::parse(path)}; }
    static Expression apply(std::string fn, std::vector<Expression> args) {
        return {Apply{std::move(fn), std::move(args)}};
    }
    friend bool operator==(const Expression&, const Expression&) = default;
};

inline bool operator==(const Apply& a, const Apply& b) {
    return a.function == b.function && a.args == b.args;
}

enum class Effect { Permit, Deny };

struct Rule {
    std::string id;
    Effect effect = Effect::Permit;
    std::optional<Expression> condition;  // absent: vacuously true
    friend bool operator==(const Rule&, const Rule&) = default;
};

enum class CombiningAlgorithm { DenyOverrides, PermitOverrides, FirstApplicable };

std::string_view to_string(CombiningAlgorithm a);
std::optional<CombiningAlgorithm> combining_from_string(std::string_view s);

struct Policy {
    std::string id;
    std::optional<Expression> target;
    CombiningAlgorithm combining = CombiningAlgorithm::DenyOverrides;
    std::vector<Rule> rules;
    friend bool operator==(const Policy&, const Policy&) = default;
};

struct PolicySet {
    std::string id;
    CombiningAlgorithm combining = CombiningAlgorithm::DenyOverrides;
    std::vector<Policy> policies;
    std::uint64_t version = 0;
    friend bool operator==(const PolicySet&, const PolicySet&) = default;
};

enum class Decision { Permit, Deny, Indeterminate, NotApplicable };

std::string_view to_string(Decision d);

using AttributeBag = std::map<std::string, AttributeValue, std::less<>>;

struct RequestContext {
    AttributeBag subject;
    AttributeBag resource;
    AttributeBag action;
    AttributeBag environment;

    AttributeBag& bag(Category c);
    const AttributeBag& bag(Category c) const;
    const AttributeValue* find(const AttributeRef& ref) const;
};

/// Why an expression produced no value. TypeError is a runtime variant mismatch;
/// both reasons fold into Indeterminate at the decision level.
struct Missing {
    enum class Reason { Absent, TypeError };
    Reason reason = Reason::Absent;
    std::string detail;
};

using EvalResult = std::variant<AttributeValue, Missing>;

/// Sink for runtime type errors raised during evaluation.
using Diagnostics = std::vector<std::string>;

// --- function registry -----------------------------------------------------

struct FunctionSignature {
    std::string_view name;
    std::vector<ValueType> params;          // fixed leading parameters
    std::optional<ValueType> variadic;      // type of repeated trailing parameters
    std::size_t min_variadic = 0;
    ValueType result = ValueType::Boolean;
    std::function<EvalResult(std::span<const AttributeValue>)> impl;

    bool accepts_arity(std::size_t n) const;
    std::optional<ValueType> param_type(std::size_t index) const;
    std::string arity_text() const;
};

const FunctionSignature* find_function(std::string_view name);
std::vector<std::string_view> function_names();

/// Seconds since midnight for "HH:MM" or "HH:MM:SS"; nullopt when malformed.
std::optional<int> parse_time_of_day(std::string_view text);

// --- evaluation ------------------------------------------------------------

inline constexpr double kEarthRadiusKm = 6371.0;

/// Haversine great-circle distance on a sphere of radius kEarthRadiusKm.
double geo_distance_km(const GeoPoint& a, const GeoPoint& b);

EvalResult evaluate_expression(const Expression& expr, const RequestContext& ctx);

Decision evaluate_rule(const Rule& rule, const RequestContext& ctx, Diagnostics* diag = nullptr);

Decision combine(std::span<const Decision> decisions, CombiningAlgorithm alg);

Decision evaluate_policy(const Policy& policy, const RequestContext& ctx, Diagnostics* diag = nullptr);

Decision evaluate(const PolicySet& set, const RequestContext& ctx, Diagnostics* diag = nullptr);

// --- document parsing ------------------------------------------------------

class PolicyError : public std::runtime_error {
public:
    enum class Code { SyntaxError, UnknownFunction, ArityMismatch, TypeMismatch, DuplicateId };

    PolicyError(Code code, std::string message, std::string location);

    Code code() const { return code_; }
    /// "line L, column C" for syntax errors, otherwise a JSON pointer into the document.
    const std::string& location() const { return location_; }

private:
    Code code_;
    std::string location_;
};

std::string_view to_string(PolicyError::Code c);

/// Parses and validates a policy document. Throws PolicyError.
PolicySet parse_policy_set(std::string_view document);

/// Canonical document text; parse_policy_set(serialize_policy_set(s)) == s.
std::string serialize_policy_set(const PolicySet& set);

}  // namespace ztiam::policy
