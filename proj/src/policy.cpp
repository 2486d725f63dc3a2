#include "ztiam/policy.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <sstream>

namespace ztiam::policy {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

EvalResult type_error(std::string_view fn, std::string_view what) {
    return Missing{Missing::Reason::TypeError, std::string(fn) + ": " + std::string(what)};
}

std::optional<double> as_number(const AttributeValue& v) {
    if (const auto* d = std::get_if<double>(&v)) return *d;
    if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
    return std::nullopt;
}

using Args = std::span<const AttributeValue>;

FunctionSignature make_double_compare(std::string_view name, bool (*cmp)(double, double)) {
    FunctionSignature f{name, {ValueType::Double, ValueType::Double}, std::nullopt, 0, ValueType::Boolean, {}};
    f.impl = [name, cmp](Args a) -> EvalResult {
        auto x = as_number(a[0]);
        auto y = as_number(a[1]);
        if (!x || !y) return type_error(name, "expected numeric arguments");
        return AttributeValue{cmp(*x, *y)};
    };
    return f;
}

FunctionSignature make_integer_compare(std::string_view name, bool (*cmp)(std::int64_t, std::int64_t)) {
    FunctionSignature f{name, {ValueType::Integer, ValueType::Integer}, std::nullopt, 0, ValueType::Boolean, {}};
    f.impl = [name, cmp](Args a) -> EvalResult {
        const auto* x = std::get_if<std::int64_t>(&a[0]);
        const auto* y = std::get_if<std::int64_t>(&a[1]);
        if (!x || !y) return type_error(name, "expected integer arguments");
        return AttributeValue{cmp(*x, *y)};
    };
    return f;
}

FunctionSignature make_logical(std::string_view name, bool is_and) {
    FunctionSignature f{name, {}, ValueType::Boolean, 1, ValueType::Boolean, {}};
    f.impl = [name, is_and](Args a) -> EvalResult {
        bool acc = is_and;
        for (const auto& v : a) {
            const auto* b = std::get_if<bool>(&v);
            if (!b) return type_error(name, "expected boolean arguments");
            acc = is_and ? (acc && *b) : (acc || *b);
        }
        return AttributeValue{acc};
    };
    return f;
}

std::vector<FunctionSignature> build_registry() {
    std::vector<FunctionSignature> r;

    FunctionSignature string_equal{"string-equal", {ValueType::String, ValueType::String}, std::nullopt, 0,
                                   ValueType::Boolean, {}};
    string_equal.impl = [](Args a) -> EvalResult {
        const auto* x = std::get_if<std::string>(&a[0]);
        const auto* y = std::get_if<std::string>(&a[1]);
        if (!x || !y) return type_error("string-equal", "expected string arguments");
        return AttributeValue{*x == *y};
    };
    r.push_back(std::move(string_equal));

    FunctionSignature one_of{"string-one-of", {ValueType::String}, ValueType::String, 1, ValueType::Boolean, {}};
    one_of.impl = [](Args a) -> EvalResult {
        const auto* x = std::get_if<std::string>(&a[0]);
        if (!x) return type_error("string-one-of", "expected string arguments");
        bool found = false;
        for (const auto& v : a.subspan(1)) {
            const auto* c = std::get_if<std::string>(&v);
            if (!c) return type_error("string-one-of", "expected string arguments");
            found = found || *c == *x;
        }
        return AttributeValue{found};
    };
    r.push_back(std::move(one_of));

    r.push_back(make_integer_compare("integer-equal", [](std::int64_t x, std::int64_t y) { return x == y; }));
    r.push_back(make_integer_compare("integer-le", [](std::int64_t x, std::int64_t y) { return x <= y; }));
    r.push_back(make_integer_compare("integer-ge", [](std::int64_t x, std::int64_t y) { return x >= y; }));
    r.push_back(make_double_compare("double-le", [](double x, double y) { return x <= y; }));
    r.push_back(make_double_compare("double-ge", [](double x, double y) { return x >= y; }));
    r.push_back(make_double_compare("double-lt", [](double x, double y) { return x < y; }));
    r.push_back(make_double_compare("double-gt", [](double x, double y) { return x > y; }));
    r.push_back(make_logical("and", true));
    r.push_back(make_logical("or", false));

    FunctionSignature not_fn{"not", {ValueType::Boolean}, std::nullopt, 0, ValueType::Boolean, {}};
    not_fn.impl = [](Args a) -> EvalResult {
        const auto* b = std::get_if<bool>(&a[0]);
        if (!b) return type_error("not", "expected boolean argument");
        return AttributeValue{!*b};
    };
    r.push_back(std::move(not_fn));

    FunctionSignature distance{"geo-distance-km", {ValueType::Geo, ValueType::Geo}, std::nullopt, 0,
                               ValueType::Double, {}};
    distance.impl = [](Args a) -> EvalResult {
        const auto* x = std::get_if<GeoPoint>(&a[0]);
        const auto* y = std::get_if<GeoPoint>(&a[1]);
        if (!x || !y) return type_error("geo-distance-km", "expected geo arguments");
        return AttributeValue{geo_distance_km(*x, *y)};
    };
    r.push_back(std::move(distance));

    // time-in-range(t, "HH:MM", "HH:MM"): daily UTC window [start, end), wrapping midnight when start > end.
    FunctionSignature in_range{"time-in-range", {ValueType::Time, ValueType::String, ValueType::String},
                               std::nullopt, 0, ValueType::Boolean, {}};
    in_range.impl = [](Args a) -> EvalResult {
        const auto* t = std::get_if<Timestamp>(&a[0]);
        const auto* s = std::get_if<std::string>(&a[1]);
        const auto* e = std::get_if<std::string>(&a[2]);
        if (!t || !s || !e) return type_error("time-in-range", "expected (time, string, string)");
        const auto start = parse_time_of_day(*s);
        const auto end = parse_time_of_day(*e);
        if (!start || !end) return type_error("time-in-range", "malformed time of day");
        const auto secs = to_unix(*t) % 86400;
        const bool inside = *start <= *end ? (secs >= *start && secs < *end) : (secs >= *start || secs < *end);
        return AttributeValue{inside};
    };
    r.push_back(std::move(in_range));

    return r;
}

const std::vector<FunctionSignature>& registry() {
    static const std::vector<FunctionSignature> r = build_registry();
    return r;
}

}  // namespace

GeoPoint GeoPoint::make(double lat, double lon) {
    if (!(lat >= -90.0 && lat <= 90.0) || !(lon >= -180.0 && lon <= 180.0)) {
        throw std::invalid_argument("geo point out of range");
    }
    return GeoPoint{lat, lon};
}

ValueType type_of(const AttributeValue& v) {
    return std::visit(overloaded{
                          [](const std::string&) { return ValueType::String; },
                          [](double) { return ValueType::Double; },
                          [](std::int64_t) { return ValueType::Integer; },
                          [](bool) { return ValueType::Boolean; },
                          [](const GeoPoint&) { return ValueType::Geo; },
                          [](const Timestamp&) { return ValueType::Time; },
                      },
                      v);
}

std::string_view to_string(ValueType t) {
    switch (t) {
        case ValueType::String: return "string";
        case ValueType::Double: return "double";
        case ValueType::Integer: return "integer";
        case ValueType::Boolean: return "boolean";
        case ValueType::Geo: return "geo";
        case ValueType::Time: return "time";
    }
    return "unknown";
}

std::optional<ValueType> value_type_from_string(std::string_view s) {
    for (auto t : {ValueType::String, ValueType::Double, ValueType::Integer, ValueType::Boolean, ValueType::Geo,
                   ValueType::Time}) {
        if (to_string(t) == s) return t;
    }
    return std::nullopt;
}

std::string describe(const AttributeValue& v) {
    std::ostringstream os;
    std::visit(overloaded{
                   [&](const std::string& s) { os << '"' << s << '"'; },
                   [&](double d) { os << d; },
                   [&](std::int64_t i) { os << i; },
                   [&](bool b) { os << (b ? "true" : "false"); },
                   [&](const GeoPoint& g) { os << '(' << g.lat << ", " << g.lon << ')'; },
                   [&](const Timestamp& t) { os << "@" << to_unix(t); },
               },
               v);
    return os.str();
}

std::string_view to_string(Category c) {
    switch (c) {
        case Category::Subject: return "subject";
        case Category::Resource: return "resource";
        case Category::Action: return "action";
        case Category::Environment: return "environment";
    }
    return "unknown";
}

AttributeRef AttributeRef::parse(std::string_view path) {
    const auto dot = path.find('.');
    if (dot == std::string_view::npos || dot + 1 >= path.size()) {
        throw std::invalid_argument("attribute reference must be <category>.<key>: " + std::string(path));
    }
    const auto cat = path.substr(0, dot);
    for (auto c : {Category::Subject, Category::Resource, Category::Action, Category::Environment}) {
        if (to_string(c) == cat) return AttributeRef{c, std::string(path.substr(dot + 1))};
    }
    throw std::invalid_argument("unknown attribute category: " + std::string(cat));
}

std::string AttributeRef::path() const { return std::string(to_string(category)) + "." + key; }

std::string_view to_string(CombiningAlgorithm a) {
    switch (a) {
        case CombiningAlgorithm::DenyOverrides: return "deny-overrides";
        case CombiningAlgorithm::PermitOverrides: return "permit-overrides";
        case CombiningAlgorithm::FirstApplicable: return "first-applicable";
    }
    return "unknown";
}

std::optional<CombiningAlgorithm> combining_from_string(std::string_view s) {
    for (auto a : {CombiningAlgorithm::DenyOverrides, CombiningAlgorithm::PermitOverrides,
                   CombiningAlgorithm::FirstApplicable}) {
        if (to_string(a) == s) return a;
    }
    return std::nullopt;
}

std::string_view to_string(Decision d) {
    switch (d) {
        case Decision::Permit: return "Permit";
        case Decision::Deny: return "Deny";
        case Decision::Indeterminate: return "Indeterminate";
        case Decision::NotApplicable: return "NotApplicable";
    }
    return "unknown";
}

AttributeBag& RequestContext::bag(Category c) {
    return const_cast<AttributeBag&>(std::as_const(*this).bag(c));
}

const AttributeBag& RequestContext::bag(Category c) const {
    switch (c) {
        case Category::Subject: return subject;
        case Category::Resource: return resource;
        case Category::Action: return action;
        case Category::Environment: return environment;
    }
    return environment;
}

const AttributeValue* RequestContext::find(const AttributeRef& ref) const {
    const auto& b = bag(ref.category);
    const auto it = b.find(ref.key);
    return it == b.end() ? nullptr : &it->second;
}

bool FunctionSignature::accepts_arity(std::size_t n) const {
    if (!variadic) return n == params.size();
    return n >= params.size() + min_variadic;
}

std::optional<ValueType> FunctionSignature::param_type(std::size_t index) const {
    if (index < params.size()) return params[index];
    return variadic;
}

std::string FunctionSignature::arity_text() const {
    if (!variadic) return std::to_string(params.size());
    return "at least " + std::to_string(params.size() + min_variadic);
}

const FunctionSignature* find_function(std::string_view name) {
    const auto& r = registry();
    const auto it = std::find_if(r.begin(), r.end(), [&](const auto& f) { return f.name == name; });
    return it == r.end() ? nullptr : &*it;
}

std::vector<std::string_view> function_names() {
    std::vector<std::string_view> out;
    for (const auto& f : registry()) out.push_back(f.name);
    return out;
}

std::optional<int> parse_time_of_day(std::string_view text) {
    if (text.size() != 5 && text.size() != 8) return std::nullopt;
    const auto field = [&](std::size_t pos) -> std::optional<int> {
        int value = 0;
        auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + pos + 2, value);
        if (ec != std::errc{} || ptr != text.data() + pos + 2) return std::nullopt;
        return value;
    };
    if (text[2] != ':' || (text.size() == 8 && text[5] != ':')) return std::nullopt;
    const auto h = field(0);
    const auto m = field(3);
    const auto s = text.size() == 8 ? field(6) : std::optional<int>{0};
    if (!h || !m || !s || *m > 59 || *s > 59) return std::nullopt;
    const int total = *h * 3600 + *m * 60 + *s;
    if (total > 86400) return std::nullopt;
    return total;
}

double geo_distance_km(const GeoPoint& a, const GeoPoint& b) {
    constexpr double deg = std::numbers::pi / 180.0;
    const double phi1 = a.lat * deg;
    const double phi2 = b.lat * deg;
    const double dphi = (b.lat - a.lat) * deg;
    const double dlambda = (b.lon - a.lon) * deg;
    const double s1 = std::sin(dphi / 2.0);
    const double s2 = std::sin(dlambda / 2.0);
    double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
    h = std::clamp(h, 0.0, 1.0);
    return 2.0 * kEarthRadiusKm * std::atan2(std::sqrt(h), std::sqrt(1.0 - h));
}

EvalResult evaluate_expression(const Expression& expr, const RequestContext& ctx) {
    return std::visit(
        overloaded{
            [](const Literal& l) -> EvalResult { return l.value; },
            [&](const AttributeRef& ref) -> EvalResult {
                if (const auto* v = ctx.find(ref)) return *v;
                return Missing{Missing::Reason::Absent, ref.path()};
            },
            [&](const Apply& apply) -> EvalResult {
                const auto* fn = find_function(apply.function);
                if (fn == nullptr || !fn->accepts_arity(apply.args.size())) {
                    return type_error(apply.function, "not callable with these arguments");
                }
                std::vector<AttributeValue> values;
                values.reserve(apply.args.size());
                for (const auto& arg : apply.args) {
                    auto r = evaluate_expression(arg, ctx);
                    if (auto* m = std::get_if<Missing>(&r)) return std::move(*m);
                    values.push_back(std::get<AttributeValue>(std::move(r)));
                }
                return fn->impl(values);
            },
        },
        expr.node);
}

namespace {

// nullopt: Missing or non-boolean (Indeterminate).
std::optional<bool> truth(const Expression& expr, const RequestContext& ctx, Diagnostics* diag,
                          std::string_view where) {
    auto r = evaluate_expression(expr, ctx);
    if (const auto* m = std::get_if<Missing>(&r)) {
        if (diag && m->reason == Missing::Reason::TypeError) {
            diag->push_back(std::string(where) + ": runtime type error: " + m->detail);
        }
        return std::nullopt;
    }
    if (const auto* b = std::get_if<bool>(&std::get<AttributeValue>(r))) return *b;
    if (diag) diag->push_back(std::string(where) + ": runtime type error: expression is not boolean");
    return std::nullopt;
}

}  // namespace

Decision evaluate_rule(const Rule& rule, const RequestContext& ctx, Diagnostics* diag) {
    const Decision effect = rule.effect == Effect::Permit ? Decision::Permit : Decision::Deny;
    if (!rule.condition) return effect;
    const auto t = truth(*rule.condition, ctx, diag, "rule " + rule.id);
    if (!t) return Decision::Indeterminate;
    return *t ? effect : Decision::NotApplicable;
}

Decision combine(std::span<const Decision> decisions, CombiningAlgorithm alg) {
    const auto has = [&](Decision d) { return std::find(decisions.begin(), decisions.end(), d) != decisions.end(); };
    switch (alg) {
        case CombiningAlgorithm::DenyOverrides:
            if (has(Decision::Deny)) return Decision::Deny;
            if (has(Decision::Indeterminate)) return Decision::Indeterminate;
            if (has(Decision::Permit)) return Decision::Permit;
            return Decision::NotApplicable;
        case CombiningAlgorithm::PermitOverrides:
            if (has(Decision::Permit)) return Decision::Permit;
            if (has(Decision::Indeterminate)) return Decision::Indeterminate;
            if (has(Decision::Deny)) return Decision::Deny;
            return Decision::NotApplicable;
        case CombiningAlgorithm::FirstApplicable:
            for (auto d : decisions) {
                if (d != Decision::NotApplicable) return d;
            }
            return Decision::NotApplicable;
    }
    return Decision::Indeterminate;
}

Decision evaluate_policy(const Policy& policy, const RequestContext& ctx, Diagnostics* diag) {
    if (policy.target) {
        const auto t = truth(*policy.target, ctx, diag, "policy " + policy.id + " target");
        if (!t) return Decision::Indeterminate;
        if (!*t) return Decision::NotApplicable;
    }
    std::vector<Decision> decisions;
    decisions.reserve(policy.rules.size());
    for (const auto& rule : policy.rules) decisions.push_back(evaluate_rule(rule, ctx, diag));
    return combine(decisions, policy.combining);
}

Decision evaluate(const PolicySet& set, const RequestContext& ctx, Diagnostics* diag) {
    std::vector<Decision> decisions;
    decisions.reserve(set.policies.size());
    for (const auto& p : set.policies) decisions.push_back(evaluate_policy(p, ctx, diag));
    return combine(decisions, set.combining);
}

PolicyError::PolicyError(Code code, std::string message, std::string location)
    : std::runtime_error(std::string(to_string(code)) + " at " + location + ": " + message),
      code_(code),
      location_(std::move(location)) {}

std::string_view to_string(PolicyError::Code c) {
    switch (c) {
        case PolicyError::Code::SyntaxError: return "SyntaxError";
        case PolicyError::Code::UnknownFunction: return "UnknownFunction";
        case PolicyError::Code::ArityMismatch: return "ArityMismatch";
        case PolicyError::Code::TypeMismatch: return "TypeMismatch";
        case PolicyError::Code::DuplicateId: return "DuplicateId";
    }
    return "PolicyError";
}

}  // namespace ztiam::policy
