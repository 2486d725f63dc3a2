// Policy document format: JSON with the field layout documented in docs/formats.md.

#include "ztiam/policy.hpp"
#include "ztiam/policy_json.hpp"

#include <set>

namespace ztiam::policy {

using nlohmann::json;
using Code = PolicyError::Code;

namespace {

std::string line_column(std::string_view doc, std::size_t byte) {
    std::size_t line = 1;
    std::size_t column = 1;
    const std::size_t end = std::min(byte > 0 ? byte - 1 : 0, doc.size());
    for (std::size_t i = 0; i < end; ++i) {
        if (doc[i] == '\n') {
            ++line;
            column = 1;
        } else {
            ++column;
        }
    }
    return "line " + std::to_string(line) + ", column " + std::to_string(column);
}

std::string child(const std::string& path, std::string_view key) { return path + "/" + std::string(key); }
std::string child(const std::string& path, std::size_t index) { return path + "/" + std::to_string(index); }
std::string at_path(const std::string& path) { return path.empty() ? std::string("/") : path; }

[[noreturn]] void fail(Code code, const std::string& path, std::string message) {
    throw PolicyError(code, std::move(message), at_path(path));
}

void expect_keys(const json& j, const std::string& path, std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) fail(Code::SyntaxError, path, "expected an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            fail(Code::SyntaxError, child(path, key), "unexpected field '" + key + "'");
        }
    }
}

const json& require(const json& j, const std::string& path, std::string_view key) {
    const auto it = j.find(key);
    if (it == j.end()) fail(Code::SyntaxError, path, "missing field '" + std::string(key) + "'");
    return *it;
}

std::string require_string(const json& j, const std::string& path, std::string_view key) {
    const auto& v = require(j, path, key);
    if (!v.is_string() || v.get_ref<const std::string&>().empty()) {
        fail(Code::SyntaxError, child(path, key), "expected a non-empty string");
    }
    return v.get<std::string>();
}

CombiningAlgorithm require_combining(const json& j, const std::string& path) {
    const auto name = require_string(j, path, "combining");
    const auto alg = combining_from_string(name);
    if (!alg) fail(Code::SyntaxError, child(path, "combining"), "unknown combining algorithm '" + name + "'");
    return *alg;
}

bool compatible(ValueType expected, ValueType actual) {
    return expected == actual || (expected == ValueType::Double && actual == ValueType::Integer);
}

struct Parsed {
    Expression expr;
    std::optional<ValueType> type;  // nullopt: only known at runtime (attribute reference)
};

Parsed parse_expression(const json& j, const std::string& path) {
    if (!j.is_object()) fail(Code::SyntaxError, path, "expected an expression object");

    if (j.contains("fn")) {
        expect_keys(j, path, {"fn", "args"});
        const auto name = require_string(j, path, "fn");
        const auto& args_json = require(j, path, "args");
        if (!args_json.is_array()) fail(Code::SyntaxError, child(path, "args"), "expected an array");

        const auto* fn = find_function(name);
        if (fn == nullptr) fail(Code::UnknownFunction, child(path, "fn"), "unknown function '" + name + "'");
        if (!fn->accepts_arity(args_json.size())) {
            fail(Code::ArityMismatch, child(path, "args"),
                 "function '" + name + "' takes " + fn->arity_text() + " argument(s), got " +
                     std::to_string(args_json.size()));
        }

        Apply apply{name, {}};
        const auto args_path = child(path, "args");
        for (std::size_t i = 0; i < args_json.size(); ++i) {
            auto arg = parse_expression(args_json[i], child(args_path, i));
            const auto expected = *fn->param_type(i);
            if (arg.type && !compatible(expected, *arg.type)) {
                fail(Code::TypeMismatch, child(args_path, i),
                     "function '" + name + "' argument " + std::to_string(i + 1) + " expects " +
                         std::string(to_string(expected)) + ", got " + std::string(to_string(*arg.type)));
            }
            apply.args.push_back(std::move(arg.expr));
        }
        if (name == "time-in-range") {
            for (std::size_t i = 1; i < apply.args.size(); ++i) {
                const auto* lit = std::get_if<Literal>(&apply.args[i].node);
                if (lit == nullptr) continue;
                if (!parse_time_of_day(std::get<std::string>(lit->value))) {
                    fail(Code::TypeMismatch, child(args_path, i), "time of day must be HH:MM or HH:MM:SS");
                }
            }
        }
        return {Expression{std::move(apply)}, fn->result};
    }

    if (j.contains("attr")) {
        expect_keys(j, path, {"attr"});
        const auto text = require_string(j, path, "attr");
        try {
            return {Expression{AttributeRef::parse(text)}, std::nullopt};
        } catch (const std::invalid_argument& e) {
            fail(Code::SyntaxError, child(path, "attr"), e.what());
        }
    }

    if (j.contains("value")) {
        expect_keys(j, path, {"value"});
        try {
            auto v = value_from_json(j.at("value"));
            const auto t = type_of(v);
            return {Expression::literal(std::move(v)), t};
        } catch (const std::invalid_argument& e) {
            fail(Code::SyntaxError, child(path, "value"), e.what());
        }
    }

    fail(Code::SyntaxError, path, "expression must have one of 'fn', 'attr', 'value'");
}

std::optional<Expression> parse_condition(const json& j, const std::string& path, std::string_view key) {
    const auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    const auto p = child(path, key);
    auto parsed = parse_expression(*it, p);
    if (parsed.type && *parsed.type != ValueType::Boolean) {
        fail(Code::TypeMismatch, p, std::string(key) + " must be boolean, got " + std::string(to_string(*parsed.type)));
    }
    return std::move(parsed.expr);
}

Rule parse_rule(const json& j, const std::string& path) {
    expect_keys(j, path, {"rule_id", "effect", "condition"});
    Rule rule;
    rule.id = require_string(j, path, "rule_id");
    const auto effect = require_string(j, path, "effect");
    if (effect == "Permit") {
        rule.effect = Effect::Permit;
    } else if (effect == "Deny") {
        rule.effect = Effect::Deny;
    } else {
        fail(Code::SyntaxError, child(path, "effect"), "effect must be \"Permit\" or \"Deny\"");
    }
    rule.condition = parse_condition(j, path, "condition");
    return rule;
}

Policy parse_policy(const json& j, const std::string& path) {
    expect_keys(j, path, {"policy_id", "combining", "target", "rules"});
    Policy policy;
    policy.id = require_string(j, path, "policy_id");
    policy.combining = require_combining(j, path);
    policy.target = parse_condition(j, path, "target");

    const auto& rules = require(j, path, "rules");
    const auto rules_path = child(path, "rules");
    if (!rules.is_array() || rules.empty()) fail(Code::SyntaxError, rules_path, "expected a non-empty array");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < rules.size(); ++i) {
        auto rule = parse_rule(rules[i], child(rules_path, i));
        if (!ids.insert(rule.id).second) {
            fail(Code::DuplicateId, child(child(rules_path, i), "rule_id"), "duplicate rule_id '" + rule.id + "'");
        }
        policy.rules.push_back(std::move(rule));
    }
    return policy;
}

std::int64_t require_int(const json& j) {
    if (!j.is_number_integer()) throw std::invalid_argument("expected an integer");
    return j.get<std::int64_t>();
}

double require_number(const json& j) {
    if (!j.is_number()) throw std::invalid_argument("expected a number");
    return j.get<double>();
}

GeoPoint geo_from_json(const json& j) {
    if (!j.is_array() || j.size() != 2) throw std::invalid_argument("geo value must be [lat, lon]");
    return GeoPoint::make(require_number(j[0]), require_number(j[1]));
}

Timestamp time_from_json(const json& j) {
    const auto s = require_int(j);
    if (s < 0) throw std::invalid_argument("timestamp must be non-negative");
    return from_unix(s);
}

}  // namespace

json value_to_json(const AttributeValue& v) {
    json out = json::object();
    out["type"] = std::string(to_string(type_of(v)));
    std::visit(
        [&](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, GeoPoint>) {
                out["v"] = json::array({x.lat, x.lon});
            } else if constexpr (std::is_same_v<T, Timestamp>) {
                out["v"] = to_unix(x);
            } else {
                out["v"] = x;
            }
        },
        v);
    return out;
}

AttributeValue value_from_json(const json& j) {
    if (!j.is_object() || !j.contains("type") || !j.contains("v") || j.size() != 2) {
        throw std::invalid_argument("value must be {\"type\": ..., \"v\": ...}");
    }
    if (!j["type"].is_string()) throw std::invalid_argument("value type must be a string");
    const auto type = value_type_from_string(j["type"].get<std::string>());
    if (!type) throw std::invalid_argument("unknown value type '" + j["type"].get<std::string>() + "'");
    const auto& v = j["v"];
    switch (*type) {
        case ValueType::String:
            if (!v.is_string()) throw std::invalid_argument("expected a string");
            return v.get<std::string>();
        case ValueType::Double: return require_number(v);
        case ValueType::Integer: return require_int(v);
        case ValueType::Boolean:
            if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
            return v.get<bool>();
        case ValueType::Geo: return geo_from_json(v);
        case ValueType::Time: return time_from_json(v);
    }
    throw std::invalid_argument("unreachable value type");
}

AttributeValue loose_value_from_json(const json& j) {
    if (j.is_object()) return value_from_json(j);
    if (j.is_string()) return j.get<std::string>();
    if (j.is_boolean()) return j.get<bool>();
    if (j.is_number_integer()) return j.get<std::int64_t>();
    if (j.is_number_float()) return j.get<double>();
    if (j.is_array()) return geo_from_json(j);
    throw std::invalid_argument("unsupported attribute value");
}

AttributeBag bag_from_json(const json& j) {
    AttributeBag bag;
    if (j.is_null()) return bag;
    if (!j.is_object()) throw std::invalid_argument("attribute bag must be an object");
    for (const auto& [key, value] : j.items()) {
        if (key.empty()) throw std::invalid_argument("attribute key must be non-empty");
        try {
            bag.emplace(key, loose_value_from_json(value));
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument(key + ": " + e.what());
        }
    }
    return bag;
}

json bag_to_json(const AttributeBag& bag) {
    json out = json::object();
    for (const auto& [k, v] : bag) out[k] = value_to_json(v);
    return out;
}

RequestContext context_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("context must be an object");
    for (const auto& [key, _] : j.items()) {
        if (key != "subject" && key != "resource" && key != "action" && key != "environment") {
            throw std::invalid_argument("unknown context category '" + key + "'");
        }
    }
    RequestContext ctx;
    for (auto c : {Category::Subject, Category::Resource, Category::Action, Category::Environment}) {
        const auto name = std::string(to_string(c));
        if (j.contains(name)) ctx.bag(c) = bag_from_json(j.at(name));
    }
    return ctx;
}

json context_to_json(const RequestContext& ctx) {
    json out = json::object();
    for (auto c : {Category::Subject, Category::Resource, Category::Action, Category::Environment}) {
        out[std::string(to_string(c))] = bag_to_json(ctx.bag(c));
    }
    return out;
}

json expression_to_json(const Expression& e) {
    return std::visit(
        [](const auto& node) -> json {
            using T = std::decay_t<decltype(node)>;
            if constexpr (std::is_same_v<T, Literal>) {
                return json{{"value", value_to_json(node.value)}};
            } else if constexpr (std::is_same_v<T, AttributeRef>) {
                return json{{"attr", node.path()}};
            } else {
                json args = json::array();
                for (const auto& a : node.args) args.push_back(expression_to_json(a));
                return json{{"fn", node.function}, {"args", std::move(args)}};
            }
        },
        e.node);
}

PolicySet parse_policy_set(std::string_view document) {
    json doc;
    try {
        doc = json::parse(document);
    } catch (const json::parse_error& e) {
        throw PolicyError(Code::SyntaxError, e.what(), line_column(document, e.byte));
    }

    const std::string root;
    expect_keys(doc, root, {"policy_set_id", "version", "combining", "policies"});
    PolicySet set;
    set.id = require_string(doc, root, "policy_set_id");
    set.combining = require_combining(doc, root);
    if (doc.contains("version")) {
        const auto& v = doc["version"];
        if (!v.is_number_unsigned()) fail(Code::SyntaxError, "/version", "expected a non-negative integer");
        set.version = v.get<std::uint64_t>();
    }

    const auto& policies = require(doc, root, "policies");
    if (!policies.is_array()) fail(Code::SyntaxError, "/policies", "expected an array");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < policies.size(); ++i) {
        const auto path = child(std::string("/policies"), i);
        auto p = parse_policy(policies[i], path);
        if (!ids.insert(p.id).second) {
            fail(Code::DuplicateId, child(path, "policy_id"), "duplicate policy_id '" + p.id + "'");
        }
        set.policies.push_back(std::move(p));
    }
    return set;
}

std::string serialize_policy_set(const PolicySet& set) {
    using ordered = nlohmann::ordered_json;
    const auto expr = [](const std::optional<Expression>& e) -> ordered {
        return e ? ordered::parse(expression_to_json(*e).dump()) : ordered(nullptr);
    };
    ordered policies = ordered::array();
    for (const auto& p : set.policies) {
        ordered rules = ordered::array();
        for (const auto& r : p.rules) {
            ordered rule;
            rule["rule_id"] = r.id;
            rule["effect"] = r.effect == Effect::Permit ? "Permit" : "Deny";
            rule["condition"] = expr(r.condition);
            rules.push_back(std::move(rule));
        }
        ordered policy;
        policy["policy_id"] = p.id;
        policy["combining"] = std::string(to_string(p.combining));
        policy["target"] = expr(p.target);
        policy["rules"] = std::move(rules);
        policies.push_back(std::move(policy));
    }
    ordered doc;
    doc["policy_set_id"] = set.id;
    doc["version"] = set.version;
    doc["combining"] = std::string(to_string(set.combining));
    doc["policies"] = std::move(policies);
    return doc.dump(2) + "\n";
}

}  // namespace ztiam::policy
