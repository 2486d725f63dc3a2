#pragma once

#include "ztiam/policy.hpp"

#include <nlohmann/json.hpp>

namespace ztiam::policy {

/// Typed encoding: {"type": "geo", "v": [lat, lon]}.
nlohmann::json value_to_json(const AttributeValue& v);
/// Throws std::invalid_argument on a malformed or out-of-range value.
AttributeValue value_from_json(const nlohmann::json& j);

/// Request-side encoding of one bag value. Accepts the typed form, or a bare
/// JSON scalar (string, integer, float, boolean) or a [lat, lon] pair.
AttributeValue loose_value_from_json(const nlohmann::json& j);

AttributeBag bag_from_json(const nlohmann::json& j);
nlohmann::json bag_to_json(const AttributeBag& bag);

/// {"subject": {...}, "resource": {...}, "action": {...}, "environment": {...}}; every bag optional.
RequestContext context_from_json(const nlohmann::json& j);
nlohmann::json context_to_json(const RequestContext& ctx);

nlohmann::json expression_to_json(const Expression& e);

}  // namespace ztiam::policy
