#pragma once

#include <json.hpp>

#include <initializer_list>
#include <string>
#include <string_view>

#include "sonic/error.hpp"
#include "sonic/sonar_model.hpp"

namespace sonic::detail {

using Json = nlohmann::json;

void reject_unknown_keys(const Json& obj, std::initializer_list<std::string_view> known,
                         std::string_view context);

Json intrinsics_to_json_value(const SonarIntrinsics& intr);
SonarIntrinsics intrinsics_from_json_value(const Json& j);

}  // namespace sonic::detail
