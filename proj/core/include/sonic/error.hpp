#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sonic {

enum class Errc {
  degenerate_point,
  domain,
  shape,
  empty_contour,
  undefined_ratio,
  singular_system,
  degenerate_geometry,
  degenerate_batch,
  load,
  io,
  config,
};

std::string_view to_string(Errc code) noexcept;

/// Single exception type for the library; the code identifies the failure class.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace sonic
