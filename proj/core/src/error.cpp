#include "sonic/error.hpp"

namespace sonic {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::degenerate_point: return "degenerate point";
    case Errc::domain: return "domain error";
    case Errc::shape: return "shape error";
    case Errc::empty_contour: return "empty contour";
    case Errc::undefined_ratio: return "undefined ratio";
    case Errc::singular_system: return "singular system";
    case Errc::degenerate_geometry: return "degenerate geometry";
    case Errc::degenerate_batch: return "degenerate batch";
    case Errc::load: return "load error";
    case Errc::io: return "i/o error";
    case Errc::config: return "config error";
  }
  return "unknown";
}

}  // namespace sonic
