#include "sonic/image.hpp"

#include <fstream>
#include <string>

#include "binary_io.hpp"
#include "sonic/error.hpp"

namespace sonic {

void write_image(const std::filesystem::path& path, const PolarImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out.write("SNRI", 4);
  detail::put_u32(out, static_cast<std::uint32_t>(image.rows));
  detail::put_u32(out, static_cast<std::uint32_t>(image.cols));
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size() * sizeof(float)));
  if (!out) throw Error(Errc::io, "failed writing " + path.string());
}

PolarImage read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot read " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "SNRI")
    throw Error(Errc::load, path.string() + ": bad image magic");
  std::uint32_t rows = 0, cols = 0;
  if (!detail::get_u32(in, rows) || !detail::get_u32(in, cols))
    throw Error(Errc::load, path.string() + ": truncated image header");
  if (rows == 0 || cols == 0 || rows > 65536 || cols > 65536)
    throw Error(Errc::load, path.string() + ": implausible image size");
  PolarImage img(static_cast<int>(rows), static_cast<int>(cols));
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()),
               static_cast<std::streamsize>(img.pixels.size() * sizeof(float))))
    throw Error(Errc::load, path.string() + ": truncated image data");
  return img;
}

}  // namespace sonic
