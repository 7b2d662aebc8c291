#include "nvsf/image.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace nvsf {

namespace {
constexpr char kMagic[8] = {'N', 'V', 'S', 'F', 'I', 'M', 'G', '1'};
}

void write_raster(const std::string& path, const Raster& raster) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("raster: cannot open " + path + " for writing");
  out.write(kMagic, 8);
  const uint32_t dims[3] = {static_cast<uint32_t>(raster.rows), static_cast<uint32_t>(raster.cols),
                            static_cast<uint32_t>(raster.channels)};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(raster.data.data()),
            static_cast<std::streamsize>(raster.data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("raster: write failed for " + path);
}

Raster read_raster(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("raster: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("raster: bad magic in " + path);
  uint32_t dims[3];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!in) throw std::runtime_error("raster: truncated header in " + path);
  Raster raster(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]));
  in.read(reinterpret_cast<char*>(raster.data.data()),
          static_cast<std::streamsize>(raster.data.size() * sizeof(float)));
  if (!in || in.gcount() != static_cast<std::streamsize>(raster.data.size() * sizeof(float)))
    throw std::runtime_error("raster: payload size mismatch in " + path);
  // Trailing bytes also count as a malformed payload.
  char probe;
  in.read(&probe, 1);
  if (!in.eof()) throw std::runtime_error("raster: payload size mismatch in " + path);
  return raster;
}

}  // namespace nvsf
