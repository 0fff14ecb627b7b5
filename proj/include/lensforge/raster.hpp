#pragma once

// F32R raster format.
//
//   offset  size  field
//   0       4     magic "F32R"
//   4       4     u32 version (1)
//   8       4     u32 width
//   12      4     u32 height
//   16      4     u32 channels (1 scalar, 2 vector, 3 photometry stack)
//   20      8     f64 field of view, arcsec
//   28      4     u32 quantity tag
//   32      ...   width*height*channels float32, row-major, channels fastest
//
// All integers and floats little-endian.

#include <filesystem>
#include <variant>

#include "lensforge/grid.hpp"
#include "lensforge/io.hpp"

namespace lensforge {

inline constexpr std::uint32_t kRasterVersion = 1;
inline constexpr std::size_t kRasterHeaderBytes = 32;

using RasterField = std::variant<ScalarField, VectorField, PhotometryStack>;

namespace detail {

inline void put_raster_header(io::Bytes &out, const AngularGrid &g, std::uint32_t channels,
                              Quantity q) {
  out.insert(out.end(), {'F', '3', '2', 'R'});
  io::put_le<std::uint32_t>(out, kRasterVersion);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(g.n_pix()));
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(g.n_pix()));
  io::put_le<std::uint32_t>(out, channels);
  io::put_le<double>(out, g.fov());
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(q));
}

inline io::Bytes encode_planes(const AngularGrid &g, Quantity q,
                               std::initializer_list<const std::vector<double> *> planes) {
  io::Bytes out;
  out.reserve(kRasterHeaderBytes + g.size() * planes.size() * 4);
  put_raster_header(out, g, static_cast<std::uint32_t>(planes.size()), q);
  for (std::size_t i = 0; i < g.size(); ++i)
    for (const auto *p : planes) io::put_le<float>(out, static_cast<float>((*p)[i]));
  return out;
}

} // namespace detail

inline io::Bytes encode_raster(const ScalarField &f) {
  return detail::encode_planes(f.grid(), f.quantity(), {&f.data()});
}
inline io::Bytes encode_raster(const VectorField &f) {
  return detail::encode_planes(f.grid(), f.quantity(), {&f.c1(), &f.c2()});
}
inline io::Bytes encode_raster(const PhotometryStack &p) {
  return detail::encode_planes(p.grid(), Quantity::photometry,
                               {&p.band(Band::f125).data(), &p.band(Band::f606).data(),
                                &p.band(Band::f814).data()});
}
inline io::Bytes encode_raster(const RasterField &f) {
  return std::visit([](const auto &x) { return encode_raster(x); }, f);
}

inline RasterField decode_raster(const io::Bytes &bytes) {
  io::Reader r(bytes);
  r.expect_bytes("F32R", 4, "raster magic");
  const auto version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kRasterVersion)
    throw FormatError("unsupported raster version " + std::to_string(version), version_at);
  const auto width_at = r.offset();
  const auto width = r.get<std::uint32_t>("width");
  const auto height = r.get<std::uint32_t>("height");
  if (width != height) throw FormatError("raster must be square", width_at);
  if (width < 2) throw FormatError("raster must have at least 2 pixels per side", width_at);
  const auto channels_at = r.offset();
  const auto channels = r.get<std::uint32_t>("channel count");
  if (channels < 1 || channels > 3)
    throw FormatError("invalid channel count " + std::to_string(channels), channels_at);
  const auto fov_at = r.offset();
  const auto fov = r.get<double>("field of view");
  if (!(fov > 0.0) || !std::isfinite(fov))
    throw FormatError("field of view must be positive", fov_at);
  const auto quantity = static_cast<Quantity>(r.get<std::uint32_t>("quantity tag"));

  const AngularGrid grid(width, fov);
  const std::size_t n = grid.size();
  if (r.remaining() != n * channels * 4) {
    throw FormatError("payload size " + std::to_string(r.remaining()) + " does not match " +
                          std::to_string(n * channels * 4) + " expected bytes",
                      r.offset() + std::min<std::size_t>(r.remaining(), n * channels * 4));
  }
  std::vector<std::vector<double>> planes(channels, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::uint32_t c = 0; c < channels; ++c) planes[c][i] = r.get<float>("payload");

  switch (channels) {
  case 1: return ScalarField(grid, quantity, std::move(planes[0]));
  case 2: return VectorField(grid, quantity, std::move(planes[0]), std::move(planes[1]));
  default:
    return PhotometryStack(ScalarField(grid, Quantity::photometry, std::move(planes[0])),
                           ScalarField(grid, Quantity::photometry, std::move(planes[1])),
                           ScalarField(grid, Quantity::photometry, std::move(planes[2])));
  }
}

inline void write_raster(const RasterField &field, const std::filesystem::path &path) {
  io::write_file_atomic(path, encode_raster(field));
}
inline void write_raster(const ScalarField &f, const std::filesystem::path &path) {
  io::write_file_atomic(path, encode_raster(f));
}
inline void write_raster(const VectorField &f, const std::filesystem::path &path) {
  io::write_file_atomic(path, encode_raster(f));
}
inline void write_raster(const PhotometryStack &f, const std::filesystem::path &path) {
  io::write_file_atomic(path, encode_raster(f));
}

/// Decoding failures surface as IoError naming the file.
inline RasterField read_raster(const std::filesystem::path &path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_raster(bytes);
  } catch (const FormatError &e) {
    throw IoError(std::string("malformed raster (") + e.what() + ")", path.string());
  }
}

namespace detail {
template <class T> T read_as(const std::filesystem::path &path, std::uint32_t channels) {
  auto field = read_raster(path);
  if (auto *p = std::get_if<T>(&field)) return std::move(*p);
  throw FormatError(path.string() + ": expected a " + std::to_string(channels) +
                        "-channel raster",
                    16);
}
} // namespace detail

inline ScalarField read_scalar_raster(const std::filesystem::path &path) {
  return detail::read_as<ScalarField>(path, 1);
}
inline VectorField read_vector_raster(const std::filesystem::path &path) {
  return detail::read_as<VectorField>(path, 2);
}
inline PhotometryStack read_photometry_raster(const std::filesystem::path &path) {
  return detail::read_as<PhotometryStack>(path, 3);
}

} // namespace lensforge
