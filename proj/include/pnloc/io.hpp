// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/adaptation.hpp"
#include "pnloc/common.hpp"
#include "pnloc/geometry.hpp"
#include "pnloc/image.hpp"
#include "pnloc/localizer.hpp"
#include "pnloc/point_field.hpp"

#include <png.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace pnloc {

// Binary formats. All integers and floats are little-endian; floats are
// IEEE-754 binary32. Layouts are documented in docs/formats.md.
inline constexpr std::uint32_t kPointFieldVersion = 1;
inline constexpr std::uint32_t kModelVersion = 1;

namespace io {

using Bytes = std::vector<std::uint8_t>;

class Writer {
 public:
  void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void raw(const std::uint8_t* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  Bytes& bytes() { return bytes_; }

 private:
  Bytes bytes_;
};

class Reader {
 public:
  explicit Reader(const Bytes& bytes) : bytes_(bytes) {}

  void magic(std::string_view m) {
    need(m.size());
    if (std::memcmp(bytes_.data() + pos_, m.data(), m.size()) != 0) {
      throw Error(ErrorCode::BadMagic, "expected magic '" + std::string(m) + "'", pos_);
    }
    pos_ += m.size();
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  const std::uint8_t* raw(std::size_t n) {
    need(n);
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  /// Fails up front when a declared payload does not fit in the file.
  void expect_payload(std::uint64_t items, std::uint64_t item_bytes) {
    const std::uint64_t left = bytes_.size() - pos_;
    if (item_bytes != 0 && items > left / item_bytes) {
      throw Error(ErrorCode::TruncatedFile,
                  "declared payload of " + std::to_string(items) + " x " + std::to_string(item_bytes) +
                      " bytes exceeds the file",
                  bytes_.size());
    }
  }
  std::size_t position() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw Error(ErrorCode::TruncatedFile, "unexpected end of file", bytes_.size());
  }

  const Bytes& bytes_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

inline void check_dims(std::uint32_t w, std::uint32_t h, std::size_t offset) {
  if (w > (1u << 16) || h > (1u << 16)) {
    throw Error(ErrorCode::InvalidArgument, "image dimensions too large", offset);
  }
}

}  // namespace io

// ---------------------------------------------------------------- PNPF

inline io::Bytes encode_point_field(const PointField& field) {
  io::Writer w;
  w.magic("PNPF");
  w.u32(kPointFieldVersion);
  w.u64(field.size());
  w.u32(static_cast<std::uint32_t>(field.descriptor_dim()));
  w.u32(static_cast<std::uint32_t>(field.feature_dim()));
  for (std::size_t i = 0; i < field.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    for (int k = 0; k < 3; ++k) w.f32(field.positions()[i][k]);
    w.f32(field.confidences()[c]);
    w.f32(field.scores()[c]);
    for (Eigen::Index k = 0; k < field.descriptors().rows(); ++k) w.f32(field.descriptors()(k, c));
    for (Eigen::Index k = 0; k < field.features().rows(); ++k) w.f32(field.features()(k, c));
  }
  return std::move(w.bytes());
}

inline PointField decode_point_field(const io::Bytes& bytes) {
  io::Reader r(bytes);
  r.magic("PNPF");
  const std::size_t version_at = r.position();
  const auto version = r.u32();
  if (version != kPointFieldVersion) {
    throw Error(ErrorCode::VersionMismatch, "PNPF version " + std::to_string(version), version_at);
  }
  const auto n = r.u64();
  const auto fa = r.u32();
  const auto fr = r.u32();
  if (fa > 4096 || fr > 4096) throw Error(ErrorCode::InvalidArgument, "implausible PNPF dimensions", 16);
  r.expect_payload(n, 4ull * (5 + fa + fr));
  if (n == 0) throw Error(ErrorCode::EmptyCloud, "PNPF holds no points", r.position());
  std::vector<NeuralPoint> pts(n);
  for (auto& p : pts) {
    for (int k = 0; k < 3; ++k) p.position[k] = r.f32();
    p.confidence = r.f32();
    p.score = r.f32();
    p.descriptor.resize(fa);
    for (std::uint32_t k = 0; k < fa; ++k) p.descriptor[k] = r.f32();
    p.feature.resize(fr);
    for (std::uint32_t k = 0; k < fr; ++k) p.feature[k] = r.f32();
  }
  return build_field(pts);
}

// ---------------------------------------------------------------- PNDM

inline io::Bytes encode_descriptor_map(const DescriptorMap& map) {
  io::Writer w;
  w.magic("PNDM");
  w.u32(static_cast<std::uint32_t>(map.width()));
  w.u32(static_cast<std::uint32_t>(map.height()));
  w.u32(static_cast<std::uint32_t>(map.channels()));
  for (float v : map.data.data()) w.u32(std::bit_cast<std::uint32_t>(v));
  return std::move(w.bytes());
}

inline DescriptorMap decode_descriptor_map(const io::Bytes& bytes) {
  io::Reader r(bytes);
  r.magic("PNDM");
  const auto w = r.u32(), h = r.u32(), c = r.u32();
  io::check_dims(w, h, 4);
  if (c == 0 || c > 4096) throw Error(ErrorCode::InvalidArgument, "implausible PNDM channel count", 12);
  r.expect_payload(std::uint64_t{w} * h * c, 4);
  DescriptorMap map;
  map.data = ImageF(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  for (auto& v : map.data.data()) v = r.f32();
  return map;
}

// ---------------------------------------------------------------- PNDP

inline io::Bytes encode_depth(const ImageD& depth) {
  require(depth.channels() == 1, "depth maps have one channel");
  io::Writer w;
  w.magic("PNDP");
  w.u32(static_cast<std::uint32_t>(depth.width()));
  w.u32(static_cast<std::uint32_t>(depth.height()));
  for (double v : depth.data()) w.f32(v);
  return std::move(w.bytes());
}

inline ImageD decode_depth(const io::Bytes& bytes) {
  io::Reader r(bytes);
  r.magic("PNDP");
  const auto w = r.u32(), h = r.u32();
  io::check_dims(w, h, 4);
  r.expect_payload(std::uint64_t{w} * h, 4);
  ImageD depth(static_cast<int>(w), static_cast<int>(h), 1);
  for (auto& v : depth.data()) v = r.f32();
  return depth;
}

// ---------------------------------------------------------------- PNIM

/// Lossless f32 image, channel planes stored one after another.
inline io::Bytes encode_image(const ImageD& image) {
  io::Writer w;
  w.magic("PNIM");
  w.u32(static_cast<std::uint32_t>(image.width()));
  w.u32(static_cast<std::uint32_t>(image.height()));
  w.u32(static_cast<std::uint32_t>(image.channels()));
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x) w.f32(image.at(x, y, c));
  return std::move(w.bytes());
}

inline ImageD decode_image(const io::Bytes& bytes) {
  io::Reader r(bytes);
  r.magic("PNIM");
  const auto w = r.u32(), h = r.u32(), c = r.u32();
  io::check_dims(w, h, 4);
  if (c == 0 || c > 64) throw Error(ErrorCode::InvalidArgument, "implausible PNIM channel count", 12);
  r.expect_payload(std::uint64_t{w} * h * c, 4);
  ImageD image(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  for (int ch = 0; ch < image.channels(); ++ch)
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x) image.at(x, y, ch) = r.f32();
  return image;
}

// ---------------------------------------------------------------- PNMK

/// Binary mask, one byte per pixel: 0x00 or 0xFF. Any non-zero byte loads
/// as set.
inline io::Bytes encode_mask(const Mask& mask) {
  io::Writer w;
  w.magic("PNMK");
  w.u32(static_cast<std::uint32_t>(mask.width()));
  w.u32(static_cast<std::uint32_t>(mask.height()));
  for (auto v : mask.data()) w.bytes().push_back(v ? 0xFF : 0x00);
  return std::move(w.bytes());
}

inline Mask decode_mask(const io::Bytes& bytes) {
  io::Reader r(bytes);
  r.magic("PNMK");
  const auto w = r.u32(), h = r.u32();
  io::check_dims(w, h, 4);
  r.expect_payload(std::uint64_t{w} * h, 1);
  Mask mask(static_cast<int>(w), static_cast<int>(h), 1);
  const auto* p = r.raw(std::size_t{w} * h);
  for (std::size_t i = 0; i < mask.data().size(); ++i) mask.data()[i] = p[i] ? 1 : 0;
  return mask;
}

// ---------------------------------------------------------------- PNML

inline io::Bytes encode_model(const AdaptationModel& model) {
  const auto& layers = model.network().layers();
  io::Writer w;
  w.magic("PNML");
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(layers.size()));
  w.u32(static_cast<std::uint32_t>(layers.front().in_dim()));
  for (const auto& l : layers) w.u32(static_cast<std::uint32_t>(l.out_dim()));
  for (const auto& l : layers) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) w.f32(l.weights(r, c));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) w.f32(l.bias[r]);
  }
  for (int k = 0; k < 3; ++k) w.f32(model.normalizer().center[k]);
  w.f32(model.normalizer().scale);
  return std::move(w.bytes());
}

inline AdaptationModel decode_model(const io::Bytes& bytes) {
  io::Reader r(bytes);
  r.magic("PNML");
  const std::size_t version_at = r.position();
  const auto version = r.u32();
  if (version != kModelVersion) {
    throw Error(ErrorCode::VersionMismatch, "PNML version " + std::to_string(version), version_at);
  }
  const auto count = r.u32();
  if (count == 0 || count > 64) throw Error(ErrorCode::InvalidArgument, "implausible PNML layer count", 8);
  r.expect_payload(count + 1, 4);
  std::vector<std::uint32_t> dims(count + 1);
  for (auto& d : dims) {
    d = r.u32();
    if (d == 0 || d > 1u << 16) throw Error(ErrorCode::InvalidArgument, "implausible PNML layer width", r.position() - 4);
  }
  std::uint64_t params = 4;
  for (std::uint32_t l = 0; l < count; ++l) params += std::uint64_t{dims[l + 1]} * (dims[l] + 1);
  r.expect_payload(params, 4);
  std::vector<DenseLayer> layers;
  for (std::uint32_t l = 0; l < count; ++l) {
    DenseLayer layer{MatX(dims[l + 1], dims[l]), VecX(dims[l + 1])};
    for (Eigen::Index i = 0; i < layer.weights.rows(); ++i)
      for (Eigen::Index j = 0; j < layer.weights.cols(); ++j) layer.weights(i, j) = r.f32();
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = r.f32();
    layers.push_back(std::move(layer));
  }
  PositionNormalizer norm;
  for (int k = 0; k < 3; ++k) norm.center[k] = r.f32();
  norm.scale = r.f32();
  return AdaptationModel(AdaptationModel::Network(std::move(layers)), norm);
}

// ---------------------------------------------------------------- files

inline void save_point_field(const std::filesystem::path& p, const PointField& f) { io::write_file(p, encode_point_field(f)); }
inline PointField load_point_field(const std::filesystem::path& p) { return decode_point_field(io::read_file(p)); }
inline void save_descriptor_map(const std::filesystem::path& p, const DescriptorMap& m) { io::write_file(p, encode_descriptor_map(m)); }
inline DescriptorMap load_descriptor_map(const std::filesystem::path& p) { return decode_descriptor_map(io::read_file(p)); }
inline void save_depth(const std::filesystem::path& p, const ImageD& d) { io::write_file(p, encode_depth(d)); }
inline ImageD load_depth(const std::filesystem::path& p) { return decode_depth(io::read_file(p)); }
inline void save_image(const std::filesystem::path& p, const ImageD& i) { io::write_file(p, encode_image(i)); }
inline ImageD load_image(const std::filesystem::path& p) { return decode_image(io::read_file(p)); }
inline void save_mask(const std::filesystem::path& p, const Mask& m) { io::write_file(p, encode_mask(m)); }
inline Mask load_mask(const std::filesystem::path& p) { return decode_mask(io::read_file(p)); }
inline void save_model(const std::filesystem::path& p, const AdaptationModel& m) { io::write_file(p, encode_model(m)); }
inline AdaptationModel load_model(const std::filesystem::path& p) { return decode_model(io::read_file(p)); }

// ---------------------------------------------------------------- PNG

/// 8-bit RGB (3 channels) or grayscale (1 channel); values clamped to [0, 1].
inline void save_png(const std::filesystem::path& path, const ImageD& image) {
  require(image.channels() == 1 || image.channels() == 3, "PNG export needs 1 or 3 channels");
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width());
  png.height = static_cast<png_uint_32>(image.height());
  png.format = image.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(image.data().size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data()[i], 0.0, 1.0) * 255.0));
  }
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw Error(ErrorCode::IoError, "PNG write failed for " + path.string() + ": " + png.message);
  }
}

/// Loads any PNG as RGB in [0, 1].
inline ImageD load_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw Error(ErrorCode::IoError, "PNG read failed for " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&png);
    throw Error(ErrorCode::IoError, "PNG decode failed for " + path.string() + ": " + png.message);
  }
  ImageD out(static_cast<int>(png.width), static_cast<int>(png.height), 3);
  for (std::size_t i = 0; i < buf.size(); ++i) out.data()[i] = buf[i] / 255.0;
  return out;
}

// ---------------------------------------------------------------- text

/// One line: qw qx qy qz tx ty tz (world-to-camera, w >= 0).
inline std::string format_pose(const Pose& pose) {
  const auto q = pose.quaternion();
  std::ostringstream os;
  os << std::setprecision(17) << q.w() << ' ' << q.x() << ' ' << q.y() << ' ' << q.z() << ' '
     << pose.translation.x() << ' ' << pose.translation.y() << ' ' << pose.translation.z();
  return os.str();
}

inline Pose parse_pose(std::string_view line) {
  std::istringstream is{std::string(line)};
  double v[7];
  for (double& x : v) {
    if (!(is >> x)) throw Error(ErrorCode::InvalidArgument, "pose line needs 7 numbers: '" + std::string(line) + "'");
  }
  const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]);
  if (!(std::abs(norm - 1.0) < 1e-6)) throw Error(ErrorCode::InvalidArgument, "pose quaternion is not unit");
  return Pose::from_quaternion(v[0], v[1], v[2], v[3], Vec3(v[4], v[5], v[6]));
}

/// One line: fx fy cx cy width height.
inline std::string format_camera(const Camera& c) {
  std::ostringstream os;
  os << std::setprecision(17) << c.fx << ' ' << c.fy << ' ' << c.cx << ' ' << c.cy << ' ' << c.width << ' '
     << c.height;
  return os.str();
}

inline Camera parse_camera(std::string_view line) {
  std::istringstream is{std::string(line)};
  Camera c;
  if (!(is >> c.fx >> c.fy >> c.cx >> c.cy >> c.width >> c.height)) {
    throw Error(ErrorCode::InvalidArgument, "camera line needs fx fy cx cy width height");
  }
  c.validate();
  return c;
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto b = io::read_file(path);
  return std::string(b.begin(), b.end());
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  io::write_file(path, io::Bytes(text.begin(), text.end()));
}

inline void write_correspondences_csv(std::ostream& os, std::span<const Correspondence> corrs) {
  os << "query_x,query_y,world_x,world_y,world_z,similarity,keypoint,point_id\n";
  os << std::setprecision(17);
  for (const auto& c : corrs) {
    os << c.query_pixel.x() << ',' << c.query_pixel.y() << ',' << c.world_point.x() << ',' << c.world_point.y()
       << ',' << c.world_point.z() << ',' << c.similarity << ',' << c.keypoint << ',' << c.point_id << '\n';
  }
}

inline std::vector<Correspondence> read_correspondences_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("query_x,", 0) != 0) {
    throw Error(ErrorCode::InvalidArgument, "correspondence CSV header missing");
  }
  std::vector<Correspondence> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    Correspondence c;
    if (!(ls >> c.query_pixel.x() >> c.query_pixel.y() >> c.world_point.x() >> c.world_point.y() >>
          c.world_point.z() >> c.similarity >> c.keypoint >> c.point_id)) {
      throw Error(ErrorCode::InvalidArgument, "bad correspondence row: " + line);
    }
    out.push_back(c);
  }
  return out;
}

}  // namespace pnloc
