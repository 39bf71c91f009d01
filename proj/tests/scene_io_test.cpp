// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pnloc/io.hpp"
#include "pnloc/scene.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "test_util.hpp"

namespace pnloc {
namespace {

namespace fs = std::filesystem;

const fs::path kData = PNLOC_TEST_DATA_DIR;

float f32(double v) { return static_cast<float>(v); }

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "pnloc_scene_io_test";
  fs::create_directories(dir);
  return dir / name;
}

SyntheticSceneConfig small_room(std::uint64_t seed = 3) {
  SyntheticSceneConfig c;
  c.point_count = 1500;
  c.seed = seed;
  c.query_count = 2;
  c.reference_count = 2;
  c.samples_per_ray = 96;
  c.camera = {28, 28, 15.5, 15.5, 32, 32};
  return c;
}

PointField random_field(std::uint64_t seed, std::size_t n, int fa, int fr) {
  CounterRng rng(seed);
  std::vector<NeuralPoint> pts(n);
  for (auto& p : pts) {
    p.position = Vec3(rng.normal(), rng.normal(), rng.normal()) * 3.0;
    p.descriptor = VecX(fa);
    for (int k = 0; k < fa; ++k) p.descriptor[k] = rng.normal();
    p.descriptor.normalize();
    p.feature = VecX(fr);
    for (int k = 0; k < fr; ++k) p.feature[k] = rng.normal();
    p.confidence = rng.uniform(0, 1);
    p.score = rng.uniform(0, 1);
  }
  return build_field(pts);
}

template <class F>
ErrorCode error_code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no pnloc::Error thrown";
  return ErrorCode::InvalidArgument;
}

// ---------------------------------------------------------------- scenes

TEST(GenerateScene, SameSeedIsByteIdentical) {
  const auto a = generate_scene(small_room());
  const auto b = generate_scene(small_room());
  EXPECT_EQ(encode_point_field(a.field), encode_point_field(b.field));
  ASSERT_EQ(a.queries.size(), b.queries.size());
  for (std::size_t q = 0; q < a.queries.size(); ++q) {
    EXPECT_EQ(a.queries[q].image, b.queries[q].image);
    EXPECT_EQ(a.queries[q].descriptors.data, b.queries[q].descriptors.data);
    EXPECT_EQ(format_pose(a.queries[q].gt_pose), format_pose(b.queries[q].gt_pose));
    EXPECT_EQ(a.queries[q].keypoint_points, b.queries[q].keypoint_points);
  }
  for (std::size_t r = 0; r < a.reference_poses.size(); ++r) {
    EXPECT_EQ(format_pose(a.reference_poses[r]), format_pose(b.reference_poses[r]));
  }
}

TEST(GenerateScene, DifferentSeedsDiffer) {
  const auto a = generate_scene(small_room(3));
  const auto b = generate_scene(small_room(4));
  EXPECT_NE(encode_point_field(a.field), encode_point_field(b.field));
  EXPECT_NE(a.queries[0].image, b.queries[0].image);
}

TEST(GenerateScene, QueriesRegenerateBitExactly) {
  const auto bundle = generate_scene(small_room());
  for (std::size_t q = 0; q < bundle.queries.size(); ++q) {
    EXPECT_EQ(rerender_query(bundle, q).color, bundle.queries[q].image) << "query " << q;
  }
}

TEST(GenerateScene, AllKindsAndSchemesBuild) {
  for (auto kind : {SceneKind::CheckerboardRoom, SceneKind::TexturedSpheres, SceneKind::RandomBlobs}) {
    for (auto scheme : {DescriptorScheme::PositionHash, DescriptorScheme::RandomOrthogonal}) {
      auto c = small_room();
      c.kind = kind;
      c.descriptors = scheme;
      c.query_count = 1;
      const auto bundle = generate_scene(c);
      EXPECT_GE(bundle.field.size(), 1000u) << to_string(kind);
      EXPECT_EQ(bundle.field.descriptor_dim(), kDefaultDescriptorDim);
      for (std::size_t i = 0; i < bundle.field.size(); ++i) {
        ASSERT_NEAR(bundle.field.descriptors().col(static_cast<Eigen::Index>(i)).norm(), 1.0, 1e-9);
      }
      EXPECT_GT(bundle.queries[0].keypoint_points.size(), 10u) << to_string(kind) << ' ' << to_string(scheme);
    }
  }
}

TEST(GenerateScene, DescriptorsAreDistinct) {
  for (auto scheme : {DescriptorScheme::PositionHash, DescriptorScheme::RandomOrthogonal}) {
    auto c = small_room();
    c.descriptors = scheme;
    c.query_count = 0;
    const auto bundle = generate_scene(c);
    const MatX& d = bundle.field.descriptors();
    // Exhaustive oracle over every distinct pair.
    const MatX sims = d.transpose() * d;
    std::size_t bad = 0, pairs = 0;
    for (Eigen::Index i = 0; i < sims.rows(); ++i)
      for (Eigen::Index j = i + 1; j < sims.cols(); ++j, ++pairs) bad += sims(i, j) >= 0.8;
    EXPECT_LE(static_cast<double>(bad) / static_cast<double>(pairs), 1e-3) << to_string(scheme);
  }
}

TEST(GenerateScene, RandomOrthogonalBlocksAreOrthonormal) {
  auto c = small_room();
  c.descriptors = DescriptorScheme::RandomOrthogonal;
  c.query_count = 0;
  const auto bundle = generate_scene(c);
  const MatX block = bundle.field.descriptors().leftCols(c.descriptor_dim);
  const MatX gram = block.transpose() * block;
  EXPECT_LT((gram - MatX::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GenerateScene, ExactDescriptorsMatchTheirGeneratingPoints) {
  auto c = small_room();
  c.descriptor_noise = 0;
  c.camera = {56, 56, 31.5, 31.5, 64, 64};
  const auto bundle = generate_scene(c);
  for (const auto& q : bundle.queries) {
    const auto kps = keypoints_from_map(q.descriptors, 1u << 20);
    ASSERT_EQ(kps.size(), q.keypoint_points.size());
    ASSERT_GE(kps.size(), 20u);
    MatchConfig mc;
    mc.score_threshold = 0;
    const auto result = match_features(kps, bundle.field, mc);
    EXPECT_EQ(result.matches.size(), kps.size());
    for (const auto& m : result.matches) {
      EXPECT_EQ(m.point_id, q.keypoint_points[m.keypoint]);
      EXPECT_GT(m.similarity, 1 - 1e-6);
    }
  }
}

TEST(GenerateScene, InteriorRoomViewsAreNearlyFullyCovered) {
  SyntheticSceneConfig c;  // 5k-point room, 64 x 64 queries
  c.seed = 0;
  c.query_count = 10;
  c.reference_count = 0;
  const auto bundle = generate_scene(c);
  std::size_t valid = 0, total = 0;
  double worst = 1;
  for (std::size_t q = 0; q < bundle.queries.size(); ++q) {
    const auto view = rerender_query(bundle, q);
    std::size_t v = 0;
    for (auto m : view.valid.data()) v += m != 0;
    valid += v;
    total += view.valid.data().size();
    worst = std::min(worst, static_cast<double>(v) / static_cast<double>(view.valid.data().size()));
  }
  EXPECT_GE(static_cast<double>(valid) / static_cast<double>(total), 0.95);
  EXPECT_GE(worst, 0.95);
}

TEST(GenerateScene, OpenFacesLeaveBlankPixels) {
  auto c = small_room();
  c.open_faces = kFaceCeiling | kFaceNorthY;
  c.query_count = 4;
  const auto bundle = generate_scene(c);
  std::size_t blank = 0, total = 0;
  for (std::size_t q = 0; q < bundle.queries.size(); ++q) {
    const auto view = rerender_query(bundle, q);
    for (auto m : view.valid.data()) blank += m == 0;
    total += view.valid.data().size();
  }
  EXPECT_GT(static_cast<double>(blank) / static_cast<double>(total), 0.05);
}

TEST(GenerateScene, RejectsInvalidConfig) {
  auto c = small_room();
  c.point_count = 99;
  EXPECT_EQ(error_code_of([&] { generate_scene(c); }), ErrorCode::InvalidArgument);
  c = small_room();
  c.descriptor_noise = -0.1;
  EXPECT_EQ(error_code_of([&] { generate_scene(c); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(error_code_of([] { parse_scene_kind("castle"); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(parse_descriptor_scheme("random-orthogonal"), DescriptorScheme::RandomOrthogonal);
}

// ---------------------------------------------------------------- binary round trips

TEST(PointFieldFile, RoundTripIsBitIdentical) {
  const auto field = random_field(11, 300, 16, 8);
  const auto bytes = encode_point_field(field);
  EXPECT_EQ(bytes.size(), 24u + 300u * 4u * (5 + 16 + 8));
  const auto loaded = decode_point_field(bytes);
  ASSERT_EQ(loaded.size(), field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(loaded.positions()[i][k], f32(field.positions()[i][k]));
    EXPECT_EQ(loaded.scores()[c], f32(field.scores()[c]));
    EXPECT_EQ(loaded.confidences()[c], f32(field.confidences()[c]));
    EXPECT_EQ(loaded.descriptors()(5, c), f32(field.descriptors()(5, c)));
    EXPECT_EQ(loaded.features()(7, c), f32(field.features()(7, c)));
  }
  EXPECT_EQ(encode_point_field(loaded), bytes);

  const auto path = temp_path("field.pnpf");
  save_point_field(path, loaded);
  EXPECT_EQ(encode_point_field(load_point_field(path)), bytes);
}

TEST(PointFieldFile, EveryTruncationIsReported) {
  const auto bytes = encode_point_field(random_field(12, 5, 4, 3));
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    io::Bytes cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(len));
    try {
      decode_point_field(cut);
      FAIL() << "length " << len << " decoded";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::TruncatedFile) << "length " << len;
      ASSERT_TRUE(e.offset().has_value());
      EXPECT_EQ(*e.offset(), len);
    }
  }
}

TEST(PointFieldFile, HeaderErrorsCarryOffsets) {
  auto bytes = encode_point_field(random_field(13, 5, 4, 3));
  auto bad = bytes;
  bad[1] = 'X';
  try {
    decode_point_field(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BadMagic);
    EXPECT_EQ(e.offset(), std::optional<std::uint64_t>(0));
  }
  bad = bytes;
  bad[4] = 2;
  try {
    decode_point_field(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VersionMismatch);
    EXPECT_EQ(e.offset(), std::optional<std::uint64_t>(4));
  }
}

TEST(PointFieldFile, HugeDeclaredCountFailsBeforeAllocating) {
  auto bytes = encode_point_field(random_field(14, 5, 4, 3));
  for (int i = 0; i < 8; ++i) bytes[8 + i] = 0xFF;  // count = 2^64 - 1
  EXPECT_EQ(error_code_of([&] { decode_point_field(bytes); }), ErrorCode::TruncatedFile);
}

TEST(DescriptorMapFile, RoundTripIsBitIdentical) {
  CounterRng rng(5);
  DescriptorMap map;
  map.data = ImageF(9, 7, 6);
  for (auto& v : map.data.data()) v = static_cast<float>(rng.normal());
  const auto bytes = encode_descriptor_map(map);
  EXPECT_EQ(bytes.size(), 16u + 9u * 7u * 6u * 4u);
  EXPECT_EQ(decode_descriptor_map(bytes).data, map.data);
  auto cut = bytes;
  cut.pop_back();
  EXPECT_EQ(error_code_of([&] { decode_descriptor_map(cut); }), ErrorCode::TruncatedFile);
}

TEST(DepthFile, RoundTripIsBitIdentical) {
  CounterRng rng(6);
  ImageD depth(5, 4, 1);
  for (auto& v : depth.data()) v = f32(rng.uniform(0, 10));
  const auto bytes = encode_depth(depth);
  EXPECT_EQ(decode_depth(bytes), depth);
  const auto path = temp_path("d.pndp");
  save_depth(path, depth);
  EXPECT_EQ(load_depth(path), depth);
}

TEST(ImageFile, RoundTripIsBitIdenticalAndPlanar) {
  ImageD image(3, 2, 3);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 3; ++x) image.at(x, y, c) = 100 * c + 10 * y + x + 0.5;
  const auto bytes = encode_image(image);
  // First plane is channel 0 in row-major order.
  io::Reader r(bytes);
  r.magic("PNIM");
  EXPECT_EQ(r.u32(), 3u);
  EXPECT_EQ(r.u32(), 2u);
  EXPECT_EQ(r.u32(), 3u);
  EXPECT_EQ(r.f32(), 0.5f);
  EXPECT_EQ(r.f32(), 1.5f);
  for (int i = 0; i < 4; ++i) r.f32();
  EXPECT_EQ(r.f32(), 100.5f);
  EXPECT_EQ(decode_image(bytes), image);
}

TEST(MaskFile, RoundTripAndNonZeroBytes) {
  Mask mask(4, 3, 1);
  for (std::size_t i = 0; i < mask.data().size(); ++i) mask.data()[i] = i % 3 == 0;
  auto bytes = encode_mask(mask);
  EXPECT_EQ(bytes[12], 0xFF);
  EXPECT_EQ(bytes[13], 0x00);
  EXPECT_EQ(decode_mask(bytes), mask);
  bytes[13] = 0x07;
  EXPECT_EQ(decode_mask(bytes).at(1, 0), 1);
}

TEST(ModelFile, RoundTripPreservesOutputs) {
  const AdaptationModel model(16, 8, 12, 99, {Vec3(0.25, -0.5, 1), 3.5});
  const auto bytes = encode_model(model);
  const auto loaded = decode_model(bytes);
  EXPECT_EQ(encode_model(loaded), bytes);
  ASSERT_EQ(loaded.network().layers().size(), 4u);
  EXPECT_EQ(loaded.network().layers()[2].weights(3, 4), f32(model.network().layers()[2].weights(3, 4)));
  CounterRng rng(1);
  VecX d(16);
  for (int k = 0; k < 16; ++k) d[k] = rng.normal();
  d.normalize();
  const auto a = adapt(model, d, Vec3(0.1, 0.2, 0.3));
  const auto b = adapt(loaded, d, Vec3(0.1, 0.2, 0.3));
  EXPECT_LT((a.feature - b.feature).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_NEAR(a.score, b.score, 1e-5);
}

TEST(ModelFile, TruncationAndImplausibleHeaders) {
  const auto bytes = encode_model(AdaptationModel(4, 3, 5, 1));
  for (std::size_t len = 0; len < bytes.size(); len += 7) {
    io::Bytes cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(len));
    EXPECT_EQ(error_code_of([&] { decode_model(cut); }), ErrorCode::TruncatedFile) << len;
  }
  auto bad = bytes;
  bad[8] = 0;  // zero layers
  EXPECT_EQ(error_code_of([&] { decode_model(bad); }), ErrorCode::InvalidArgument);
}

// ---------------------------------------------------------------- golden fixtures

TEST(GoldenFiles, PointField) {
  const auto bytes = io::read_file(kData / "golden_field.pnpf");
  const auto field = decode_point_field(bytes);
  ASSERT_EQ(field.size(), 2u);
  EXPECT_EQ(field.descriptor_dim(), 2);
  EXPECT_EQ(field.feature_dim(), 3);
  EXPECT_EQ(field.positions()[0], Vec3(0.5, -1.25, 2.0));
  EXPECT_EQ(field.positions()[1], Vec3(-3.0, 0.0, 1.5));
  EXPECT_EQ(field.confidences()[0], f32(0.9));
  EXPECT_EQ(field.scores()[1], 0.25);
  EXPECT_EQ(field.descriptors()(0, 0), f32(0.6));
  EXPECT_EQ(field.descriptors()(1, 0), f32(0.8));
  EXPECT_EQ(field.features()(2, 1), 4.0);
  EXPECT_EQ(field.features()(0, 0), f32(0.1));
  EXPECT_EQ(encode_point_field(field), bytes);
}

TEST(GoldenFiles, Model) {
  const auto bytes = io::read_file(kData / "golden_model.pnml");
  const auto model = decode_model(bytes);
  const auto& layers = model.network().layers();
  ASSERT_EQ(layers.size(), 2u);
  EXPECT_EQ(layers[0].weights.rows(), 2);
  EXPECT_EQ(layers[0].weights.cols(), 4);
  EXPECT_EQ(layers[0].weights(1, 0), 5.0);  // row-major: W[1][0] is the fifth value
  EXPECT_EQ(layers[0].bias[1], -0.5);
  EXPECT_EQ(layers[1].weights(1, 1), 0.25);
  EXPECT_EQ(layers[1].bias[1], -4.0);
  EXPECT_EQ(model.normalizer().center, Vec3(0, 1, -2));
  EXPECT_EQ(model.normalizer().scale, 4.0);
  EXPECT_EQ(encode_model(model), bytes);
}

TEST(GoldenFiles, DescriptorDepthAndMaskFixtures) {
  const auto map_bytes = io::read_file(kData / "golden_8x8.pndm");
  const auto map = decode_descriptor_map(map_bytes);
  ASSERT_EQ(map.width(), 8);
  ASSERT_EQ(map.height(), 8);
  ASSERT_EQ(map.channels(), 4);
  const auto depth = load_depth(kData / "golden_8x8.pndp");
  const auto mask = load_mask(kData / "golden_8x8.pnmk");
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      const bool on = (x + y) % 3 == 0;
      const double a = 0.1 * (x + 8 * y);
      EXPECT_EQ(map.data.at(x, y, 0), on ? f32(std::cos(a)) : 0.0f);
      EXPECT_EQ(map.data.at(x, y, 1), on ? f32(std::sin(a)) : 0.0f);
      EXPECT_EQ(map.data.at(x, y, 3), 0.0f);
      EXPECT_EQ(depth.at(x, y), 0.5 + 0.25 * x + 0.125 * y);
      EXPECT_EQ(mask.at(x, y), (x * y) % 2 ? 1 : 0);
    }
  }
  EXPECT_EQ(encode_descriptor_map(map), map_bytes);
  const auto kps = keypoints_from_map(map, 100);
  EXPECT_EQ(kps.size(), 21u);
  for (const auto& k : kps) EXPECT_NEAR(k.descriptor.norm(), 1.0, 1e-6);
}

// ---------------------------------------------------------------- text and PNG

TEST(TextFormats, PoseRoundTrip) {
  CounterRng rng(21);
  for (int i = 0; i < 50; ++i) {
    const Pose pose = testing::random_pose(rng, 3.1);
    const Pose back = parse_pose(format_pose(pose));
    EXPECT_LT(testing::max_abs_diff(back.rotation, pose.rotation), 1e-14);
    EXPECT_LT((back.translation - pose.translation).norm(), 1e-14);
  }
  EXPECT_EQ(error_code_of([] { parse_pose("1 0 0"); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(error_code_of([] { parse_pose("2 0 0 0 1 2 3"); }), ErrorCode::InvalidArgument);
  const Pose p = parse_pose("1 0 0 0 1.5 -2 3");
  EXPECT_EQ(p.rotation, Mat3::Identity());
  EXPECT_EQ(p.translation, Vec3(1.5, -2, 3));
}

TEST(TextFormats, CameraRoundTrip) {
  const Camera cam{112.5, 110, 63.5, 62.25, 128, 126};
  EXPECT_EQ(parse_camera(format_camera(cam)), cam);
  EXPECT_EQ(error_code_of([] { parse_camera("100 100 50"); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(error_code_of([] { parse_camera("100 100 500 50 100 100"); }), ErrorCode::InvalidArgument);
}

TEST(TextFormats, CorrespondenceCsvRoundTrip) {
  CounterRng rng(22);
  const auto corrs = testing::synthetic_correspondences(rng, testing::random_pose(rng), testing::test_camera(), 20);
  std::stringstream ss;
  write_correspondences_csv(ss, corrs);
  const auto back = read_correspondences_csv(ss);
  ASSERT_EQ(back.size(), corrs.size());
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    EXPECT_EQ(back[i].query_pixel, corrs[i].query_pixel);
    EXPECT_EQ(back[i].world_point, corrs[i].world_point);
    EXPECT_EQ(back[i].point_id, corrs[i].point_id);
  }
}

TEST(Png, RoundTripIsWithinQuantization) {
  CounterRng rng(23);
  ImageD image(13, 9, 3);
  for (auto& v : image.data()) v = rng.uniform(0, 1);
  const auto path = temp_path("img.png");
  save_png(path, image);
  const auto back = load_png(path);
  ASSERT_EQ(back.width(), 13);
  ASSERT_EQ(back.height(), 9);
  for (std::size_t i = 0; i < image.data().size(); ++i) {
    EXPECT_LE(std::abs(back.data()[i] - image.data()[i]), 0.5 / 255 + 1e-12);
  }
  EXPECT_EQ(error_code_of([] { load_png(temp_path("missing.png")); }), ErrorCode::IoError);
}

}  // namespace
}  // namespace pnloc
