// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pnloc {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

enum class ErrorCode {
  InvalidArgument,
  NonPositiveDepth,
  NearPiAmbiguity,
  OutOfBounds,
  EmptyCloud,
  NonFiniteCoordinate,
  AllFiltered,
  DimensionMismatch,
  DivergedLoss,
  NoMatches,
  DegenerateConfiguration,
  NoConsensus,
  BehindCamera,
  TooFewValid,
  NoContributingSamples,
  BadMagic,
  VersionMismatch,
  TruncatedFile,
  IoError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::NearPiAmbiguity: return "NearPiAmbiguity";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::NonFiniteCoordinate: return "NonFiniteCoordinate";
    case ErrorCode::AllFiltered: return "AllFiltered";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::NoMatches: return "NoMatches";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::NoConsensus: return "NoConsensus";
    case ErrorCode::BehindCamera: return "BehindCamera";
    case ErrorCode::TooFewValid: return "TooFewValid";
    case ErrorCode::NoContributingSamples: return "NoContributingSamples";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library. File-format errors carry the byte
/// offset at which decoding stopped.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what,
        std::optional<std::uint64_t> offset = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + what +
                           (offset ? " (at byte " + std::to_string(*offset) + ")" : "")),
        code_(code),
        offset_(offset) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::uint64_t> offset() const noexcept { return offset_; }

 private:
  ErrorCode code_;
  std::optional<std::uint64_t> offset_;
};

inline void require(bool condition, const std::string& what) {
  if (!condition) throw Error(ErrorCode::InvalidArgument, what);
}

inline bool all_finite(const Vec3& v) { return v.allFinite(); }

}  // namespace pnloc
