#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fundps/field.hpp"

namespace fundps {

/// ||pred - truth||_2 / ||truth||_2 over one channel.
double rel_l2(const Field& pred, const Field& truth, int channel);

/// Midpoint of the Darcy coefficient values {3, 12}.
inline constexpr double kDarcyThreshold = 7.5;

/// Fraction of points on which (pred > threshold) and (truth > threshold)
/// disagree. Single-channel fields only.
double binary_error(const Field& pred, const Field& truth, double threshold = kDarcyThreshold);

struct EvalRow {
  std::string id;
  std::vector<double> rel_l2;  // one entry per channel
  std::optional<double> binary_error;
};

struct EvalSummary {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
};

struct EvalResult {
  int channels = 0;
  std::vector<EvalRow> rows;

  void add(EvalRow row);
  EvalSummary rel_l2_summary(int channel) const;
  /// Empty when no row carries a binary error.
  std::optional<EvalSummary> binary_error_summary() const;

  /// Header `id,rel_l2_c0,...[,binary_error]`, one line per row, then `mean`
  /// and `std` lines.
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Scores every channel; `binary_channel` (if set) also gets the thresholded error.
EvalRow evaluate_sample(const std::string& id, const Field& pred, const Field& truth,
                        std::optional<int> binary_channel = std::nullopt, double threshold = kDarcyThreshold);

}  // namespace fundps
