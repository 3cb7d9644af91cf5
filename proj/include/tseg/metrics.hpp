#pragma once

// Segmentation and comparison statistics.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tseg/imaging.hpp"

namespace tseg {

/// 2|A and B| / (|A| + |B|) over nonzero entries. Both empty gives 1, exactly
/// one empty gives 0.
double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

struct MulticlassDice {
  std::vector<int> classes;
  std::vector<double> per_class;
  double mean = 0.0;
};

MulticlassDice multiclass_dice(const RasterMask& pred, const RasterMask& gt, const std::vector<int>& classes);

struct CIResult {
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  std::size_t resamples = 0;
  std::uint64_t seed = 0;
};

/// Percentile bootstrap of the mean. Resample b draws from Rng(seed + b).
CIResult bootstrap_ci(std::span<const double> values, std::size_t resamples = 10000, double level = 0.95,
                      std::uint64_t seed = 0);

/// Linear-interpolation quantile of sorted data, q in [0, 1].
double quantile_sorted(std::span<const double> sorted, double q);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::string stars;        // "***", "**", "*" or "ns"
  bool zero_variance = false;  // differences constant but nonzero: t infinite, p = 0
};

/// Two-sided paired t-test on a - b.
TTestResult paired_ttest(std::span<const double> a, std::span<const double> b);
std::string significance_stars(double p);

/// Pearson correlation of mid-ranks.
double spearman(std::span<const double> x, std::span<const double> y);
std::vector<double> average_ranks(std::span<const double> values);

struct DiceRecord {
  std::string sample_id;
  std::string class_name;
  std::string organ;
  std::string category;
  double dice = 0.0;
};

struct GroupSummary {
  std::string key;
  std::size_t samples = 0;
  CIResult ci;
};

/// Groups by "organ" or "category". Within a group, records are first averaged
/// per sample id; the group mean and bootstrap interval are over those
/// per-sample values. Rows are ordered by key.
std::vector<GroupSummary> aggregate(const std::vector<DiceRecord>& records, const std::string& key,
                                    std::size_t resamples = 10000, std::uint64_t seed = 0);

std::string dice_records_to_csv(const std::vector<DiceRecord>& records);
std::vector<DiceRecord> parse_dice_csv(const std::string& text);

}  // namespace tseg
