#include "tseg/metrics.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "tseg/error.hpp"
#include "tseg/rng.hpp"

namespace tseg {

double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) {
    fail(ErrorKind::Dimension,
         "dice: masks have " + std::to_string(pred.size()) + " and " + std::to_string(gt.size()) + " pixels");
  }
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    a += p;
    b += g;
    both += p && g;
  }
  if (a == 0 && b == 0) return 1.0;
  if (a == 0 || b == 0) return 0.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

MulticlassDice multiclass_dice(const RasterMask& pred, const RasterMask& gt, const std::vector<int>& classes) {
  if (pred.width() != gt.width() || pred.height() != gt.height()) {
    fail(ErrorKind::Dimension, "multiclass_dice: mask sizes differ");
  }
  MulticlassDice out;
  out.classes = classes;
  for (int c : classes) {
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] == c, g = gt[i] == c;
      a += p;
      b += g;
      both += p && g;
    }
    double d = 1.0;
    if (a == 0 && b == 0) {
      d = 1.0;
    } else if (a == 0 || b == 0) {
      d = 0.0;
    } else {
      d = 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
    }
    out.per_class.push_back(d);
  }
  if (!classes.empty()) {
    out.mean = std::accumulate(out.per_class.begin(), out.per_class.end(), 0.0) / static_cast<double>(classes.size());
  }
  return out;
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) fail(ErrorKind::Input, "quantile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

CIResult bootstrap_ci(std::span<const double> values, std::size_t resamples, double level, std::uint64_t seed) {
  if (values.empty()) fail(ErrorKind::Input, "bootstrap_ci: no values");
  if (resamples == 0) fail(ErrorKind::Input, "bootstrap_ci: resample count must be positive");
  if (!(level > 0.0 && level < 1.0)) fail(ErrorKind::Input, "bootstrap_ci: level must lie in (0, 1)");
  const std::size_t n = values.size();
  CIResult out;
  out.resamples = resamples;
  out.seed = seed;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);

  std::vector<double> means(resamples);
  for (std::size_t b = 0; b < resamples; ++b) {
    Rng rng(seed + b);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += values[rng.index(n)];
    means[b] = total / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double alpha = (1.0 - level) / 2.0;
  out.lower = std::min(quantile_sorted(means, alpha), out.mean);
  out.upper = std::max(quantile_sorted(means, 1.0 - alpha), out.mean);
  return out;
}

std::string significance_stars(double p) {
  if (p < 1e-3) return "***";
  if (p < 1e-2) return "**";
  if (p < 0.05) return "*";
  return "ns";
}

TTestResult paired_ttest(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorKind::Dimension, "paired_ttest: samples differ in length");
  if (a.size() < 2) fail(ErrorKind::Input, "paired_ttest: need at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));

  TTestResult out;
  if (sd == 0.0) {
    if (mean == 0.0) fail(ErrorKind::Undefined, "paired_ttest: differences are all zero");
    out.t = mean > 0.0 ? INFINITY : -INFINITY;
    out.p = 0.0;
    out.zero_variance = true;
    out.stars = significance_stars(out.p);
    return out;
  }
  out.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  out.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t))));
  out.stars = significance_stars(out.p);
  return out;
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) fail(ErrorKind::Dimension, "spearman: inputs differ in length");
  if (x.size() < 2) fail(ErrorKind::Input, "spearman: need at least two points");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) fail(ErrorKind::Undefined, "spearman: constant input");
  return sxy / std::sqrt(sxx * syy);
}

std::vector<GroupSummary> aggregate(const std::vector<DiceRecord>& records, const std::string& key,
                                    std::size_t resamples, std::uint64_t seed) {
  if (key != "organ" && key != "category") fail(ErrorKind::Input, "aggregate: unknown key '" + key + "'");
  // group -> sample -> (sum, count)
  std::map<std::string, std::map<std::string, std::pair<double, int>>> groups;
  for (const auto& r : records) {
    const std::string& k = key == "organ" ? r.organ : r.category;
    if (k.empty()) fail(ErrorKind::Input, "aggregate: record " + r.sample_id + " has no " + key);
    auto& cell = groups[k][r.sample_id];
    cell.first += r.dice;
    cell.second += 1;
  }
  std::vector<GroupSummary> out;
  for (const auto& [k, samples] : groups) {
    std::vector<double> values;
    for (const auto& [id, cell] : samples) values.push_back(cell.first / cell.second);
    out.push_back({k, values.size(), bootstrap_ci(values, resamples, 0.95, seed)});
  }
  return out;
}

std::string dice_records_to_csv(const std::vector<DiceRecord>& records) {
  std::ostringstream out;
  out.precision(17);
  out << "sample_id,class,organ,category,dice\n";
  for (const auto& r : records) {
    out << r.sample_id << ',' << r.class_name << ',' << r.organ << ',' << r.category << ',' << r.dice << '\n';
  }
  return out.str();
}

std::vector<DiceRecord> parse_dice_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Input, "dice CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "sample_id,class,organ,category,dice") fail(ErrorKind::Input, "dice CSV: unexpected header '" + line + "'");
  std::vector<DiceRecord> out;
  int number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream row(line);
    std::string field;
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (line.back() == ',') fields.emplace_back();
    if (fields.size() != 5) fail(ErrorKind::Input, "dice CSV line " + std::to_string(number) + ": expected 5 fields");
    DiceRecord r{fields[0], fields[1], fields[2], fields[3], 0.0};
    try {
      std::size_t used = 0;
      r.dice = std::stod(fields[4], &used);
      if (used != fields[4].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      fail(ErrorKind::Input, "dice CSV line " + std::to_string(number) + ": bad dice value '" + fields[4] + "'");
    }
    if (!(r.dice >= 0.0 && r.dice <= 1.0)) {
      fail(ErrorKind::Input, "dice CSV line " + std::to_string(number) + ": dice outside [0, 1]");
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace tseg
