#pragma once

// Tumor Interaction Score, Cox risk models and survival statistics.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tseg/imaging.hpp"
#include "tseg/tensor.hpp"

namespace tseg {

struct SurvivalRecord {
  std::string patient_id;
  double time = 0.0;  // months
  int event = 0;      // 1 death, 0 censored
  double tis = 0.0;
  std::optional<double> risk;
};

using Cohort = std::vector<SurvivalRecord>;

void validate_cohort(const Cohort& cohort);

/// Tumor patches (pixel rectangles) and the pixel-level tumor mask S on the
/// same canvas (nonzero = tumor).
struct TISInput {
  int width = 0;
  int height = 0;
  std::vector<BBox> patches;
  std::vector<std::uint8_t> tumor_mask;
};

/// sum |P_i and S| / sum |P_i|.
double tis(const TISInput& input);

/// Breslow negative log partial likelihood (a sum over events).
double cox_negative_log_partial_likelihood(std::span<const double> times, std::span<const int> events,
                                           std::span<const double> risks);
/// Differentiable version: risks is an [n] tensor; the result is divided by
/// the number of events.
Tensor cox_loss(const Tensor& risks, std::span<const double> times, std::span<const int> events);

enum class RiskModelKind { Linear, Mlp };

struct RiskModel {
  RiskModelKind kind = RiskModelKind::Linear;
  double center = 0.0;  // TIS standardization
  double scale = 1.0;
  double beta = 0.0;    // linear coefficient on the standardized TIS
  std::vector<double> w1, b1, w2;  // 1 -> 8 tanh -> 1, no output bias
  int iterations = 0;
  double final_loss = 0.0;

  double operator()(double tis_value) const;
};

struct CoxFitOptions {
  RiskModelKind kind = RiskModelKind::Linear;
  std::uint64_t seed = 0;
  int max_iterations = 500;
  double tolerance = 1e-10;  // on the gradient norm
  int hidden = 8;
};

RiskModel cox_fit(const Cohort& cohort, const CoxFitOptions& options = {});

/// Harrell's concordance: pairs with t_i < t_j and event_i = 1 are
/// comparable; higher risk for i is concordant, equal risks count one half.
double c_index(std::span<const double> times, std::span<const int> events, std::span<const double> risks);
double c_index(const Cohort& cohort);

struct KMPoint {
  double time = 0.0;
  double survival = 1.0;
  int at_risk = 0;
  int events = 0;
  int censored = 0;  // censored at this time (leave after the step)
};

/// Product-limit estimate. The first point is (0, 1); one point per distinct
/// event time follows.
std::vector<KMPoint> km_curve(const Cohort& group);
double survival_at(const std::vector<KMPoint>& curve, double t);

struct LogRankResult {
  double chi_square = 0.0;
  double p = 1.0;
  double observed_a = 0.0;
  double expected_a = 0.0;
  double variance = 0.0;
};

LogRankResult logrank(const Cohort& a, const Cohort& b);

enum class StratifyBy { Risk, Tis };

/// Median split; values equal to the median go to the low group.
std::pair<Cohort, Cohort> stratify_median(const Cohort& cohort, StratifyBy by);

std::string cohort_to_csv(const Cohort& cohort);
Cohort parse_cohort_csv(const std::string& text);

/// Synthetic cohort where survival time increases with TIS plus noise, with
/// random censoring.
Cohort synthetic_cohort(std::size_t patients, std::uint64_t seed, double censor_fraction = 0.25);

}  // namespace tseg
