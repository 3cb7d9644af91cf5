#include "tseg/survival.hpp"

#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "tseg/error.hpp"
#include "tseg/rng.hpp"

namespace tseg {

void validate_cohort(const Cohort& cohort) {
  for (const auto& r : cohort) {
    if (!(r.time > 0.0) || !std::isfinite(r.time)) {
      fail(ErrorKind::Input, "patient " + r.patient_id + ": time must be positive and finite");
    }
    if (r.event != 0 && r.event != 1) fail(ErrorKind::Input, "patient " + r.patient_id + ": event must be 0 or 1");
    if (!(r.tis >= 0.0 && r.tis <= 1.0)) fail(ErrorKind::Input, "patient " + r.patient_id + ": TIS outside [0, 1]");
  }
}

double tis(const TISInput& input) {
  if (input.tumor_mask.size() != static_cast<std::size_t>(input.width) * input.height) {
    fail(ErrorKind::Dimension, "tis: tumor mask does not match the canvas");
  }
  for (std::size_t i = 0; i < input.patches.size(); ++i) {
    const BBox& p = input.patches[i];
    if (p.x_min < 0 || p.y_min < 0 || p.x_max >= input.width || p.y_max >= input.height || p.x_min > p.x_max ||
        p.y_min > p.y_max) {
      fail(ErrorKind::Geometry, "tis: patch " + std::to_string(i) + " lies outside the canvas");
    }
    for (std::size_t j = 0; j < i; ++j) {
      const BBox& q = input.patches[j];
      if (p.x_min <= q.x_max && q.x_min <= p.x_max && p.y_min <= q.y_max && q.y_min <= p.y_max) {
        fail(ErrorKind::Geometry, "tis: patches " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
      }
    }
  }
  std::size_t area = 0, hit = 0;
  for (const auto& p : input.patches) {
    for (int y = p.y_min; y <= p.y_max; ++y) {
      for (int x = p.x_min; x <= p.x_max; ++x) {
        ++area;
        hit += input.tumor_mask[static_cast<std::size_t>(y) * input.width + x] != 0;
      }
    }
  }
  if (area == 0) fail(ErrorKind::Undefined, "tis: no tumor patches");
  return static_cast<double>(hit) / static_cast<double>(area);
}

// ---------------------------------------------------------------------------
// Cox partial likelihood

namespace {

void check_arrays(std::size_t times, std::size_t events, std::size_t risks) {
  if (times != events || times != risks) fail(ErrorKind::Dimension, "cox: times, events and risks differ in length");
}

}  // namespace

double cox_negative_log_partial_likelihood(std::span<const double> times, std::span<const int> events,
                                           std::span<const double> risks) {
  check_arrays(times.size(), events.size(), risks.size());
  const double shift = risks.empty() ? 0.0 : *std::max_element(risks.begin(), risks.end());
  double total = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!events[i]) continue;
    double denom = 0.0;
    for (std::size_t j = 0; j < times.size(); ++j) {
      if (times[j] >= times[i]) denom += std::exp(risks[j] - shift);
    }
    total -= risks[i] - shift - std::log(denom);
  }
  if (!std::isfinite(total)) fail(ErrorKind::Numeric, "cox: partial likelihood is not finite");
  return total;
}

Tensor cox_loss(const Tensor& risks, std::span<const double> times, std::span<const int> events) {
  if (risks.rank() != 1) fail(ErrorKind::Dimension, "cox_loss: risks must be a vector");
  const std::size_t n = risks.numel();
  check_arrays(times.size(), events.size(), n);
  const int n_events = std::accumulate(events.begin(), events.end(), 0);
  if (n_events == 0) fail(ErrorKind::Fit, "cox_loss: no events");
  const auto r = risks.data();
  std::vector<double> rv(r.begin(), r.end());
  const double value = cox_negative_log_partial_likelihood(times, events, rv) / n_events;

  std::vector<double> t(times.begin(), times.end());
  std::vector<int> e(events.begin(), events.end());
  return make_op({}, {value}, {risks}, [risks, rv, t, e, n_events](const std::vector<double>& g) {
    auto* grad = grad_target(risks);
    if (!grad) return;
    const std::size_t n = rv.size();
    const double shift = *std::max_element(rv.begin(), rv.end());
    std::vector<double> w(n);
    for (std::size_t j = 0; j < n; ++j) w[j] = std::exp(rv[j] - shift);
    const double scale = g[0] / n_events;
    for (std::size_t i = 0; i < n; ++i) {
      if (!e[i]) continue;
      double denom = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (t[j] >= t[i]) denom += w[j];
      }
      (*grad)[i] -= scale;
      for (std::size_t j = 0; j < n; ++j) {
        if (t[j] >= t[i]) (*grad)[j] += scale * w[j] / denom;
      }
    }
  });
}

double RiskModel::operator()(double tis_value) const {
  const double z = (tis_value - center) / scale;
  if (kind == RiskModelKind::Linear) return beta * z;
  double out = 0.0;
  for (std::size_t h = 0; h < w1.size(); ++h) out += w2[h] * std::tanh(w1[h] * z + b1[h]);
  return out;
}

namespace {

std::vector<double> flatten_grads(const std::vector<Tensor>& params) {
  std::vector<double> g;
  for (const auto& p : params) {
    if (p.has_grad()) {
      g.insert(g.end(), p.grad().begin(), p.grad().end());
    } else {
      g.insert(g.end(), p.numel(), 0.0);
    }
  }
  return g;
}

void add_to_params(const std::vector<Tensor>& params, const std::vector<double>& base,
                   const std::vector<double>& direction, double step) {
  std::size_t k = 0;
  for (auto p : params) {
    for (double& v : p.mutable_data()) {
      v = base[k] + step * direction[k];
      ++k;
    }
  }
}

double gradient_norm2(const std::vector<Tensor>& params, const std::function<Tensor()>& risks,
                      std::span<const double> times, std::span<const int> events) {
  for (auto p : params) p.zero_grad();
  cox_loss(risks(), times, events).backward();
  double total = 0.0;
  for (double v : flatten_grads(params)) total += v * v;
  return total;
}

}  // namespace

RiskModel cox_fit(const Cohort& cohort, const CoxFitOptions& options) {
  validate_cohort(cohort);
  const std::size_t n = cohort.size();
  int n_events = 0;
  for (const auto& r : cohort) n_events += r.event;
  if (n_events == 0) fail(ErrorKind::Fit, "cox_fit: cohort has no events");
  if (n_events < 2) fail(ErrorKind::Fit, "cox_fit: need at least two events");

  RiskModel model;
  model.kind = options.kind;
  std::vector<double> times(n), z(n);
  std::vector<int> events(n);
  double mean = 0.0;
  for (const auto& r : cohort) mean += r.tis;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (const auto& r : cohort) var += (r.tis - mean) * (r.tis - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  model.center = mean;
  model.scale = sd > 0.0 ? sd : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    times[i] = cohort[i].time;
    events[i] = cohort[i].event;
    z[i] = (cohort[i].tis - model.center) / model.scale;
  }
  const Tensor x = Tensor::from({n, 1}, z);

  std::vector<Tensor> params;
  std::function<Tensor()> risks;
  if (options.kind == RiskModelKind::Linear) {
    params = {Tensor::zeros({1, 1}, true)};
    risks = [&] { return reshape(matmul(x, params[0]), {n}); };
  } else {
    Rng rng(options.seed);
    const auto h = static_cast<std::size_t>(options.hidden);
    std::vector<double> w1(h), b1(h), w2(h);
    for (auto& v : w1) v = rng.normal();
    for (auto& v : b1) v = rng.normal(0.0, 0.5);
    for (auto& v : w2) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(h)));
    params = {Tensor::from({1, h}, w1, true), Tensor::from({h}, b1, true), Tensor::from({h, 1}, w2, true)};
    risks = [&] { return reshape(matmul(tanh(linear(x, params[0], params[1])), params[2]), {n}); };
  }

  // Gradient descent with backtracking (Armijo) step control.
  double step = 1.0;
  double loss = 0.0;
  int it = 0;
  for (; it < options.max_iterations; ++it) {
    for (auto p : params) p.zero_grad();
    const Tensor l = cox_loss(risks(), times, events);
    loss = l.item();
    l.backward();
    const auto g = flatten_grads(params);
    double gnorm2 = 0.0;
    for (double v : g) gnorm2 += v * v;
    if (std::sqrt(gnorm2) < options.tolerance) break;
    std::vector<double> base;
    for (const auto& p : params) base.insert(base.end(), p.data().begin(), p.data().end());
    std::vector<double> dir(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) dir[k] = -g[k];
    step = std::min(step * 2.0, 1e3);
    bool accepted = false;
    for (int tries = 0; tries < 60; ++tries) {
      add_to_params(params, base, dir, step);
      double trial = 0.0;
      {
        NoGradGuard guard;
        trial = cox_loss(risks(), times, events).item();
      }
      if (std::isfinite(trial) && trial < loss - 1e-4 * step * gnorm2) {
        accepted = true;
        break;
      }
      // Near the optimum the loss stops resolving differences; fall back to
      // requiring a smaller gradient.
      if (std::isfinite(trial) && std::abs(trial - loss) <= 1e-12 * std::abs(loss) &&
          gradient_norm2(params, risks, times, events) < gnorm2) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      add_to_params(params, base, dir, 0.0);
      break;
    }
  }
  {
    NoGradGuard guard;
    loss = cox_loss(risks(), times, events).item();
  }
  if (!std::isfinite(loss)) fail(ErrorKind::Numeric, "cox_fit: loss is not finite");
  model.iterations = it;
  model.final_loss = loss;
  if (options.kind == RiskModelKind::Linear) {
    model.beta = params[0].data()[0];
  } else {
    model.w1.assign(params[0].data().begin(), params[0].data().end());
    model.b1.assign(params[1].data().begin(), params[1].data().end());
    model.w2.assign(params[2].data().begin(), params[2].data().end());
  }
  return model;
}

// ---------------------------------------------------------------------------
// Concordance, Kaplan-Meier, log-rank

double c_index(std::span<const double> times, std::span<const int> events, std::span<const double> risks) {
  check_arrays(times.size(), events.size(), risks.size());
  double concordant = 0.0;
  std::size_t comparable = 0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!events[i]) continue;
    for (std::size_t j = 0; j < times.size(); ++j) {
      if (!(times[i] < times[j])) continue;
      ++comparable;
      if (risks[i] > risks[j]) {
        concordant += 1.0;
      } else if (risks[i] == risks[j]) {
        concordant += 0.5;
      }
    }
  }
  if (comparable == 0) fail(ErrorKind::Undefined, "c_index: no comparable pairs");
  return concordant / static_cast<double>(comparable);
}

double c_index(const Cohort& cohort) {
  std::vector<double> t, r;
  std::vector<int> e;
  for (const auto& p : cohort) {
    if (!p.risk) fail(ErrorKind::Input, "c_index: patient " + p.patient_id + " has no risk");
    t.push_back(p.time);
    e.push_back(p.event);
    r.push_back(*p.risk);
  }
  return c_index(t, e, r);
}

std::vector<KMPoint> km_curve(const Cohort& group) {
  if (group.empty()) fail(ErrorKind::Input, "km_curve: empty group");
  validate_cohort(group);
  std::vector<std::pair<double, int>> obs;
  for (const auto& r : group) obs.emplace_back(r.time, r.event);
  std::sort(obs.begin(), obs.end());
  std::vector<KMPoint> curve{{0.0, 1.0, static_cast<int>(obs.size()), 0, 0}};
  double s = 1.0;
  int at_risk = static_cast<int>(obs.size());
  for (std::size_t i = 0; i < obs.size();) {
    std::size_t j = i;
    int d = 0, c = 0;
    while (j < obs.size() && obs[j].first == obs[i].first) {
      (obs[j].second ? d : c) += 1;
      ++j;
    }
    if (d > 0) {
      s *= 1.0 - static_cast<double>(d) / at_risk;
      curve.push_back({obs[i].first, s, at_risk, d, c});
    } else {
      curve.back().censored += c;
    }
    at_risk -= d + c;
    i = j;
  }
  return curve;
}

double survival_at(const std::vector<KMPoint>& curve, double t) {
  double s = 1.0;
  for (const auto& p : curve) {
    if (p.time <= t) s = p.survival;
  }
  return s;
}

LogRankResult logrank(const Cohort& a, const Cohort& b) {
  if (a.empty() || b.empty()) fail(ErrorKind::Input, "logrank: both groups must be non-empty");
  validate_cohort(a);
  validate_cohort(b);
  std::set<double> event_times;
  for (const auto* g : {&a, &b})
    for (const auto& r : *g)
      if (r.event) event_times.insert(r.time);
  if (event_times.empty()) fail(ErrorKind::Input, "logrank: no events");

  LogRankResult out;
  for (double t : event_times) {
    double na = 0, nb = 0, da = 0, db = 0;
    for (const auto& r : a) {
      na += r.time >= t;
      da += r.time == t && r.event;
    }
    for (const auto& r : b) {
      nb += r.time >= t;
      db += r.time == t && r.event;
    }
    const double n = na + nb, d = da + db;
    out.observed_a += da;
    out.expected_a += d * na / n;
    if (n > 1) out.variance += d * (na / n) * (nb / n) * (n - d) / (n - 1);
  }
  if (out.variance <= 0.0) fail(ErrorKind::Undefined, "logrank: zero variance");
  const double diff = out.observed_a - out.expected_a;
  out.chi_square = diff * diff / out.variance;
  const boost::math::chi_squared dist(1.0);
  out.p = boost::math::cdf(boost::math::complement(dist, out.chi_square));
  return out;
}

std::pair<Cohort, Cohort> stratify_median(const Cohort& cohort, StratifyBy by) {
  if (cohort.size() < 2) fail(ErrorKind::Input, "stratify_median: need at least two patients");
  std::vector<double> values;
  for (const auto& r : cohort) {
    if (by == StratifyBy::Risk && !r.risk) fail(ErrorKind::Input, "stratify_median: patient " + r.patient_id + " has no risk");
    values.push_back(by == StratifyBy::Risk ? *r.risk : r.tis);
  }
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::pair<Cohort, Cohort> out;
  for (std::size_t i = 0; i < n; ++i) (values[i] <= median ? out.first : out.second).push_back(cohort[i]);
  return out;
}

// ---------------------------------------------------------------------------

std::string cohort_to_csv(const Cohort& cohort) {
  std::ostringstream out;
  out << std::setprecision(17);
  bool with_risk = !cohort.empty() && std::all_of(cohort.begin(), cohort.end(), [](const auto& r) { return r.risk.has_value(); });
  out << "patient_id,time_months,event,tis" << (with_risk ? ",risk" : "") << '\n';
  for (const auto& r : cohort) {
    out << r.patient_id << ',' << r.time << ',' << r.event << ',' << r.tis;
    if (with_risk) out << ',' << *r.risk;
    out << '\n';
  }
  return out.str();
}

namespace {

double parse_number(const std::string& field, int line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(field, &used);
    if (used == field.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::Input, "cohort CSV line " + std::to_string(line) + ": bad number '" + field + "'");
}

}  // namespace

Cohort parse_cohort_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Input, "cohort CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const bool with_risk = line == "patient_id,time_months,event,tis,risk";
  if (!with_risk && line != "patient_id,time_months,event,tis") {
    fail(ErrorKind::Input, "cohort CSV: unexpected header '" + line + "'");
  }
  Cohort out;
  int number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream row(line);
    std::string field;
    while (std::getline(row, field, ',')) f.push_back(field);
    if (f.size() != (with_risk ? 5u : 4u)) {
      fail(ErrorKind::Input, "cohort CSV line " + std::to_string(number) + ": wrong field count");
    }
    SurvivalRecord r;
    r.patient_id = f[0];
    r.time = parse_number(f[1], number);
    const double ev = parse_number(f[2], number);
    if (ev != 0.0 && ev != 1.0) fail(ErrorKind::Input, "cohort CSV line " + std::to_string(number) + ": event must be 0 or 1");
    r.event = static_cast<int>(ev);
    r.tis = parse_number(f[3], number);
    if (with_risk) r.risk = parse_number(f[4], number);
    out.push_back(std::move(r));
  }
  validate_cohort(out);
  return out;
}

Cohort synthetic_cohort(std::size_t patients, std::uint64_t seed, double censor_fraction) {
  Rng rng(seed);
  Cohort out;
  for (std::size_t i = 0; i < patients; ++i) {
    SurvivalRecord r;
    r.patient_id = "P" + std::to_string(1000 + i);
    r.tis = rng.uniform(0.3, 0.95);
    // Higher TIS, longer survival: log-time linear in TIS plus noise.
    const double log_time = 1.0 + 4.0 * r.tis + rng.normal(0.0, 0.5);
    r.time = std::exp(log_time);
    r.event = 1;
    if (rng.uniform() < censor_fraction) {
      r.time *= rng.uniform(0.3, 1.0);
      r.event = 0;
    }
    r.time = std::round(r.time * 100.0) / 100.0 + 0.01;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace tseg
