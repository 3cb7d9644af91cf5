#include "tseg/omics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tseg/error.hpp"
#include "tseg/log.hpp"
#include "tseg/rng.hpp"

namespace tseg {

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::size_t check_matrix(const Matrix& points, const char* what) {
  if (points.empty()) fail(ErrorKind::Input, std::string(what) + ": no points");
  const std::size_t d = points[0].size();
  if (d == 0) fail(ErrorKind::Input, std::string(what) + ": zero-length vectors");
  for (const auto& p : points) {
    if (p.size() != d) fail(ErrorKind::Dimension, std::string(what) + ": vectors differ in length");
    for (double v : p) {
      if (!std::isfinite(v)) fail(ErrorKind::Numeric, std::string(what) + ": non-finite value");
    }
  }
  return d;
}

int nearest(const std::vector<double>& p, const Matrix& centroids, double& best) {
  int arg = 0;
  best = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < centroids.size(); ++j) {
    const double d = sq_dist(p, centroids[j]);
    if (d < best) {
      best = d;
      arg = static_cast<int>(j);
    }
  }
  return arg;
}

Matrix plus_plus_seeds(const Matrix& points, int k, Rng& rng) {
  const std::size_t n = points.size();
  Matrix centroids{points[rng.index(n)]};
  std::vector<double> d2(n);
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest(points[i], centroids, d2[i]);
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.index(n);
    } else {
      // First point whose cumulative weight exceeds the draw; zero-weight
      // points (already chosen) can never be picked.
      const double target = rng.uniform() * total;
      double cumulative = 0.0;
      pick = n;
      for (std::size_t i = 0; i < n; ++i) {
        cumulative += d2[i];
        if (d2[i] > 0.0 && cumulative > target) {
          pick = i;
          break;
        }
      }
      if (pick == n) {
        for (pick = n - 1; d2[pick] == 0.0; --pick) {
        }
      }
    }
    centroids.push_back(points[pick]);
  }
  return centroids;
}

Matrix cluster_means(const Matrix& points, const std::vector<int>& assignments, int k, std::vector<int>& counts) {
  const std::size_t d = points[0].size();
  Matrix means(static_cast<std::size_t>(k), std::vector<double>(d, 0.0));
  counts.assign(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto c = static_cast<std::size_t>(assignments[i]);
    for (std::size_t j = 0; j < d; ++j) means[c][j] += points[i][j];
    ++counts[c];
  }
  for (std::size_t c = 0; c < means.size(); ++c) {
    for (double& v : means[c]) v /= std::max(1, counts[c]);
  }
  return means;
}

// Single-point transfers that strictly lower the objective (Hartigan's
// criterion). Lloyd fixed points can still admit such moves; afterwards every
// point also sits at its nearest centroid.
void hartigan_refine(const Matrix& points, int k, ClusterModel& m) {
  std::vector<int> counts;
  m.centroids = cluster_means(points, m.assignments, k, counts);
  for (int sweep = 0; sweep < 1000; ++sweep) {
    bool moved = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const int a = m.assignments[i];
      const int na = counts[static_cast<std::size_t>(a)];
      if (na <= 1) continue;
      const double remove = na / (na - 1.0) * sq_dist(points[i], m.centroids[static_cast<std::size_t>(a)]);
      int best = a;
      double best_delta = -1e-12 * (1.0 + remove);
      for (int b = 0; b < k; ++b) {
        if (b == a) continue;
        const int nb = counts[static_cast<std::size_t>(b)];
        const double delta = nb / (nb + 1.0) * sq_dist(points[i], m.centroids[static_cast<std::size_t>(b)]) - remove;
        if (delta < best_delta) {
          best_delta = delta;
          best = b;
        }
      }
      if (best != a) {
        m.assignments[i] = best;
        m.centroids = cluster_means(points, m.assignments, k, counts);
        moved = true;
      }
    }
    if (!moved) break;
    m.history.push_back(within_cluster_ss(points, m.assignments, k));
  }
}

ClusterModel lloyd(const Matrix& points, int k, Matrix centroids, int max_iterations) {
  const std::size_t n = points.size(), d = points[0].size();
  ClusterModel m;
  m.k = k;
  m.assignments.assign(n, -1);
  std::vector<double> dist(n);
  for (int it = 0; it < max_iterations; ++it) {
    bool changed = false;
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const int c = nearest(points[i], centroids, dist[i]);
      changed = changed || c != m.assignments[i];
      m.assignments[i] = c;
      objective += dist[i];
    }
    m.history.push_back(objective);
    m.iterations = it + 1;

    // Empty clusters take the point farthest from its own centroid.
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int c : m.assignments) ++counts[static_cast<std::size_t>(c)];
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[static_cast<std::size_t>(m.assignments[i])] > 1 && dist[i] > far_d) {
          far_d = dist[i];
          far = i;
        }
      }
      --counts[static_cast<std::size_t>(m.assignments[far])];
      m.assignments[far] = c;
      counts[static_cast<std::size_t>(c)] = 1;
      dist[far] = 0.0;
      changed = true;
    }

    Matrix next(static_cast<std::size_t>(k), std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      auto& row = next[static_cast<std::size_t>(m.assignments[i])];
      for (std::size_t j = 0; j < d; ++j) row[j] += points[i][j];
    }
    for (int c = 0; c < k; ++c) {
      for (double& v : next[static_cast<std::size_t>(c)]) v /= counts[static_cast<std::size_t>(c)];
    }
    centroids = std::move(next);
    if (!changed) break;
  }
  m.centroids = std::move(centroids);
  hartigan_refine(points, k, m);
  m.objective = within_cluster_ss(points, m.assignments, k);
  return m;
}

}  // namespace

double within_cluster_ss(const Matrix& points, const std::vector<int>& assignments, int k) {
  if (points.size() != assignments.size()) fail(ErrorKind::Dimension, "within_cluster_ss: size mismatch");
  const std::size_t d = points.empty() ? 0 : points[0].size();
  Matrix sums(static_cast<std::size_t>(k), std::vector<double>(d, 0.0));
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto c = static_cast<std::size_t>(assignments[i]);
    for (std::size_t j = 0; j < d; ++j) sums[c][j] += points[i][j];
    ++counts[c];
  }
  for (std::size_t c = 0; c < sums.size(); ++c) {
    if (counts[c] == 0) continue;
    for (double& v : sums[c]) v /= counts[c];
  }
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) total += sq_dist(points[i], sums[static_cast<std::size_t>(assignments[i])]);
  return total;
}

ClusterModel kmeans(const Matrix& points, int k, const KMeansOptions& options) {
  check_matrix(points, "kmeans");
  if (k < 1) fail(ErrorKind::Input, "kmeans: K must be positive");
  const std::set<std::vector<double>> distinct(points.begin(), points.end());
  if (static_cast<std::size_t>(k) > distinct.size()) {
    fail(ErrorKind::Input, "kmeans: K = " + std::to_string(k) + " exceeds the " + std::to_string(distinct.size()) +
                               " distinct points");
  }
  ClusterModel best;
  const int restarts = std::max(1, options.restarts);
  for (int r = 0; r < restarts; ++r) {
    Rng rng(options.seed * 1000003ULL + static_cast<std::uint64_t>(r));
    auto model = lloyd(points, k, plus_plus_seeds(points, k, rng), std::max(1, options.max_iterations));
    if (r == 0 || model.objective < best.objective) best = std::move(model);
  }
  return best;
}

std::vector<std::vector<std::size_t>> knn_graph(const std::vector<Point>& coords, int k_neighbors) {
  if (k_neighbors < 1) fail(ErrorKind::Graph, "knn_graph: k must be at least 1");
  const std::size_t n = coords.size();
  if (n < static_cast<std::size_t>(k_neighbors) + 1) {
    fail(ErrorKind::Graph, "knn_graph: " + std::to_string(n) + " points cannot have " + std::to_string(k_neighbors) +
                               " neighbours each");
  }
  std::vector<std::set<std::size_t>> adj(n);
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = coords[i].x - coords[j].x, dy = coords[i].y - coords[j].y;
      cand.emplace_back(dx * dx + dy * dy, j);
    }
    std::partial_sort(cand.begin(), cand.begin() + k_neighbors, cand.end());
    for (int m = 0; m < k_neighbors; ++m) {
      adj[i].insert(cand[static_cast<std::size_t>(m)].second);
      adj[cand[static_cast<std::size_t>(m)].second].insert(i);
    }
  }
  std::vector<std::vector<std::size_t>> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].assign(adj[i].begin(), adj[i].end());
  return out;
}

Matrix neighborhood_embed(const Matrix& features, const std::vector<Point>& coords, int hops, int k_neighbors) {
  const std::size_t d = check_matrix(features, "neighborhood_embed");
  if (features.size() != coords.size()) fail(ErrorKind::Dimension, "neighborhood_embed: features and coords differ");
  if (hops < 0) fail(ErrorKind::Input, "neighborhood_embed: hops must be non-negative");
  const auto graph = knn_graph(coords, k_neighbors);
  const std::size_t n = features.size();
  Matrix out(features);
  Matrix current(features);
  for (int l = 0; l < hops; ++l) {
    Matrix next(n, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j : graph[i]) {
        for (std::size_t c = 0; c < d; ++c) next[i][c] += current[j][c];
      }
      for (double& v : next[i]) v /= static_cast<double>(graph[i].size());
    }
    for (std::size_t i = 0; i < n; ++i) out[i].insert(out[i].end(), next[i].begin(), next[i].end());
    current = std::move(next);
  }
  return out;
}

// ---------------------------------------------------------------------------

int ClusterClassMap::class_index(int cluster) const {
  const auto it = cluster_to_class.find(cluster);
  if (it == cluster_to_class.end()) fail(ErrorKind::Input, "cluster " + std::to_string(cluster) + " has no class");
  if (it->second == "background") return 0;
  const auto pos = std::find(class_names.begin(), class_names.end(), it->second);
  return static_cast<int>(pos - class_names.begin()) + 1;
}

ClusterClassMap parse_cluster_map(const std::string& json_text) {
  ClusterClassMap out;
  std::set<std::string> names;
  try {
    const auto doc = nlohmann::json::parse(json_text);
    if (!doc.is_object()) fail(ErrorKind::Input, "cluster map must be a JSON object");
    for (const auto& [key, value] : doc.items()) {
      std::size_t used = 0;
      const int id = std::stoi(key, &used);
      if (used != key.size()) fail(ErrorKind::Input, "cluster map key '" + key + "' is not an integer");
      const auto name = value.get<std::string>();
      if (name.empty()) fail(ErrorKind::Input, "cluster map: empty class name");
      out.cluster_to_class[id] = name;
      if (name != "background") names.insert(name);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Input, std::string("malformed cluster map: ") + e.what());
  } catch (const std::logic_error&) {
    fail(ErrorKind::Input, "cluster map keys must be integers");
  }
  out.class_names.assign(names.begin(), names.end());
  return out;
}

RasterMask bins_to_mask(const std::vector<BinRecord>& bins, const std::vector<int>& clusters,
                        const ClusterClassMap& classes, int width, int height) {
  if (bins.size() != clusters.size()) fail(ErrorKind::Dimension, "bins_to_mask: one cluster label per bin required");
  if (width < 1 || height < 1) fail(ErrorKind::Input, "bins_to_mask: empty canvas");
  RasterMask mask(width, height);
  std::vector<int> owner(mask.size(), -1);
  int overlaps = 0;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const auto& bin = bins[b];
    if (!(bin.side > 0.0)) fail(ErrorKind::Input, "bins_to_mask: bin side must be positive");
    if (bin.x < 0 || bin.y < 0 || bin.x > width || bin.y > height) {
      fail(ErrorKind::Geometry, "bins_to_mask: bin " + std::to_string(b) + " center lies outside the canvas");
    }
    const int label = classes.class_index(clusters[b]);
    const double half = bin.side / 2.0;
    // Pixel centers x + 0.5 in [cx - half, cx + half).
    const int x0 = std::max(0, static_cast<int>(std::ceil(bin.x - half - 0.5)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(bin.x + half - 0.5)) - 1);
    const int y0 = std::max(0, static_cast<int>(std::ceil(bin.y - half - 0.5)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(bin.y + half - 0.5)) - 1);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        auto& o = owner[static_cast<std::size_t>(y) * width + x];
        if (o >= 0) ++overlaps;
        o = static_cast<int>(b);
        mask.set(x, y, label);
      }
    }
  }
  if (overlaps > 0) log_warning("bins_to_mask: " + std::to_string(overlaps) + " pixels covered by more than one bin");
  return mask;
}

RasterMask cells_to_mask(const std::vector<CellRecord>& cells, const std::vector<int>& clusters,
                         const ClusterClassMap& classes, int width, int height) {
  if (cells.size() != clusters.size()) fail(ErrorKind::Dimension, "cells_to_mask: one cluster label per cell required");
  std::vector<PolygonAnnotation> polys;
  polys.reserve(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const int label = classes.class_index(clusters[i]);
    polys.push_back({label, label == 0 ? "background" : classes.class_names[static_cast<std::size_t>(label - 1)],
                     cells[i].contour});
  }
  return rasterize_polygons(polys, width, height);
}

// ---------------------------------------------------------------------------

std::vector<BinRecord> parse_bins_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Input, "bins CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  {
    std::istringstream row(line);
    std::string f;
    while (std::getline(row, f, ',')) header.push_back(f);
  }
  if (header.size() < 4 || header[0] != "x" || header[1] != "y" || header[2] != "side_px") {
    fail(ErrorKind::Input, "bins CSV header must be x,y,side_px,f1..fd");
  }
  std::vector<BinRecord> out;
  int number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> values;
    std::istringstream row(line);
    std::string f;
    while (std::getline(row, f, ',')) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(f, &used));
        if (used != f.size()) throw std::invalid_argument(f);
      } catch (const std::exception&) {
        fail(ErrorKind::Input, "bins CSV line " + std::to_string(number) + ": bad number '" + f + "'");
      }
    }
    if (values.size() != header.size()) fail(ErrorKind::Input, "bins CSV line " + std::to_string(number) + ": wrong field count");
    out.push_back({values[0], values[1], values[2], std::vector<double>(values.begin() + 3, values.end())});
  }
  return out;
}

std::vector<CellRecord> parse_cells_json(const std::string& text) {
  std::vector<CellRecord> out;
  try {
    const auto doc = nlohmann::json::parse(text);
    if (!doc.is_array()) fail(ErrorKind::Input, "cells JSON must be an array");
    for (const auto& c : doc) {
      CellRecord cell;
      for (const auto& p : c.at("contour")) cell.contour.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      cell.features = c.at("features").get<std::vector<double>>();
      if (cell.contour.size() < 3) fail(ErrorKind::Annotation, "cell contour needs at least 3 vertices");
      double sx = 0.0, sy = 0.0;
      for (const auto& p : cell.contour) {
        sx += p.x;
        sy += p.y;
      }
      cell.centroid = {sx / static_cast<double>(cell.contour.size()), sy / static_cast<double>(cell.contour.size())};
      out.push_back(std::move(cell));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Input, std::string("malformed cells JSON: ") + e.what());
  }
  return out;
}

Matrix features_of(const std::vector<BinRecord>& bins) {
  Matrix m;
  for (const auto& b : bins) m.push_back(b.features);
  return m;
}

Matrix features_of(const std::vector<CellRecord>& cells) {
  Matrix m;
  for (const auto& c : cells) m.push_back(c.features);
  return m;
}

}  // namespace tseg
