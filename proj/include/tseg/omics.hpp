#pragma once

// Spatial expression data to segmentation labels: k-means domains,
// multi-hop neighbourhood pooling, and projection of bins or cells onto the
// pixel grid.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tseg/imaging.hpp"

namespace tseg {

using Matrix = std::vector<std::vector<double>>;  // rows are points

struct KMeansOptions {
  std::uint64_t seed = 0;
  int max_iterations = 300;
  int restarts = 30;  // best objective over independently seeded runs
};

struct ClusterModel {
  int k = 0;
  Matrix centroids;
  std::vector<int> assignments;   // 0-based cluster ids
  double objective = 0.0;         // sum of squared distances to assigned centroids
  std::vector<double> history;    // objective after every assignment step of the winning run
  int iterations = 0;
};

ClusterModel kmeans(const Matrix& points, int k, const KMeansOptions& options = {});

/// Sum of squared distances of points to the mean of their group.
double within_cluster_ss(const Matrix& points, const std::vector<int>& assignments, int k);

/// Symmetric k-nearest-neighbour graph on 2-D coordinates. Distance ties are
/// broken by index. Adjacency lists are sorted.
std::vector<std::vector<std::size_t>> knn_graph(const std::vector<Point>& coords, int k_neighbors);

/// Z_i = [X0_i | X1_i | ... | XL_i] where X(l+1) is the mean of X(l) over the
/// graph neighbours.
Matrix neighborhood_embed(const Matrix& features, const std::vector<Point>& coords, int hops = 3,
                          int k_neighbors = 6);

struct BinRecord {
  double x = 0.0;  // square center, pixels
  double y = 0.0;
  double side = 0.0;
  std::vector<double> features;
};

struct CellRecord {
  std::vector<Point> contour;
  std::vector<double> features;
  Point centroid;
};

/// cluster id -> class name, and class name -> mask index.
struct ClusterClassMap {
  std::map<int, std::string> cluster_to_class;
  std::vector<std::string> class_names;  // index i + 1 is class i's mask value

  int class_index(int cluster) const;
};

ClusterClassMap parse_cluster_map(const std::string& json_text);

/// Each bin paints the pixels whose centers lie inside its square.
RasterMask bins_to_mask(const std::vector<BinRecord>& bins, const std::vector<int>& clusters,
                        const ClusterClassMap& classes, int width, int height);

RasterMask cells_to_mask(const std::vector<CellRecord>& cells, const std::vector<int>& clusters,
                         const ClusterClassMap& classes, int width, int height);

/// CSV with header x,y,side_px,f1..fd.
std::vector<BinRecord> parse_bins_csv(const std::string& text);
/// JSON array of {"contour": [[x, y], ...], "features": [...]}.
std::vector<CellRecord> parse_cells_json(const std::string& text);

Matrix features_of(const std::vector<BinRecord>& bins);
Matrix features_of(const std::vector<CellRecord>& cells);

}  // namespace tseg
