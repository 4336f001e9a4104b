#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tribranch/tensor.hpp"

namespace tribranch {

using StudentId = int;
using MajorId = std::string;

/// Students of one major ordered ascending by performance: position 1 is the
/// worst performer, position n_s the best.
struct TrueRanking {
  MajorId major;
  std::map<StudentId, int> positions;  // student -> r(u) in 1..n_s
  int n_s = 0;

  int position_of(StudentId u) const;
  void validate() const;
};

struct PairSample {
  StudentId u = 0;
  StudentId v = 0;
  int label = 0;  // +1: u performs better than v, -1: the opposite
};

struct LossConfig {
  int k = 10;
  double eta = 0.01;
};

struct MajorMetrics {
  double acc = 0.0;
  double rho = 0.0;
  std::optional<double> p_at_10;
  std::optional<double> p_at_20;
};

struct MetricsReport {
  std::map<MajorId, MajorMetrics> per_major;
  MajorMetrics macro;
};

struct PredictedRanking {
  std::map<StudentId, int> positions;  // student -> predicted position, 1 = worst
};

// Top-k focused loss weights (all positions are 1-based)
double gain(int r_u, int n_s);
double delta_dcg(int r_u, int r_v, int n_s);
double delta_dcg_max(int n_s);
double pair_weight(int r_u, int r_v, int n_s, const LossConfig& cfg);

/// Mean over pairs of w_uv * max(0, y_uv * (f_v - f_u) + 1), differentiable
/// w.r.t. the score tensors. Unit weights recover the plain pairwise hinge.
Tensor weighted_hinge_loss(const std::map<StudentId, Tensor>& scores,
                           const std::vector<PairSample>& pairs,
                           const std::vector<double>& weights);

// Metrics
PredictedRanking predicted_ranking(const std::map<StudentId, double>& scores);
double pairwise_accuracy(const std::map<StudentId, double>& scores,
                         const TrueRanking& truth);
double spearman(const PredictedRanking& pred, const TrueRanking& truth);
double precision_at_k(const PredictedRanking& pred, const TrueRanking& truth,
                      int k);
MajorMetrics macro_average(const std::vector<MajorMetrics>& reports);

nlohmann::json metrics_to_json(const MetricsReport& report);

}  // namespace tribranch
