#include "tribranch/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace tribranch {

int TrueRanking::position_of(StudentId u) const {
  auto it = positions.find(u);
  if (it == positions.end()) {
    throw std::invalid_argument("student " + std::to_string(u) +
                                " not present in ranking of major " + major);
  }
  return it->second;
}

void TrueRanking::validate() const {
  if (static_cast<int>(positions.size()) != n_s) {
    throw std::invalid_argument("ranking size mismatch for major " + major);
  }
  std::set<int> seen;
  for (const auto& [u, r] : positions) {
    if (r < 1 || r > n_s || !seen.insert(r).second) {
      throw std::invalid_argument("positions are not a bijection onto 1.." +
                                  std::to_string(n_s));
    }
  }
}

double gain(int r_u, int n_s) {
  if (r_u < 1 || r_u > n_s) {
    throw std::invalid_argument("gain: position " + std::to_string(r_u) +
                                " out of range 1.." + std::to_string(n_s));
  }
  return static_cast<double>(n_s - r_u + 1);
}

double delta_dcg(int r_u, int r_v, int n_s) {
  if (r_u < 1 || r_u > n_s || r_v < 1 || r_v > n_s) {
    throw std::invalid_argument("delta_dcg: positions out of range 1.." +
                                std::to_string(n_s));
  }
  if (r_u == r_v) {
    throw std::invalid_argument("delta_dcg: undefined for equal positions " +
                                std::to_string(r_u));
  }
  const double a = 1.0 / std::log2(1.0 + static_cast<double>(r_u));
  const double b = 1.0 / std::log2(1.0 + static_cast<double>(r_v));
  return std::abs(static_cast<double>(r_v - r_u) * (a - b));
}

double delta_dcg_max(int n_s) {
  if (n_s < 2) {
    throw std::invalid_argument("delta_dcg_max: need at least 2 students, got " +
                                std::to_string(n_s));
  }
  return static_cast<double>(n_s - 1) *
         (1.0 - 1.0 / std::log2(1.0 + static_cast<double>(n_s)));
}

double pair_weight(int r_u, int r_v, int n_s, const LossConfig& cfg) {
  if (std::min(r_u, r_v) <= cfg.k) {
    return delta_dcg(r_u, r_v, n_s) / delta_dcg_max(n_s);
  }
  return cfg.eta;
}

Tensor weighted_hinge_loss(const std::map<StudentId, Tensor>& scores,
                           const std::vector<PairSample>& pairs,
                           const std::vector<double>& weights) {
  if (pairs.empty()) {
    throw std::invalid_argument("weighted_hinge_loss: empty pair list");
  }
  if (weights.size() != pairs.size()) {
    throw std::invalid_argument("weighted_hinge_loss: " +
                                std::to_string(weights.size()) +
                                " weights for " + std::to_string(pairs.size()) +
                                " pairs");
  }
  std::vector<Tensor> terms;
  terms.reserve(pairs.size());
  for (const auto& p : pairs) {
    auto fu = scores.find(p.u);
    auto fv = scores.find(p.v);
    if (fu == scores.end() || fv == scores.end()) {
      throw std::invalid_argument(
          "weighted_hinge_loss: missing score for student " +
          std::to_string(fu == scores.end() ? p.u : p.v));
    }
    Tensor margin = scalar_add(
        scalar_mul(sub(fv->second, fu->second), static_cast<double>(p.label)),
        1.0);
    terms.push_back(relu(margin));
  }
  Tensor stacked = concat(terms);
  Tensor w = Tensor::from_data({static_cast<int>(weights.size())}, weights);
  return mean_over_axes(mul(stacked, w), {0});
}

PredictedRanking predicted_ranking(const std::map<StudentId, double>& scores) {
  if (scores.empty()) {
    throw std::invalid_argument("predicted_ranking: no scores");
  }
  std::vector<std::pair<StudentId, double>> order(scores.begin(), scores.end());
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second < b.second;
                     return a.first < b.first;
                   });
  PredictedRanking pred;
  int pos = 1;
  for (const auto& [u, s] : order) pred.positions[u] = pos++;
  return pred;
}

double pairwise_accuracy(const std::map<StudentId, double>& scores,
                         const TrueRanking& truth) {
  if (scores.size() < 2) {
    throw std::invalid_argument(
        "pairwise_accuracy: need at least 2 scored students");
  }
  std::vector<StudentId> ids;
  ids.reserve(scores.size());
  for (const auto& [u, s] : scores) ids.push_back(u);
  long correct = 0, total = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      const double fu = scores.at(ids[i]), fv = scores.at(ids[j]);
      const int ru = truth.position_of(ids[i]), rv = truth.position_of(ids[j]);
      ++total;
      // higher score <-> better performance <-> larger true position;
      // score ties count as errors
      if ((fu > fv && ru > rv) || (fu < fv && ru < rv)) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

double spearman(const PredictedRanking& pred, const TrueRanking& truth) {
  const std::size_t n = truth.positions.size();
  if (n < 2 || pred.positions.size() != n) {
    throw std::invalid_argument("spearman: student sets mismatch or too small");
  }
  double sum_sq = 0.0;
  for (const auto& [u, r] : truth.positions) {
    auto it = pred.positions.find(u);
    if (it == pred.positions.end()) {
      throw std::invalid_argument("spearman: student " + std::to_string(u) +
                                  " missing from predicted ranking");
    }
    const double d = static_cast<double>(it->second - r);
    sum_sq += d * d;
  }
  const double nn = static_cast<double>(n);
  return 1.0 - 6.0 * sum_sq / (nn * (nn * nn - 1.0));
}

double precision_at_k(const PredictedRanking& pred, const TrueRanking& truth,
                      int k) {
  const int n = static_cast<int>(truth.positions.size());
  if (k < 1 || k > n) {
    throw std::invalid_argument("precision_at_k: k=" + std::to_string(k) +
                                " out of range for " + std::to_string(n) +
                                " students");
  }
  std::set<StudentId> top_true, top_pred;
  for (const auto& [u, r] : truth.positions)
    if (r <= k) top_true.insert(u);
  for (const auto& [u, r] : pred.positions)
    if (r <= k) top_pred.insert(u);
  int common = 0;
  for (StudentId u : top_pred)
    if (top_true.count(u)) ++common;
  return static_cast<double>(common) / static_cast<double>(k);
}

MajorMetrics macro_average(const std::vector<MajorMetrics>& reports) {
  if (reports.empty()) {
    throw std::invalid_argument("macro_average: no per-major reports");
  }
  MajorMetrics out;
  double p10 = 0.0, p20 = 0.0;
  int n10 = 0, n20 = 0;
  for (const auto& m : reports) {
    out.acc += m.acc;
    out.rho += m.rho;
    if (m.p_at_10) {
      p10 += *m.p_at_10;
      ++n10;
    }
    if (m.p_at_20) {
      p20 += *m.p_at_20;
      ++n20;
    }
  }
  const double n = static_cast<double>(reports.size());
  out.acc /= n;
  out.rho /= n;
  if (n10 > 0) out.p_at_10 = p10 / n10;
  if (n20 > 0) out.p_at_20 = p20 / n20;
  return out;
}

namespace {

nlohmann::json major_metrics_to_json(const MajorMetrics& m) {
  nlohmann::json j;
  j["acc"] = m.acc;
  j["rho"] = m.rho;
  j["p_at_10"] = m.p_at_10 ? nlohmann::json(*m.p_at_10) : nlohmann::json();
  j["p_at_20"] = m.p_at_20 ? nlohmann::json(*m.p_at_20) : nlohmann::json();
  return j;
}

}  // namespace

nlohmann::json metrics_to_json(const MetricsReport& report) {
  nlohmann::json j;
  for (const auto& [major, m] : report.per_major) {
    j[major] = major_metrics_to_json(m);
  }
  j["macro"] = major_metrics_to_json(report.macro);
  return j;
}

}  // namespace tribranch
