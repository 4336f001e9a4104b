#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tribranch/data.hpp"
#include "tribranch/model.hpp"
#include "tribranch/ranking.hpp"

namespace tribranch {

enum class LossMode { TopkFocused, Uniform };

std::string loss_mode_name(LossMode m);
LossMode parse_loss_mode(const std::string& name);

struct TrainConfig {
  int batch_size = 16;
  double initial_lr = 1e-5;
  int epochs = 50;
  int lr_halving_period = 20;
  LossMode loss_mode = LossMode::TopkFocused;
  LossConfig loss;
  std::optional<std::size_t> pairs_per_epoch_cap;
  std::uint64_t seed = 0;
};

/// Bias-corrected Adam over a fixed parameter list. Buffer order mirrors the
/// parameter order handed to the constructor.
class AdamState {
 public:
  AdamState(const std::vector<Tensor>& params, double beta1 = 0.9,
            double beta2 = 0.999, double eps = 1e-8);

  void step(std::vector<Tensor>& params, double lr);
  int step_count() const { return t_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

double lr_schedule(int epoch, const TrainConfig& cfg);

/// Per-epoch shuffled pair order, optionally capped, chunked into batches.
/// The final partial batch is kept.
std::vector<std::vector<std::size_t>> sample_batches(std::size_t n_pairs,
                                                     const TrainConfig& cfg,
                                                     int epoch);

struct Dataset {
  DatasetDims dims;
  std::vector<StudentLabel> labels;
  std::map<StudentId, MajorId> major_of;
  std::map<StudentId, Tensor> tensors;
  DatasetSplit split;
  std::vector<MajorId> majors;

  static Dataset build(const std::vector<BehaviorRecord>& records,
                       const std::vector<StudentLabel>& labels,
                       const DatasetDims& dims, std::uint64_t split_seed);
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double val_rho = 0.0;
  std::optional<double> val_p10;
  std::optional<double> val_p20;
};

nlohmann::json epoch_log_to_json(const EpochLog& log);

struct TrainResult {
  ModelParams final_params;
  ModelParams best_params;
  int best_epoch = -1;
  double best_val_acc = -1.0;
  std::vector<EpochLog> logs;
};

TrainResult train(const Dataset& dataset, const ModelConfig& mcfg,
                  const TrainConfig& tcfg);

MetricsReport evaluate(const ModelParams& params, const ModelConfig& mcfg,
                       const Dataset& dataset,
                       const std::map<MajorId, std::vector<StudentId>>& split);

}  // namespace tribranch
