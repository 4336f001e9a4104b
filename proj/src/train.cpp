#include "tribranch/train.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <random>
#include <stdexcept>

namespace tribranch {

std::string loss_mode_name(LossMode m) {
  return m == LossMode::TopkFocused ? "topk_focused" : "uniform";
}

LossMode parse_loss_mode(const std::string& name) {
  if (name == "topk_focused" || name == "topk") return LossMode::TopkFocused;
  if (name == "uniform") return LossMode::Uniform;
  throw std::invalid_argument("unknown loss mode \"" + name +
                              "\" (expected topk_focused or uniform)");
}

AdamState::AdamState(const std::vector<Tensor>& params, double beta1,
                     double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void AdamState::step(std::vector<Tensor>& params, double lr) {
  if (params.size() != m_.size()) {
    throw std::invalid_argument("adam_step: parameter count mismatch");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (p.size() != m_[i].size()) {
      throw std::invalid_argument("adam_step: shape mismatch at parameter " +
                                  std::to_string(i));
    }
    static const std::vector<double> kNoGrad;
    const std::vector<double>& g = p.has_grad() ? p.grad() : kNoGrad;
    auto& data = p.raw();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: negative epoch");
  return cfg.initial_lr *
         std::pow(0.5, static_cast<double>(epoch / cfg.lr_halving_period));
}

std::vector<std::vector<std::size_t>> sample_batches(std::size_t n_pairs,
                                                     const TrainConfig& cfg,
                                                     int epoch) {
  if (n_pairs == 0) {
    throw std::invalid_argument("sample_batches: empty pair pool");
  }
  std::vector<std::size_t> order(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) order[i] = i;
  std::mt19937_64 rng(
      splitmix64(cfg.seed ^ (0x5e65u + static_cast<std::uint64_t>(epoch))));
  for (std::size_t i = n_pairs - 1; i > 0; --i) {
    std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  if (cfg.pairs_per_epoch_cap && *cfg.pairs_per_epoch_cap < order.size()) {
    order.resize(*cfg.pairs_per_epoch_cap);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size();
       start += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t end =
        std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

Dataset Dataset::build(const std::vector<BehaviorRecord>& records,
                       const std::vector<StudentLabel>& labels,
                       const DatasetDims& dims, std::uint64_t split_seed) {
  Dataset ds;
  ds.dims = dims;
  ds.labels = labels;
  std::map<StudentId, std::vector<BehaviorRecord>> per_student;
  for (const auto& r : records) per_student[r.student].push_back(r);
  std::set<MajorId> majors;
  for (const auto& l : labels) {
    ds.major_of[l.student] = l.major;
    majors.insert(l.major);
    ds.tensors[l.student] =
        encode_trajectory(per_student[l.student], dims);
  }
  ds.majors.assign(majors.begin(), majors.end());
  ds.split = split_by_major(labels, 0.7, 0.1, 0.2, split_seed);
  return ds;
}

nlohmann::json epoch_log_to_json(const EpochLog& log) {
  nlohmann::json j;
  j["epoch"] = log.epoch;
  j["lr"] = log.lr;
  j["train_loss"] = log.train_loss;
  j["val_acc"] = log.val_acc;
  j["val_rho"] = log.val_rho;
  j["val_p10"] = log.val_p10 ? nlohmann::json(*log.val_p10) : nlohmann::json();
  j["val_p20"] = log.val_p20 ? nlohmann::json(*log.val_p20) : nlohmann::json();
  return j;
}

namespace {

struct TaggedPair {
  PairSample pair;
  MajorId major;
  double weight = 1.0;
};

}  // namespace

TrainResult train(const Dataset& dataset, const ModelConfig& mcfg,
                  const TrainConfig& tcfg) {
  mcfg.validate();

  // Pair pool with per-pair weights from the training-split true ranking;
  // test and validation labels never enter the weights.
  std::vector<TaggedPair> pool;
  for (const auto& [major, students] : dataset.split.train) {
    if (students.empty()) {
      throw std::invalid_argument("train: empty training split for major " +
                                  major);
    }
    TrueRanking truth = build_true_ranking(major, dataset.labels, students);
    if (tcfg.loss_mode == LossMode::TopkFocused && tcfg.loss.k > truth.n_s) {
      throw std::invalid_argument(
          "train: loss k=" + std::to_string(tcfg.loss.k) +
          " exceeds training ranking size of major " + major);
    }
    for (const auto& p : build_pairs(students, truth)) {
      TaggedPair tp;
      tp.pair = p;
      tp.major = major;
      tp.weight = tcfg.loss_mode == LossMode::TopkFocused
                      ? pair_weight(truth.position_of(p.u),
                                    truth.position_of(p.v), truth.n_s,
                                    tcfg.loss)
                      : 1.0;
      pool.push_back(std::move(tp));
    }
  }

  TrainResult result;
  result.final_params = init_params(mcfg, tcfg.seed);
  std::vector<Tensor> param_list = result.final_params.all_tensors();
  AdamState adam(param_list);

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, tcfg);
    double epoch_loss_sum = 0.0;
    std::size_t epoch_pairs = 0;

    for (const auto& batch : sample_batches(pool.size(), tcfg, epoch)) {
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      // one forward per distinct student in the batch
      std::map<StudentId, Tensor> scores;
      std::map<StudentId, double> seeds;
      for (std::size_t idx : batch) {
        const TaggedPair& tp = pool[idx];
        for (StudentId s : {tp.pair.u, tp.pair.v}) {
          if (!scores.count(s)) {
            scores.emplace(s, model_forward(dataset.tensors.at(s), tp.major,
                                            result.final_params, mcfg));
            seeds[s] = 0.0;
          }
        }
      }
      double batch_loss = 0.0;
      for (std::size_t idx : batch) {
        const TaggedPair& tp = pool[idx];
        const double fu = scores.at(tp.pair.u).value();
        const double fv = scores.at(tp.pair.v).value();
        const double y = static_cast<double>(tp.pair.label);
        const double margin = y * (fv - fu) + 1.0;
        if (margin > 0.0) {
          batch_loss += tp.weight * margin;
          seeds[tp.pair.v] += tp.weight * y * inv_b;
          seeds[tp.pair.u] -= tp.weight * y * inv_b;
        }
      }
      batch_loss *= inv_b;
      if (!std::isfinite(batch_loss)) {
        throw std::runtime_error("train: non-finite loss at epoch " +
                                 std::to_string(epoch) +
                                 "; aborting (check learning rate and data)");
      }
      for (auto& [student, score] : scores) {
        const double seed = seeds.at(student);
        if (seed != 0.0) score.backward(seed);
      }
      adam.step(param_list, lr);
      result.final_params.zero_grads();

      epoch_loss_sum += batch_loss * static_cast<double>(batch.size());
      epoch_pairs += batch.size();
    }

    MetricsReport val =
        evaluate(result.final_params, mcfg, dataset, dataset.split.val);
    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    log.train_loss = epoch_loss_sum / static_cast<double>(epoch_pairs);
    log.val_acc = val.macro.acc;
    log.val_rho = val.macro.rho;
    log.val_p10 = val.macro.p_at_10;
    log.val_p20 = val.macro.p_at_20;
    result.logs.push_back(log);

    if (val.macro.acc > result.best_val_acc) {
      result.best_val_acc = val.macro.acc;
      result.best_epoch = epoch;
      result.best_params = result.final_params.deep_copy();
    }
  }

  if (tcfg.epochs == 0) {
    result.best_params = result.final_params.deep_copy();
    result.best_epoch = 0;
  }
  return result;
}

MetricsReport evaluate(const ModelParams& params, const ModelConfig& mcfg,
                       const Dataset& dataset,
                       const std::map<MajorId, std::vector<StudentId>>& split) {
  NoGradGuard no_grad;
  MetricsReport report;
  std::vector<MajorMetrics> per_major;
  for (const auto& [major, students] : split) {
    if (students.size() < 2) {
      std::cerr << "warning: major " << major << " has fewer than 2 students "
                << "in the evaluated split; skipping\n";
      continue;
    }
    std::map<StudentId, double> scores;
    for (StudentId s : students) {
      scores[s] =
          model_forward(dataset.tensors.at(s), major, params, mcfg).value();
    }
    TrueRanking truth = build_true_ranking(major, dataset.labels, students);
    PredictedRanking pred = predicted_ranking(scores);
    MajorMetrics m;
    m.acc = pairwise_accuracy(scores, truth);
    m.rho = spearman(pred, truth);
    for (int k : {10, 20}) {
      if (static_cast<int>(students.size()) >= std::max(k, 2)) {
        double p = precision_at_k(pred, truth, k);
        if (k == 10) m.p_at_10 = p; else m.p_at_20 = p;
      } else {
        std::cerr << "warning: major " << major << " has "
                  << students.size() << " students; p@" << k << " omitted\n";
      }
    }
    report.per_major[major] = m;
    per_major.push_back(m);
  }
  if (per_major.empty()) {
    throw std::invalid_argument("evaluate: no major had enough students");
  }
  report.macro = macro_average(per_major);
  return report;
}

}  // namespace tribranch
