#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tribranch/tensor.hpp"

namespace tribranch {

enum class Branch { P, R, D };

std::string branch_name(Branch b);
std::set<Branch> parse_branches(const std::string& spec);  // e.g. "PRD", "PD"
std::string branches_to_string(const std::set<Branch>& branches);

struct ModelConfig {
  int n_d = 30;
  int n_t = 18;
  int n_l = 12;
  int kernel_size = 3;      // s, odd
  int reduction_ratio = 4;  // r
  int blocks = 3;           // b
  int fusion_hidden1 = 512;
  int fusion_hidden2 = 256;
  int pool_d = 5;
  int pool_t = 3;
  std::vector<std::string> majors;
  bool attention_enabled = true;
  std::set<Branch> enabled_branches = {Branch::P, Branch::R, Branch::D};

  void validate() const;
  int attention_hidden(int axis_len) const;  // max(1, ceil(L/r))
  int branch_output_len(Branch b) const;
  int fusion_input_len() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct AttentionParams {
  Tensor w1, b1, w2, b2;  // L -> hidden -> L
};

struct BlockParams {
  Tensor kernels;  // P/R: [n_l,kh,kw,n_l]; D: [n_l,s,s]
  Tensor bias;     // [n_l]
  AttentionParams attention;
};

struct BranchParams {
  std::vector<BlockParams> blocks;
};

struct HeadParams {
  Tensor w1, b1;  // fusion_input -> hidden1
  Tensor w2, b2;  // hidden1 -> hidden2
  Tensor w3, b3;  // hidden2 -> 1
};

/// Branch parameters are shared across majors; each major owns its fusion
/// head (hard parameter sharing).
struct ModelParams {
  BranchParams persistence, regularity, distribution;
  std::map<std::string, HeadParams> heads;

  BranchParams& branch(Branch b);
  const BranchParams& branch(Branch b) const;
  std::vector<Tensor> all_tensors();
  std::vector<Tensor> shared_tensors();
  void zero_grads();
  ModelParams deep_copy() const;
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

Tensor attention_forward(const Tensor& descriptor, const AttentionParams& p);
Tensor persistence_block(const Tensor& f, const BlockParams& p,
                         const ModelConfig& cfg);
Tensor regularity_block(const Tensor& f, const BlockParams& p,
                        const ModelConfig& cfg);
Tensor distribution_block(const Tensor& f, const BlockParams& p,
                          const ModelConfig& cfg);
Tensor branch_forward(const Tensor& x, Branch b, const ModelParams& params,
                      const ModelConfig& cfg);

Tensor model_forward(const Tensor& x, const std::string& major,
                     const ModelParams& params, const ModelConfig& cfg);
Tensor embed(const Tensor& x, const std::string& major,
             const ModelParams& params, const ModelConfig& cfg);

struct AttentionExport {
  std::vector<double> dates;      // length n_d
  std::vector<double> slots;      // length n_t
  std::vector<double> locations;  // length n_l
};

/// Mean first-block attention vectors over a batch of inputs.
AttentionExport export_attention(const std::vector<Tensor>& batch,
                                 const ModelParams& params,
                                 const ModelConfig& cfg);

// Checkpoint: a single JSON document that round-trips bit-exactly.
struct Checkpoint {
  ModelConfig config;
  std::uint64_t init_seed = 0;
  std::uint64_t split_seed = 0;
  int epoch = 0;
  ModelParams params;

  nlohmann::json to_json() const;
  static Checkpoint from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace tribranch
