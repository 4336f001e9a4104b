#include "tribranch/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "tribranch/data.hpp"

namespace tribranch {

std::string branch_name(Branch b) {
  switch (b) {
    case Branch::P: return "P";
    case Branch::R: return "R";
    case Branch::D: return "D";
  }
  throw std::invalid_argument("unknown branch id");
}

std::set<Branch> parse_branches(const std::string& spec) {
  std::set<Branch> out;
  for (char c : spec) {
    switch (c) {
      case 'P': case 'p': out.insert(Branch::P); break;
      case 'R': case 'r': out.insert(Branch::R); break;
      case 'D': case 'd': out.insert(Branch::D); break;
      default:
        throw std::invalid_argument("unknown branch '" + std::string(1, c) +
                                    "' in \"" + spec + "\" (expected P/R/D)");
    }
  }
  if (out.empty()) throw std::invalid_argument("no branches enabled");
  return out;
}

std::string branches_to_string(const std::set<Branch>& branches) {
  std::string s;
  if (branches.count(Branch::P)) s += 'P';
  if (branches.count(Branch::R)) s += 'R';
  if (branches.count(Branch::D)) s += 'D';
  return s;
}

void ModelConfig::validate() const {
  if (n_d <= 0 || n_t <= 0 || n_l <= 0) {
    throw std::invalid_argument("model config: dims must be positive");
  }
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw std::invalid_argument("model config: kernel size must be odd and >=1");
  }
  if (reduction_ratio < 1 || blocks < 1) {
    throw std::invalid_argument("model config: reduction ratio and blocks must be >=1");
  }
  if (pool_d < 1 || pool_d > n_d || pool_t < 1 || pool_t > n_t) {
    throw std::invalid_argument("model config: pool region must fit in (n_d,n_t)");
  }
  if (majors.empty()) {
    throw std::invalid_argument("model config: at least one major required");
  }
  if (enabled_branches.empty()) {
    throw std::invalid_argument("model config: at least one branch required");
  }
}

int ModelConfig::attention_hidden(int axis_len) const {
  return std::max(1, (axis_len + reduction_ratio - 1) / reduction_ratio);
}

int ModelConfig::branch_output_len(Branch b) const {
  switch (b) {
    case Branch::P: return n_d * n_l;
    case Branch::R: return n_t * n_l;
    case Branch::D: return (n_d / pool_d) * (n_t / pool_t) * n_l;
  }
  throw std::invalid_argument("unknown branch id");
}

int ModelConfig::fusion_input_len() const {
  int total = 0;
  for (Branch b : enabled_branches) total += branch_output_len(b);
  return total;
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["n_d"] = n_d;
  j["n_t"] = n_t;
  j["n_l"] = n_l;
  j["kernel_size"] = kernel_size;
  j["reduction_ratio"] = reduction_ratio;
  j["blocks"] = blocks;
  j["fusion_hidden1"] = fusion_hidden1;
  j["fusion_hidden2"] = fusion_hidden2;
  j["pool_d"] = pool_d;
  j["pool_t"] = pool_t;
  j["majors"] = majors;
  j["attention_enabled"] = attention_enabled;
  j["branches"] = branches_to_string(enabled_branches);
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_d = j.at("n_d").get<int>();
  cfg.n_t = j.at("n_t").get<int>();
  cfg.n_l = j.at("n_l").get<int>();
  cfg.kernel_size = j.at("kernel_size").get<int>();
  cfg.reduction_ratio = j.at("reduction_ratio").get<int>();
  cfg.blocks = j.at("blocks").get<int>();
  cfg.fusion_hidden1 = j.at("fusion_hidden1").get<int>();
  cfg.fusion_hidden2 = j.at("fusion_hidden2").get<int>();
  cfg.pool_d = j.at("pool_d").get<int>();
  cfg.pool_t = j.at("pool_t").get<int>();
  cfg.majors = j.at("majors").get<std::vector<std::string>>();
  cfg.attention_enabled = j.at("attention_enabled").get<bool>();
  cfg.enabled_branches = parse_branches(j.at("branches").get<std::string>());
  return cfg;
}

BranchParams& ModelParams::branch(Branch b) {
  switch (b) {
    case Branch::P: return persistence;
    case Branch::R: return regularity;
    case Branch::D: return distribution;
  }
  throw std::invalid_argument("unknown branch id");
}

const BranchParams& ModelParams::branch(Branch b) const {
  return const_cast<ModelParams*>(this)->branch(b);
}

std::vector<Tensor> ModelParams::shared_tensors() {
  std::vector<Tensor> out;
  for (Branch b : {Branch::P, Branch::R, Branch::D}) {
    for (auto& blk : branch(b).blocks) {
      out.push_back(blk.kernels);
      out.push_back(blk.bias);
      out.push_back(blk.attention.w1);
      out.push_back(blk.attention.b1);
      out.push_back(blk.attention.w2);
      out.push_back(blk.attention.b2);
    }
  }
  return out;
}

std::vector<Tensor> ModelParams::all_tensors() {
  std::vector<Tensor> out = shared_tensors();
  for (auto& [major, head] : heads) {
    out.push_back(head.w1);
    out.push_back(head.b1);
    out.push_back(head.w2);
    out.push_back(head.b2);
    out.push_back(head.w3);
    out.push_back(head.b3);
  }
  return out;
}

void ModelParams::zero_grads() {
  for (auto& t : all_tensors()) t.zero_grad();
}

ModelParams ModelParams::deep_copy() const {
  auto copy_tensor = [](const Tensor& t) {
    return Tensor::from_data(t.shape(), t.data(), t.requires_grad());
  };
  auto copy_block = [&](const BlockParams& b) {
    BlockParams o;
    o.kernels = copy_tensor(b.kernels);
    o.bias = copy_tensor(b.bias);
    o.attention.w1 = copy_tensor(b.attention.w1);
    o.attention.b1 = copy_tensor(b.attention.b1);
    o.attention.w2 = copy_tensor(b.attention.w2);
    o.attention.b2 = copy_tensor(b.attention.b2);
    return o;
  };
  ModelParams out;
  for (Branch b : {Branch::P, Branch::R, Branch::D}) {
    for (const auto& blk : branch(b).blocks)
      out.branch(b).blocks.push_back(copy_block(blk));
  }
  for (const auto& [major, head] : heads) {
    HeadParams h;
    h.w1 = copy_tensor(head.w1);
    h.b1 = copy_tensor(head.b1);
    h.w2 = copy_tensor(head.w2);
    h.b2 = copy_tensor(head.b2);
    h.w3 = copy_tensor(head.w3);
    h.b3 = copy_tensor(head.b3);
    out.heads[major] = std::move(h);
  }
  return out;
}

namespace {

Tensor draw_uniform(Shape shape, int fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  std::vector<double> data(n);
  for (auto& v : data) {
    v = bound * (2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0);
  }
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

AttentionParams init_attention(int axis_len, const ModelConfig& cfg,
                               std::mt19937_64& rng) {
  const int hidden = cfg.attention_hidden(axis_len);
  AttentionParams p;
  p.w1 = draw_uniform({hidden, axis_len}, axis_len, rng);
  p.b1 = Tensor::zeros({hidden}, true);
  p.w2 = draw_uniform({axis_len, hidden}, hidden, rng);
  p.b2 = Tensor::zeros({axis_len}, true);
  return p;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(splitmix64(seed));
  const int s = cfg.kernel_size;
  ModelParams params;
  for (int i = 0; i < cfg.blocks; ++i) {
    BlockParams blk;
    blk.kernels = draw_uniform({cfg.n_l, 1, s, cfg.n_l}, s * cfg.n_l, rng);
    blk.bias = Tensor::zeros({cfg.n_l}, true);
    blk.attention = init_attention(cfg.n_d, cfg, rng);
    params.persistence.blocks.push_back(std::move(blk));
  }
  for (int i = 0; i < cfg.blocks; ++i) {
    BlockParams blk;
    blk.kernels = draw_uniform({cfg.n_l, s, 1, cfg.n_l}, s * cfg.n_l, rng);
    blk.bias = Tensor::zeros({cfg.n_l}, true);
    blk.attention = init_attention(cfg.n_t, cfg, rng);
    params.regularity.blocks.push_back(std::move(blk));
  }
  for (int i = 0; i < cfg.blocks; ++i) {
    BlockParams blk;
    blk.kernels = draw_uniform({cfg.n_l, s, s}, s * s, rng);
    blk.bias = Tensor::zeros({cfg.n_l}, true);
    blk.attention = init_attention(cfg.n_l, cfg, rng);
    params.distribution.blocks.push_back(std::move(blk));
  }
  const int fusion_in = cfg.fusion_input_len();
  for (const auto& major : cfg.majors) {
    HeadParams h;
    h.w1 = draw_uniform({cfg.fusion_hidden1, fusion_in}, fusion_in, rng);
    h.b1 = Tensor::zeros({cfg.fusion_hidden1}, true);
    h.w2 = draw_uniform({cfg.fusion_hidden2, cfg.fusion_hidden1},
                        cfg.fusion_hidden1, rng);
    h.b2 = Tensor::zeros({cfg.fusion_hidden2}, true);
    h.w3 = draw_uniform({1, cfg.fusion_hidden2}, cfg.fusion_hidden2, rng);
    h.b3 = Tensor::zeros({1}, true);
    params.heads[major] = std::move(h);
  }
  return params;
}

Tensor attention_forward(const Tensor& descriptor, const AttentionParams& p) {
  return sigmoid(affine(relu(affine(descriptor, p.w1, p.b1)), p.w2, p.b2));
}

namespace {

Tensor conv_block(const Tensor& f, const BlockParams& p, const ModelConfig& cfg,
                  Branch branch) {
  Tensor g;
  if (branch == Branch::D) {
    g = relu(depthwise_conv2d_same(f, p.kernels, p.bias));
  } else {
    g = relu(conv2d_same(f, p.kernels, p.bias));
  }
  if (!cfg.attention_enabled) return g;
  std::set<int> squeeze;
  int axis;
  switch (branch) {
    case Branch::P: squeeze = {1, 2}; axis = 0; break;
    case Branch::R: squeeze = {0, 2}; axis = 1; break;
    case Branch::D: squeeze = {0, 1}; axis = 2; break;
  }
  Tensor descriptor = mean_over_axes(g, squeeze);
  Tensor att = attention_forward(descriptor, p.attention);
  return broadcast_mul(g, att, axis);
}

void check_input_shape(const Tensor& x, const ModelConfig& cfg) {
  if (x.rank() != 3 || x.dim(0) != cfg.n_d || x.dim(1) != cfg.n_t ||
      x.dim(2) != cfg.n_l) {
    throw std::invalid_argument("model input shape " + shape_str(x.shape()) +
                                " does not match configured dims [" +
                                std::to_string(cfg.n_d) + "," +
                                std::to_string(cfg.n_t) + "," +
                                std::to_string(cfg.n_l) + "]");
  }
}

}  // namespace

Tensor persistence_block(const Tensor& f, const BlockParams& p,
                         const ModelConfig& cfg) {
  check_input_shape(f, cfg);
  return conv_block(f, p, cfg, Branch::P);
}

Tensor regularity_block(const Tensor& f, const BlockParams& p,
                        const ModelConfig& cfg) {
  check_input_shape(f, cfg);
  return conv_block(f, p, cfg, Branch::R);
}

Tensor distribution_block(const Tensor& f, const BlockParams& p,
                          const ModelConfig& cfg) {
  check_input_shape(f, cfg);
  return conv_block(f, p, cfg, Branch::D);
}

Tensor branch_forward(const Tensor& x, Branch b, const ModelParams& params,
                      const ModelConfig& cfg) {
  check_input_shape(x, cfg);
  Tensor f = x;
  for (const auto& blk : params.branch(b).blocks) {
    f = conv_block(f, blk, cfg, b);
  }
  switch (b) {
    case Branch::P: return flatten(max_over_axis(f, 1));
    case Branch::R: return flatten(max_over_axis(f, 0));
    case Branch::D: return flatten(max_pool2d(f, cfg.pool_d, cfg.pool_t));
  }
  throw std::invalid_argument("unknown branch id");
}

namespace {

const HeadParams& head_for(const std::string& major, const ModelParams& params) {
  auto it = params.heads.find(major);
  if (it == params.heads.end()) {
    throw std::invalid_argument("unknown major \"" + major + "\"");
  }
  return it->second;
}

Tensor fused_features(const Tensor& x, const ModelParams& params,
                      const ModelConfig& cfg) {
  std::vector<Tensor> parts;
  // enabled_branches is an ordered set; concat order is P, R, D
  for (Branch b : cfg.enabled_branches) {
    parts.push_back(branch_forward(x, b, params, cfg));
  }
  return parts.size() == 1 ? parts[0] : concat(parts);
}

}  // namespace

Tensor embed(const Tensor& x, const std::string& major,
             const ModelParams& params, const ModelConfig& cfg) {
  const HeadParams& head = head_for(major, params);
  Tensor z = fused_features(x, params, cfg);
  Tensor h1 = relu(affine(z, head.w1, head.b1));
  return relu(affine(h1, head.w2, head.b2));
}

Tensor model_forward(const Tensor& x, const std::string& major,
                     const ModelParams& params, const ModelConfig& cfg) {
  const HeadParams& head = head_for(major, params);
  Tensor h2 = embed(x, major, params, cfg);
  return affine(h2, head.w3, head.b3);
}

AttentionExport export_attention(const std::vector<Tensor>& batch,
                                 const ModelParams& params,
                                 const ModelConfig& cfg) {
  if (batch.empty()) {
    throw std::invalid_argument("export_attention: empty batch");
  }
  if (!cfg.attention_enabled) {
    throw std::invalid_argument(
        "export_attention: attention is disabled in this model");
  }
  NoGradGuard no_grad;
  AttentionExport out;
  out.dates.assign(cfg.n_d, 0.0);
  out.slots.assign(cfg.n_t, 0.0);
  out.locations.assign(cfg.n_l, 0.0);
  auto first_block_attention = [&](const Tensor& x, Branch b,
                                   const std::set<int>& squeeze) {
    const BlockParams& blk = params.branch(b).blocks.front();
    Tensor g = b == Branch::D
                   ? relu(depthwise_conv2d_same(x, blk.kernels, blk.bias))
                   : relu(conv2d_same(x, blk.kernels, blk.bias));
    return attention_forward(mean_over_axes(g, squeeze), blk.attention);
  };
  for (const Tensor& x : batch) {
    check_input_shape(x, cfg);
    Tensor ar = first_block_attention(x, Branch::P, {1, 2});
    Tensor ac = first_block_attention(x, Branch::R, {0, 2});
    Tensor ad = first_block_attention(x, Branch::D, {0, 1});
    for (int i = 0; i < cfg.n_d; ++i) out.dates[i] += ar(i);
    for (int j = 0; j < cfg.n_t; ++j) out.slots[j] += ac(j);
    for (int k = 0; k < cfg.n_l; ++k) out.locations[k] += ad(k);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& v : out.dates) v *= inv;
  for (auto& v : out.slots) v *= inv;
  for (auto& v : out.locations) v *= inv;
  return out;
}

namespace {

nlohmann::json tensor_to_json(const Tensor& t) {
  nlohmann::json j;
  j["shape"] = t.shape();
  j["data"] = t.data();
  return j;
}

Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor::from_data(j.at("shape").get<Shape>(),
                           j.at("data").get<std::vector<double>>(), true);
}

nlohmann::json block_to_json(const BlockParams& b) {
  nlohmann::json j;
  j["kernels"] = tensor_to_json(b.kernels);
  j["bias"] = tensor_to_json(b.bias);
  j["att_w1"] = tensor_to_json(b.attention.w1);
  j["att_b1"] = tensor_to_json(b.attention.b1);
  j["att_w2"] = tensor_to_json(b.attention.w2);
  j["att_b2"] = tensor_to_json(b.attention.b2);
  return j;
}

BlockParams block_from_json(const nlohmann::json& j) {
  BlockParams b;
  b.kernels = tensor_from_json(j.at("kernels"));
  b.bias = tensor_from_json(j.at("bias"));
  b.attention.w1 = tensor_from_json(j.at("att_w1"));
  b.attention.b1 = tensor_from_json(j.at("att_b1"));
  b.attention.w2 = tensor_from_json(j.at("att_w2"));
  b.attention.b2 = tensor_from_json(j.at("att_b2"));
  return b;
}

}  // namespace

nlohmann::json Checkpoint::to_json() const {
  nlohmann::json j;
  j["format"] = "tribranch-checkpoint-v1";
  j["config"] = config.to_json();
  j["init_seed"] = init_seed;
  j["split_seed"] = split_seed;
  j["epoch"] = epoch;
  nlohmann::json p;
  for (const auto& [name, br] :
       std::initializer_list<std::pair<const char*, const BranchParams*>>{
           {"persistence", &params.persistence},
           {"regularity", &params.regularity},
           {"distribution", &params.distribution}}) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& blk : br->blocks) blocks.push_back(block_to_json(blk));
    p[name] = std::move(blocks);
  }
  nlohmann::json heads;
  for (const auto& [major, h] : params.heads) {
    nlohmann::json hj;
    hj["w1"] = tensor_to_json(h.w1);
    hj["b1"] = tensor_to_json(h.b1);
    hj["w2"] = tensor_to_json(h.w2);
    hj["b2"] = tensor_to_json(h.b2);
    hj["w3"] = tensor_to_json(h.w3);
    hj["b3"] = tensor_to_json(h.b3);
    heads[major] = std::move(hj);
  }
  p["heads"] = std::move(heads);
  j["params"] = std::move(p);
  return j;
}

Checkpoint Checkpoint::from_json(const nlohmann::json& j) {
  Checkpoint ck;
  ck.config = ModelConfig::from_json(j.at("config"));
  ck.init_seed = j.at("init_seed").get<std::uint64_t>();
  ck.split_seed = j.at("split_seed").get<std::uint64_t>();
  ck.epoch = j.at("epoch").get<int>();
  const auto& p = j.at("params");
  for (const auto& [name, br] :
       std::initializer_list<std::pair<const char*, BranchParams*>>{
           {"persistence", &ck.params.persistence},
           {"regularity", &ck.params.regularity},
           {"distribution", &ck.params.distribution}}) {
    for (const auto& bj : p.at(name)) br->blocks.push_back(block_from_json(bj));
  }
  for (const auto& [major, hj] : p.at("heads").items()) {
    HeadParams h;
    h.w1 = tensor_from_json(hj.at("w1"));
    h.b1 = tensor_from_json(hj.at("b1"));
    h.w2 = tensor_from_json(hj.at("w2"));
    h.b2 = tensor_from_json(hj.at("b2"));
    h.w3 = tensor_from_json(hj.at("w3"));
    h.b3 = tensor_from_json(hj.at("b3"));
    ck.params.heads[major] = std::move(h);
  }
  return ck;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json().dump() << "\n";
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  in >> j;
  return from_json(j);
}

}  // namespace tribranch
