#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "test_util.hpp"
#include "tribranch/model.hpp"

using namespace tribranch;

namespace {

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.n_d = 8;
  cfg.n_t = 6;
  cfg.n_l = 3;
  cfg.kernel_size = 3;
  cfg.reduction_ratio = 4;
  cfg.blocks = 2;
  cfg.fusion_hidden1 = 8;
  cfg.fusion_hidden2 = 4;
  cfg.pool_d = 2;
  cfg.pool_t = 2;
  cfg.majors = {"cs", "ee"};
  return cfg;
}

BlockParams identity_block(const ModelConfig& cfg, Branch b) {
  const int s = cfg.kernel_size, L = cfg.n_l;
  BlockParams blk;
  if (b == Branch::D) {
    std::vector<double> k(static_cast<std::size_t>(L) * s * s, 0.0);
    for (int c = 0; c < L; ++c) {
      k[(static_cast<std::size_t>(c) * s + s / 2) * s + s / 2] = 1.0;
    }
    blk.kernels = Tensor::from_data({L, s, s}, std::move(k), true);
  } else {
    const int kh = b == Branch::P ? 1 : s;
    const int kw = b == Branch::P ? s : 1;
    std::vector<double> k(static_cast<std::size_t>(L) * kh * kw * L, 0.0);
    for (int c = 0; c < L; ++c) {
      k[((static_cast<std::size_t>(c) * kh + kh / 2) * kw + kw / 2) * L + c] =
          1.0;
    }
    blk.kernels = Tensor::from_data({L, kh, kw, L}, std::move(k), true);
  }
  blk.bias = Tensor::zeros({L}, true);
  return blk;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("branch parsing") {
  CHECK(parse_branches("PRD") == std::set<Branch>{Branch::P, Branch::R, Branch::D});
  CHECK(parse_branches("dp") == std::set<Branch>{Branch::P, Branch::D});
  CHECK(branches_to_string({Branch::D, Branch::P}) == "PD");
  CHECK(branch_name(Branch::R) == "R");
  CHECK_THROWS_AS(parse_branches("PX"), std::invalid_argument);
  CHECK_THROWS_AS(parse_branches(""), std::invalid_argument);
}

TEST_CASE("config validation and derived sizes") {
  ModelConfig cfg;
  cfg.majors = {"cs"};
  cfg.validate();
  CHECK(cfg.attention_hidden(30) == 8);
  CHECK(cfg.attention_hidden(18) == 5);
  CHECK(cfg.attention_hidden(3) == 1);
  CHECK(cfg.branch_output_len(Branch::P) == 360);
  CHECK(cfg.branch_output_len(Branch::R) == 216);
  CHECK(cfg.branch_output_len(Branch::D) == 6 * 6 * 12);
  CHECK(cfg.fusion_input_len() == 360 + 216 + 432);

  cfg.enabled_branches = {Branch::P, Branch::D};
  CHECK(cfg.fusion_input_len() == 360 + 432);

  ModelConfig bad = cfg;
  bad.kernel_size = 2;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.pool_d = 31;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.majors.clear();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.blocks = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("config json round trip") {
  ModelConfig cfg = toy_config();
  cfg.attention_enabled = false;
  cfg.enabled_branches = {Branch::P, Branch::D};
  ModelConfig back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.n_d == cfg.n_d);
  CHECK(back.kernel_size == cfg.kernel_size);
  CHECK(back.fusion_hidden2 == cfg.fusion_hidden2);
  CHECK(back.majors == cfg.majors);
  CHECK(back.attention_enabled == false);
  CHECK(back.enabled_branches == cfg.enabled_branches);
}

TEST_CASE("identity blocks are the identity on nonnegative input") {
  ModelConfig cfg = toy_config();
  cfg.attention_enabled = false;
  auto rng = test_util::make_rng(3);
  Tensor x = test_util::random_tensor({cfg.n_d, cfg.n_t, cfg.n_l}, rng, false,
                                      0.0, 1.0);
  Tensor p = persistence_block(x, identity_block(cfg, Branch::P), cfg);
  Tensor r = regularity_block(x, identity_block(cfg, Branch::R), cfg);
  Tensor d = distribution_block(x, identity_block(cfg, Branch::D), cfg);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(p.raw()[i] == doctest::Approx(x.raw()[i]).epsilon(1e-14));
    CHECK(r.raw()[i] == doctest::Approx(x.raw()[i]).epsilon(1e-14));
    CHECK(d.raw()[i] == doctest::Approx(x.raw()[i]).epsilon(1e-14));
  }
  // a chain of identity blocks stays the identity
  Tensor f = x;
  for (int i = 0; i < 3; ++i) {
    f = persistence_block(f, identity_block(cfg, Branch::P), cfg);
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(f.raw()[i] == doctest::Approx(x.raw()[i]).epsilon(1e-14));
  }
}

TEST_CASE("blocks preserve shape with random parameters") {
  ModelConfig cfg = toy_config();
  ModelParams params = init_params(cfg, 7);
  auto rng = test_util::make_rng(4);
  Tensor x = test_util::random_tensor({cfg.n_d, cfg.n_t, cfg.n_l}, rng);
  Tensor p = persistence_block(x, params.persistence.blocks[0], cfg);
  Tensor r = regularity_block(x, params.regularity.blocks[0], cfg);
  Tensor d = distribution_block(x, params.distribution.blocks[0], cfg);
  const Shape want{cfg.n_d, cfg.n_t, cfg.n_l};
  CHECK(p.shape() == want);
  CHECK(r.shape() == want);
  CHECK(d.shape() == want);

  Tensor bad = Tensor::zeros({cfg.n_d, cfg.n_t + 1, cfg.n_l});
  CHECK_THROWS_AS(persistence_block(bad, params.persistence.blocks[0], cfg),
                  std::invalid_argument);
}

TEST_CASE("block output decomposes into conv, relu, and axis scaling") {
  ModelConfig cfg = toy_config();
  ModelParams params = init_params(cfg, 11);
  auto rng = test_util::make_rng(5);
  Tensor x = test_util::random_tensor({cfg.n_d, cfg.n_t, cfg.n_l}, rng);

  struct Case {
    Branch branch;
    std::set<int> squeeze;
    int axis;
  };
  for (const Case& c : {Case{Branch::P, {1, 2}, 0}, Case{Branch::R, {0, 2}, 1},
                        Case{Branch::D, {0, 1}, 2}}) {
    const BlockParams& blk = params.branch(c.branch).blocks[0];
    Tensor g = c.branch == Branch::D
                   ? relu(depthwise_conv2d_same(x, blk.kernels, blk.bias))
                   : relu(conv2d_same(x, blk.kernels, blk.bias));
    // hand-computed descriptor: mean of g over the squeezed axes
    const int axis_len = c.axis == 0 ? cfg.n_d : c.axis == 1 ? cfg.n_t : cfg.n_l;
    std::vector<double> desc(axis_len, 0.0);
    for (int i = 0; i < cfg.n_d; ++i)
      for (int j = 0; j < cfg.n_t; ++j)
        for (int k = 0; k < cfg.n_l; ++k) {
          const int idx = c.axis == 0 ? i : c.axis == 1 ? j : k;
          desc[idx] += g(i, j, k);
        }
    const double denom = static_cast<double>(cfg.n_d) * cfg.n_t * cfg.n_l /
                         static_cast<double>(axis_len);
    for (auto& v : desc) v /= denom;
    Tensor a =
        attention_forward(Tensor::from_data({axis_len}, desc), blk.attention);

    Tensor out = c.branch == Branch::P ? persistence_block(x, blk, cfg)
                 : c.branch == Branch::R ? regularity_block(x, blk, cfg)
                                         : distribution_block(x, blk, cfg);
    for (int i = 0; i < cfg.n_d; ++i)
      for (int j = 0; j < cfg.n_t; ++j)
        for (int k = 0; k < cfg.n_l; ++k) {
          const int idx = c.axis == 0 ? i : c.axis == 1 ? j : k;
          CHECK(out(i, j, k) ==
                doctest::Approx(a(idx) * g(i, j, k)).epsilon(1e-12));
        }
  }
}

TEST_CASE("attention vectors stay in the open unit interval") {
  ModelConfig cfg = toy_config();
  ModelParams params = init_params(cfg, 13);
  Tensor zero = Tensor::zeros({cfg.n_d, cfg.n_t, cfg.n_l});
  const BlockParams& blk = params.persistence.blocks[0];
  Tensor g = relu(conv2d_same(zero, blk.kernels, blk.bias));
  Tensor a = attention_forward(mean_over_axes(g, {1, 2}), blk.attention);
  for (int i = 0; i < cfg.n_d; ++i) {
    CHECK(a(i) > 0.0);
    CHECK(a(i) < 1.0);
  }
}

TEST_CASE("branch_forward output lengths and zero propagation") {
  ModelConfig cfg = toy_config();
  ModelParams params = init_params(cfg, 17);
  // zero biases are the init default, so a zero input stays zero
  Tensor zero = Tensor::zeros({cfg.n_d, cfg.n_t, cfg.n_l});
  Tensor p = branch_forward(zero, Branch::P, params, cfg);
  Tensor r = branch_forward(zero, Branch::R, params, cfg);
  Tensor d = branch_forward(zero, Branch::D, params, cfg);
  CHECK(p.shape() == Shape{cfg.n_d * cfg.n_l});
  CHECK(r.shape() == Shape{cfg.n_t * cfg.n_l});
  CHECK(d.shape() ==
        Shape{(cfg.n_d / cfg.pool_d) * (cfg.n_t / cfg.pool_t) * cfg.n_l});
  for (double v : p.raw()) CHECK(v == 0.0);
  for (double v : r.raw()) CHECK(v == 0.0);
  for (double v : d.raw()) CHECK(v == 0.0);
}

TEST_CASE("single identity P block reduces to a max oracle") {
  ModelConfig cfg = toy_config();
  cfg.blocks = 1;
  cfg.attention_enabled = false;
  ModelParams params = init_params(cfg, 19);
  params.persistence.blocks[0] = identity_block(cfg, Branch::P);

  std::mt19937_64 rng(21);
  std::vector<double> data(static_cast<std::size_t>(cfg.n_d) * cfg.n_t * cfg.n_l);
  for (auto& v : data) v = (rng() % 3 == 0) ? 1.0 : 0.0;  // binary input
  Tensor x = Tensor::from_data({cfg.n_d, cfg.n_t, cfg.n_l}, data);

  Tensor out = branch_forward(x, Branch::P, params, cfg);
  for (int i = 0; i < cfg.n_d; ++i) {
    for (int k = 0; k < cfg.n_l; ++k) {
      double want = 0.0;
      for (int j = 0; j < cfg.n_t; ++j) want = std::max(want, x(i, j, k));
      CHECK(out(i * cfg.n_l + k) == want);
    }
  }
}

TEST_CASE("D-branch pre-pooling activations are channel-local") {
  ModelConfig cfg = toy_config();
  cfg.attention_enabled = false;
  ModelParams params = init_params(cfg, 23);
  auto rng = test_util::make_rng(29);
  Tensor x = test_util::random_tensor({cfg.n_d, cfg.n_t, cfg.n_l}, rng);

  auto chain = [&](const Tensor& in) {
    Tensor f = in;
    for (const auto& blk : params.distribution.blocks) {
      f = distribution_block(f, blk, cfg);
    }
    return f;
  };
  Tensor base = chain(x);

  const int perturbed = 1;
  Tensor x2 = Tensor::from_data(x.shape(), x.data());
  for (int i = 0; i < cfg.n_d; ++i)
    for (int j = 0; j < cfg.n_t; ++j)
      x2.raw()[(static_cast<std::size_t>(i) * cfg.n_t + j) * cfg.n_l +
               perturbed] += 0.37;
  Tensor bumped = chain(x2);

  bool changed = false;
  for (int i = 0; i < cfg.n_d; ++i)
    for (int j = 0; j < cfg.n_t; ++j)
      for (int k = 0; k < cfg.n_l; ++k) {
        if (k == perturbed) {
          changed = changed || bumped(i, j, k) != base(i, j, k);
        } else {
          CHECK(bumped(i, j, k) == base(i, j, k));
        }
      }
  CHECK(changed);

  // zeroed channel stays zero through the block (zero bias default)
  Tensor x3 = Tensor::from_data(x.shape(), x.data());
  for (int i = 0; i < cfg.n_d; ++i)
    for (int j = 0; j < cfg.n_t; ++j)
      x3.raw()[(static_cast<std::size_t>(i) * cfg.n_t + j) * cfg.n_l] = 0.0;
  Tensor z = distribution_block(x3, params.distribution.blocks[0], cfg);
  for (int i = 0; i < cfg.n_d; ++i)
    for (int j = 0; j < cfg.n_t; ++j) CHECK(z(i, j, 0) == 0.0);
}

TEST_CASE("model_forward and embed basics") {
  ModelConfig cfg = toy_config();
  ModelParams params = init_params(cfg, 31);
  auto rng = test_util::make_rng(37);
  Tensor x = test_util::random_tensor({cfg.n_d, cfg.n_t, cfg.n_l}, rng, false,
                                      0.0, 1.0);

  Tensor e = embed(x, "cs", params, cfg);
  CHECK(e.shape() == Shape{cfg.fusion_hidden2});
  Tensor f = model_forward(x, "cs", params, cfg);
  CHECK(f.shape() == Shape{1});
  // score is exactly the output layer applied to the embedding
  Tensor via_embed = affine(e, params.heads.at("cs").w3, params.heads.at("cs").b3);
  CHECK(f.value() == via_embed.value());

  // purity: same input, bit-identical score
  CHECK(model_forward(x, "cs", params, cfg).value() == f.value());
  CHECK_THROWS_AS(model_forward(x, "physics", params, cfg),
                  std::invalid_argument);

  // zero parameters give a zero score and embedding
  ModelParams zeros = params.deep_copy();
  for (auto& t : zeros.all_tensors()) {
    for (auto& v : t.raw()) v = 0.0;
  }
  CHECK(model_forward(x, "cs", zeros, cfg).value() == 0.0);
  for (double v : embed(x, "cs", zeros, cfg).raw()) CHECK(v == 0.0);
}

TEST_CASE("default config embedding is 256 wide") {
  ModelConfig cfg;
  cfg.majors = {"cs"};
  ModelParams params = init_params(cfg, 1);
  Tensor x = Tensor::zeros({cfg.n_d, cfg.n_t, cfg.n_l});
  CHECK(embed(x, "cs", params, cfg).shape() == Shape{256});
}

TEST_CASE("swapping two majors' heads swaps their scores exactly") {
  ModelConfig cfg = toy_config();
  ModelParams params = init_params(cfg, 41);
  auto rng = test_util::make_rng(43);
  Tensor x = test_util::random_tensor({cfg.n_d, cfg.n_t, cfg.n_l}, rng);

  const double f_cs = model_forward(x, "cs", params, cfg).value();
  const double f_ee = model_forward(x, "ee", params, cfg).value();
  CHECK(f_cs != f_ee);

  ModelParams swapped = params.deep_copy();
  std::swap(swapped.heads.at("cs"), swapped.heads.at("ee"));
  CHECK(model_forward(x, "cs", swapped, cfg).value() == f_ee);
  CHECK(model_forward(x, "ee", swapped, cfg).value() == f_cs);
}

TEST_CASE("single-branch ablation uses only that branch") {
  ModelConfig cfg = toy_config();
  cfg.enabled_branches = {Branch::P};
  ModelParams params = init_params(cfg, 47);
  CHECK(params.heads.at("cs").w1.shape() ==
        Shape{cfg.fusion_hidden1, cfg.n_d * cfg.n_l});
  auto rng = test_util::make_rng(53);
  Tensor x = test_util::random_tensor({cfg.n_d, cfg.n_t, cfg.n_l}, rng);
  const double base = model_forward(x, "cs", params, cfg).value();

  // mangling R and D parameters cannot change a P-only model's score
  ModelParams mangled = params.deep_copy();
  for (auto& blk : mangled.regularity.blocks)
    for (auto& v : blk.kernels.raw()) v += 100.0;
  for (auto& blk : mangled.distribution.blocks)
    for (auto& v : blk.kernels.raw()) v += 100.0;
  CHECK(model_forward(x, "cs", mangled, cfg).value() == base);
}

TEST_CASE("init_params determinism and bounds") {
  ModelConfig cfg;
  cfg.majors = {"cs"};
  ModelParams a = init_params(cfg, 99);
  ModelParams b = init_params(cfg, 99);
  ModelParams c = init_params(cfg, 100);

  auto ta = a.all_tensors(), tb = b.all_tensors(), tc = c.all_tensors();
  REQUIRE(ta.size() == tb.size());
  bool all_same = true, any_diff = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    all_same = all_same && same_bits(ta[i], tb[i]);
    any_diff = any_diff || !same_bits(ta[i], tc[i]);
  }
  CHECK(all_same);
  CHECK(any_diff);

  // 1 x 3 kernels over 12 channels: fan_in 36, bound sqrt(6/36)
  const double bound = std::sqrt(6.0 / 36.0);
  CHECK(a.persistence.blocks[0].kernels.shape() == Shape{12, 1, 3, 12});
  for (double v : a.persistence.blocks[0].kernels.raw()) {
    CHECK(std::abs(v) <= bound);
  }
  for (double v : a.persistence.blocks[0].bias.raw()) CHECK(v == 0.0);
  for (double v : a.heads.at("cs").b1.raw()) CHECK(v == 0.0);
  const double head_bound = std::sqrt(6.0 / cfg.fusion_input_len());
  for (double v : a.heads.at("cs").w1.raw()) {
    CHECK(std::abs(v) <= head_bound);
  }
}

TEST_CASE("export_attention averages per-student vectors") {
  ModelConfig cfg = toy_config();
  ModelParams params = init_params(cfg, 59);
  auto rng = test_util::make_rng(61);
  Tensor x1 = test_util::random_tensor({cfg.n_d, cfg.n_t, cfg.n_l}, rng, false,
                                       0.0, 1.0);
  Tensor x2 = test_util::random_tensor({cfg.n_d, cfg.n_t, cfg.n_l}, rng, false,
                                       0.0, 1.0);

  AttentionExport e1 = export_attention({x1}, params, cfg);
  AttentionExport e2 = export_attention({x2}, params, cfg);
  AttentionExport both = export_attention({x1, x2}, params, cfg);
  CHECK(e1.dates.size() == static_cast<std::size_t>(cfg.n_d));
  CHECK(e1.slots.size() == static_cast<std::size_t>(cfg.n_t));
  CHECK(e1.locations.size() == static_cast<std::size_t>(cfg.n_l));
  for (double v : e1.dates) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  for (int i = 0; i < cfg.n_d; ++i) {
    CHECK(both.dates[i] ==
          doctest::Approx(0.5 * (e1.dates[i] + e2.dates[i])).epsilon(1e-14));
  }
  for (int k = 0; k < cfg.n_l; ++k) {
    CHECK(both.locations[k] ==
          doctest::Approx(0.5 * (e1.locations[k] + e2.locations[k]))
              .epsilon(1e-14));
  }

  CHECK_THROWS_AS(export_attention({}, params, cfg), std::invalid_argument);
  ModelConfig off = cfg;
  off.attention_enabled = false;
  CHECK_THROWS_AS(export_attention({x1}, params, off), std::invalid_argument);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  ModelConfig cfg = toy_config();
  Checkpoint ck;
  ck.config = cfg;
  ck.init_seed = 12345;
  ck.split_seed = 678;
  ck.epoch = 17;
  ck.params = init_params(cfg, 12345);

  const std::string path = "/tmp/tribranch_test_ckpt.json";
  ck.save(path);
  Checkpoint back = Checkpoint::load(path);
  CHECK(back.init_seed == 12345);
  CHECK(back.split_seed == 678);
  CHECK(back.epoch == 17);
  CHECK(back.config.n_d == cfg.n_d);
  CHECK(back.config.majors == cfg.majors);

  auto orig = ck.params.all_tensors();
  auto loaded = back.params.all_tensors();
  REQUIRE(orig.size() == loaded.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    CHECK(same_bits(orig[i], loaded[i]));
  }

  // a second save of the loaded checkpoint is byte-identical
  const std::string path2 = "/tmp/tribranch_test_ckpt2.json";
  back.save(path2);
  std::ifstream f1(path), f2(path2);
  std::string s1((std::istreambuf_iterator<char>(f1)),
                 std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)),
                 std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("end-to-end score gradient matches finite differences") {
  ModelConfig cfg = toy_config();
  ModelParams params = init_params(cfg, 67);
  auto rng = test_util::make_rng(71);
  Tensor x = test_util::random_tensor({cfg.n_d, cfg.n_t, cfg.n_l}, rng, false,
                                      0.0, 1.0);
  std::vector<Tensor> inputs = params.all_tensors();
  const double err = test_util::max_grad_rel_error(
      inputs, [&] { return model_forward(x, "cs", params, cfg); });
  CHECK(err < 1e-4);
}
