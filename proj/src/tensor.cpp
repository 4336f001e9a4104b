#include "tribranch/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace tribranch {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

void check_shape(const Shape& s) {
  // rank 4 is admitted solely for conv kernel stacks [C_out,kh,kw,C]
  if (s.empty() || s.size() > 4) {
    throw std::invalid_argument("tensor rank must be 1..4, got rank " +
                                std::to_string(s.size()));
  }
  for (int d : s) {
    if (d <= 0) {
      throw std::invalid_argument("tensor dimensions must be positive, got " +
                                  shape_str(s));
    }
  }
}

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<const Eigen::VectorXd>;
using MutVec = Eigen::Map<Eigen::VectorXd>;

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::vector<double>& TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  auto node = std::make_shared<TensorNode>();
  node->data.assign(shape_numel(shape), 0.0);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.raw().begin(), t.raw().end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

double Tensor::value() const {
  if (size() != 1) {
    throw std::invalid_argument("value() requires a scalar tensor, got shape " +
                                shape_str(shape()));
  }
  return node_->data[0];
}

double Tensor::operator()(int i) const { return node_->data[i]; }

double Tensor::operator()(int i, int j) const {
  return node_->data[static_cast<std::size_t>(i) * node_->shape[1] + j];
}

double Tensor::operator()(int i, int j, int k) const {
  const auto& s = node_->shape;
  return node_->data[(static_cast<std::size_t>(i) * s[1] + j) * s[2] + k];
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor make_op_output(Shape shape, std::vector<double> data,
                      std::vector<Tensor> inputs,
                      std::function<void(TensorNode&)> backward_fn) {
  Tensor out = Tensor::from_data(std::move(shape), std::move(data));
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) {
      if (t.requires_grad()) {
        needs_grad = true;
        break;
      }
    }
  }
  if (needs_grad) {
    out.set_requires_grad(true);
    auto* node = out.node();
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return out;
}

void Tensor::backward(double seed) const {
  if (size() != 1) {
    throw std::invalid_argument(
        "backward() is only defined on scalar outputs, got shape " +
        shape_str(shape()));
  }
  // Iterative post-order DFS yields a topological order of the graph.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode* p = f.node->parents[f.next_parent++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  node_->ensure_grad()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op_output(a.shape(), std::move(out), {a, b},
                        [](TensorNode& n) {
                          const auto& g = n.grad;
                          for (int p = 0; p < 2; ++p) {
                            auto& pg = n.parents[p]->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              pg[i] += g[i];
                          }
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op_output(a.shape(), std::move(out), {a, b},
                        [](TensorNode& n) {
                          const auto& g = n.grad;
                          auto& ga = n.parents[0]->ensure_grad();
                          auto& gb = n.parents[1]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            ga[i] += g[i];
                            gb[i] -= g[i];
                          }
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op_output(a.shape(), std::move(out), {a, b},
                        [](TensorNode& n) {
                          const auto& g = n.grad;
                          const auto& da = n.parents[0]->data;
                          const auto& db = n.parents[1]->data;
                          auto& ga = n.parents[0]->ensure_grad();
                          auto& gb = n.parents[1]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            ga[i] += g[i] * db[i];
                            gb[i] += g[i] * da[i];
                          }
                        });
}

Tensor scalar_mul(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  return make_op_output(a.shape(), std::move(out), {a},
                        [c](TensorNode& n) {
                          auto& ga = n.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < n.grad.size(); ++i)
                            ga[i] += n.grad[i] * c;
                        });
}

Tensor scalar_add(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  return make_op_output(a.shape(), std::move(out), {a},
                        [](TensorNode& n) {
                          auto& ga = n.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < n.grad.size(); ++i)
                            ga[i] += n.grad[i];
                        });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return make_op_output(a.shape(), std::move(out), {a},
                        [](TensorNode& n) {
                          // subgradient at 0 is 0
                          const auto& x = n.parents[0]->data;
                          auto& ga = n.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < n.grad.size(); ++i)
                            if (x[i] > 0.0) ga[i] += n.grad[i];
                        });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
  std::vector<double> y = out;
  return make_op_output(a.shape(), std::move(out), {a},
                        [y = std::move(y)](TensorNode& n) {
                          auto& ga = n.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < n.grad.size(); ++i)
                            ga[i] += n.grad[i] * y[i] * (1.0 - y[i]);
                        });
}

Tensor mean_over_axes(const Tensor& a, const std::set<int>& axes) {
  const int rank = a.rank();
  if (axes.empty()) throw std::invalid_argument("mean_over_axes: empty axis set");
  for (int ax : axes) {
    if (ax < 0 || ax >= rank) {
      throw std::invalid_argument("mean_over_axes: axis " + std::to_string(ax) +
                                  " invalid for rank " + std::to_string(rank));
    }
  }
  Shape in_shape = a.shape();
  Shape out_shape;
  for (int i = 0; i < rank; ++i)
    if (!axes.count(i)) out_shape.push_back(in_shape[i]);
  bool reduce_all = out_shape.empty();
  if (reduce_all) out_shape = {1};

  std::size_t count = 1;
  for (int ax : axes) count *= static_cast<std::size_t>(in_shape[ax]);
  const double inv = 1.0 / static_cast<double>(count);

  // Map each flat input index to its flat output index.
  std::vector<std::size_t> in_strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i)
    in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  std::vector<std::size_t> out_strides;
  {
    std::vector<std::size_t> os(out_shape.size(), 1);
    for (int i = static_cast<int>(out_shape.size()) - 2; i >= 0; --i)
      os[i] = os[i + 1] * out_shape[i + 1];
    out_strides = std::move(os);
  }
  std::vector<std::size_t> index_map(a.size());
  for (std::size_t flat = 0; flat < a.size(); ++flat) {
    std::size_t rem = flat, out_flat = 0, oi = 0;
    for (int i = 0; i < rank; ++i) {
      std::size_t idx = rem / in_strides[i];
      rem %= in_strides[i];
      if (!axes.count(i)) {
        out_flat += idx * (reduce_all ? 0 : out_strides[oi]);
        ++oi;
      }
    }
    index_map[flat] = reduce_all ? 0 : out_flat;
  }

  std::size_t out_n = shape_numel(out_shape);
  std::vector<double> out(out_n, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) out[index_map[i]] += a.data()[i];
  for (auto& v : out) v *= inv;

  return make_op_output(out_shape, std::move(out), {a},
                        [index_map = std::move(index_map), inv](TensorNode& n) {
                          auto& ga = n.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < ga.size(); ++i)
                            ga[i] += n.grad[index_map[i]] * inv;
                        });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op_output({1}, {s}, {a}, [](TensorNode& n) {
    auto& ga = n.parents[0]->ensure_grad();
    for (auto& g : ga) g += n.grad[0];
  });
}

Tensor flatten(const Tensor& a) {
  std::vector<double> out = a.data();
  return make_op_output({static_cast<int>(a.size())}, std::move(out), {a},
                        [](TensorNode& n) {
                          auto& ga = n.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < n.grad.size(); ++i)
                            ga[i] += n.grad[i];
                        });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no parts given");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 1) {
      throw std::invalid_argument("concat: all parts must be rank-1, got " +
                                  shape_str(p.shape()));
    }
    total += p.size();
  }
  std::vector<double> out;
  out.reserve(total);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_op_output({static_cast<int>(total)}, std::move(out), parts,
                        [offsets = std::move(offsets)](TensorNode& n) {
                          for (std::size_t p = 0; p < n.parents.size(); ++p) {
                            auto& pg = n.parents[p]->ensure_grad();
                            for (std::size_t i = 0; i < pg.size(); ++i)
                              pg[i] += n.grad[offsets[p] + i];
                          }
                        });
}

Tensor conv2d_same(const Tensor& input, const Tensor& kernels,
                   const Tensor& bias) {
  if (input.rank() != 3) {
    throw std::invalid_argument("conv2d_same: input must be rank-3 [D,T,C], got " +
                                shape_str(input.shape()));
  }
  if (kernels.rank() != 4) {
    throw std::invalid_argument(
        "conv2d_same: kernels must be rank-4 [C_out,kh,kw,C], got " +
        shape_str(kernels.shape()));
  }
  const int D = input.dim(0), T = input.dim(1), C = input.dim(2);
  const int Co = kernels.dim(0), kh = kernels.dim(1), kw = kernels.dim(2);
  if (kernels.dim(3) != C) {
    throw std::invalid_argument("conv2d_same: kernel input channels " +
                                std::to_string(kernels.dim(3)) +
                                " != input channels " + std::to_string(C));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw std::invalid_argument("conv2d_same: kernel size must be odd, got " +
                                std::to_string(kh) + "x" + std::to_string(kw));
  }
  if (bias.rank() != 1 || bias.dim(0) != Co) {
    throw std::invalid_argument("conv2d_same: bias length must equal C_out=" +
                                std::to_string(Co) + ", got " +
                                shape_str(bias.shape()));
  }
  const int ch = kh / 2, cw = kw / 2;
  const double* x = input.data().data();
  const double* k = kernels.data().data();
  const double* bv = bias.data().data();

  std::vector<double> out(static_cast<std::size_t>(D) * T * Co);
  for (int d = 0; d < D; ++d) {
    for (int t = 0; t < T; ++t) {
      double* yrow = out.data() + (static_cast<std::size_t>(d) * T + t) * Co;
      for (int co = 0; co < Co; ++co) {
        double acc = bv[co];
        const double* kc = k + (static_cast<std::size_t>(co) * kh * kw) * C;
        for (int i = 0; i < kh; ++i) {
          const int di = d + i - ch;
          if (di < 0 || di >= D) continue;
          for (int j = 0; j < kw; ++j) {
            const int tj = t + j - cw;
            if (tj < 0 || tj >= T) continue;
            const double* xr = x + (static_cast<std::size_t>(di) * T + tj) * C;
            const double* kr = kc + (static_cast<std::size_t>(i) * kw + j) * C;
            for (int c = 0; c < C; ++c) acc += xr[c] * kr[c];
          }
        }
        yrow[co] = acc;
      }
    }
  }

  auto backward = [D, T, C, Co, kh, kw, ch, cw](TensorNode& n) {
    const auto& g = n.grad;
    auto& in = *n.parents[0];
    auto& ker = *n.parents[1];
    auto& bi = *n.parents[2];
    const double* x = in.data.data();
    const double* k = ker.data.data();
    // skip input-gradient work when the input is a constant leaf (e.g. X)
    const bool want_gx = in.requires_grad || !in.parents.empty();
    double* gx = want_gx ? in.ensure_grad().data() : nullptr;
    double* gk = ker.ensure_grad().data();
    double* gb = bi.ensure_grad().data();
    for (int d = 0; d < D; ++d) {
      for (int t = 0; t < T; ++t) {
        const double* grow = g.data() + (static_cast<std::size_t>(d) * T + t) * Co;
        for (int co = 0; co < Co; ++co) {
          const double gv = grow[co];
          if (gv == 0.0) continue;
          gb[co] += gv;
          const double* kc = k + (static_cast<std::size_t>(co) * kh * kw) * C;
          double* gkc = gk + (static_cast<std::size_t>(co) * kh * kw) * C;
          for (int i = 0; i < kh; ++i) {
            const int di = d + i - ch;
            if (di < 0 || di >= D) continue;
            for (int j = 0; j < kw; ++j) {
              const int tj = t + j - cw;
              if (tj < 0 || tj >= T) continue;
              const std::size_t xoff = (static_cast<std::size_t>(di) * T + tj) * C;
              const std::size_t koff = (static_cast<std::size_t>(i) * kw + j) * C;
              if (want_gx) {
                for (int c = 0; c < C; ++c) {
                  gx[xoff + c] += gv * kc[koff + c];
                  gkc[koff + c] += gv * x[xoff + c];
                }
              } else {
                for (int c = 0; c < C; ++c) gkc[koff + c] += gv * x[xoff + c];
              }
            }
          }
        }
      }
    }
  };

  return make_op_output({D, T, Co}, std::move(out), {input, kernels, bias},
                        std::move(backward));
}

Tensor depthwise_conv2d_same(const Tensor& input, const Tensor& kernels,
                             const Tensor& bias) {
  if (input.rank() != 3) {
    throw std::invalid_argument(
        "depthwise_conv2d_same: input must be rank-3 [D,T,C], got " +
        shape_str(input.shape()));
  }
  if (kernels.rank() != 3) {
    throw std::invalid_argument(
        "depthwise_conv2d_same: kernels must be rank-3 [C,kh,kw], got " +
        shape_str(kernels.shape()));
  }
  const int D = input.dim(0), T = input.dim(1), C = input.dim(2);
  const int kh = kernels.dim(1), kw = kernels.dim(2);
  if (kernels.dim(0) != C) {
    throw std::invalid_argument(
        "depthwise_conv2d_same: kernel channel count " +
        std::to_string(kernels.dim(0)) + " != input channel count " +
        std::to_string(C));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw std::invalid_argument(
        "depthwise_conv2d_same: kernel size must be odd, got " +
        std::to_string(kh) + "x" + std::to_string(kw));
  }
  if (bias.rank() != 1 || bias.dim(0) != C) {
    throw std::invalid_argument(
        "depthwise_conv2d_same: bias length must equal C=" + std::to_string(C) +
        ", got " + shape_str(bias.shape()));
  }
  const int ch = kh / 2, cw = kw / 2;
  const double* x = input.data().data();
  const double* k = kernels.data().data();
  const double* bv = bias.data().data();

  std::vector<double> out(input.size());
  for (int d = 0; d < D; ++d) {
    for (int t = 0; t < T; ++t) {
      double* yrow = out.data() + (static_cast<std::size_t>(d) * T + t) * C;
      for (int c = 0; c < C; ++c) {
        double acc = bv[c];
        const double* kc = k + static_cast<std::size_t>(c) * kh * kw;
        for (int i = 0; i < kh; ++i) {
          const int di = d + i - ch;
          if (di < 0 || di >= D) continue;
          for (int j = 0; j < kw; ++j) {
            const int tj = t + j - cw;
            if (tj < 0 || tj >= T) continue;
            acc += x[(static_cast<std::size_t>(di) * T + tj) * C + c] *
                   kc[i * kw + j];
          }
        }
        yrow[c] = acc;
      }
    }
  }

  auto backward = [D, T, C, kh, kw, ch, cw](TensorNode& n) {
    const auto& g = n.grad;
    auto& in = *n.parents[0];
    auto& ker = *n.parents[1];
    auto& bi = *n.parents[2];
    const double* x = in.data.data();
    const double* k = ker.data.data();
    const bool want_gx = in.requires_grad || !in.parents.empty();
    double* gx = want_gx ? in.ensure_grad().data() : nullptr;
    double* gk = ker.ensure_grad().data();
    double* gb = bi.ensure_grad().data();
    for (int d = 0; d < D; ++d) {
      for (int t = 0; t < T; ++t) {
        const double* grow = g.data() + (static_cast<std::size_t>(d) * T + t) * C;
        for (int c = 0; c < C; ++c) {
          const double gv = grow[c];
          if (gv == 0.0) continue;
          gb[c] += gv;
          const double* kc = k + static_cast<std::size_t>(c) * kh * kw;
          double* gkc = gk + static_cast<std::size_t>(c) * kh * kw;
          for (int i = 0; i < kh; ++i) {
            const int di = d + i - ch;
            if (di < 0 || di >= D) continue;
            for (int j = 0; j < kw; ++j) {
              const int tj = t + j - cw;
              if (tj < 0 || tj >= T) continue;
              const std::size_t xoff =
                  (static_cast<std::size_t>(di) * T + tj) * C + c;
              if (want_gx) gx[xoff] += gv * kc[i * kw + j];
              gkc[i * kw + j] += gv * x[xoff];
            }
          }
        }
      }
    }
  };

  return make_op_output({D, T, C}, std::move(out), {input, kernels, bias},
                        std::move(backward));
}

Tensor broadcast_mul(const Tensor& feature, const Tensor& weights, int axis) {
  if (feature.rank() != 3) {
    throw std::invalid_argument(
        "broadcast_mul: feature must be rank-3, got " +
        shape_str(feature.shape()));
  }
  if (weights.rank() != 1) {
    throw std::invalid_argument("broadcast_mul: weights must be rank-1, got " +
                                shape_str(weights.shape()));
  }
  if (axis < 0 || axis > 2) {
    throw std::invalid_argument("broadcast_mul: axis " + std::to_string(axis) +
                                " invalid for rank-3 feature");
  }
  if (weights.dim(0) != feature.dim(axis)) {
    throw std::invalid_argument(
        "broadcast_mul: weight length " + std::to_string(weights.dim(0)) +
        " != feature axis " + std::to_string(axis) + " extent " +
        std::to_string(feature.dim(axis)));
  }
  const int D = feature.dim(0), T = feature.dim(1), C = feature.dim(2);
  const double* x = feature.data().data();
  const double* w = weights.data().data();
  std::vector<double> out(feature.size());
  std::size_t p = 0;
  for (int d = 0; d < D; ++d)
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < C; ++c, ++p) {
        const int wi = axis == 0 ? d : (axis == 1 ? t : c);
        out[p] = x[p] * w[wi];
      }

  auto backward = [D, T, C, axis](TensorNode& n) {
    const auto& g = n.grad;
    auto& f = *n.parents[0];
    auto& wn = *n.parents[1];
    const double* x = f.data.data();
    const double* w = wn.data.data();
    double* gx = f.ensure_grad().data();
    double* gw = wn.ensure_grad().data();
    std::size_t p = 0;
    for (int d = 0; d < D; ++d)
      for (int t = 0; t < T; ++t)
        for (int c = 0; c < C; ++c, ++p) {
          const int wi = axis == 0 ? d : (axis == 1 ? t : c);
          gx[p] += g[p] * w[wi];
          gw[wi] += g[p] * x[p];
        }
  };

  return make_op_output(feature.shape(), std::move(out), {feature, weights},
                        std::move(backward));
}

Tensor affine(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 1 || weight.rank() != 2 || bias.rank() != 1) {
    throw std::invalid_argument("affine: expected input rank-1, weight rank-2, "
                                "bias rank-1, got " +
                                shape_str(input.shape()) + ", " +
                                shape_str(weight.shape()) + ", " +
                                shape_str(bias.shape()));
  }
  const int m = weight.dim(0), nn = weight.dim(1);
  if (input.dim(0) != nn) {
    throw std::invalid_argument("affine: weight inner dimension " +
                                std::to_string(nn) + " != input length " +
                                std::to_string(input.dim(0)));
  }
  if (bias.dim(0) != m) {
    throw std::invalid_argument("affine: bias length " +
                                std::to_string(bias.dim(0)) +
                                " != weight rows " + std::to_string(m));
  }
  std::vector<double> out(m);
  {
    MapMat W(weight.data().data(), m, nn);
    MapVec x(input.data().data(), nn);
    MapVec b(bias.data().data(), m);
    MutVec y(out.data(), m);
    y.noalias() = W * x + b;
  }

  auto backward = [m, nn](TensorNode& n) {
    auto& in = *n.parents[0];
    auto& wt = *n.parents[1];
    auto& bi = *n.parents[2];
    MapVec g(n.grad.data(), m);
    MapMat W(wt.data.data(), m, nn);
    MapVec x(in.data.data(), nn);
    MutVec gx(in.ensure_grad().data(), nn);
    Eigen::Map<RowMat> gW(wt.ensure_grad().data(), m, nn);
    MutVec gb(bi.ensure_grad().data(), m);
    gx.noalias() += W.transpose() * g;
    gW.noalias() += g * x.transpose();
    gb.noalias() += g;
  };

  return make_op_output({m}, std::move(out), {input, weight, bias},
                        std::move(backward));
}

Tensor max_over_axis(const Tensor& a, int axis) {
  const int rank = a.rank();
  if (axis < 0 || axis >= rank) {
    throw std::invalid_argument("max_over_axis: axis " + std::to_string(axis) +
                                " invalid for rank " + std::to_string(rank));
  }
  Shape in_shape = a.shape();
  Shape out_shape;
  for (int i = 0; i < rank; ++i)
    if (i != axis) out_shape.push_back(in_shape[i]);
  if (out_shape.empty()) out_shape = {1};

  std::vector<std::size_t> strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i) strides[i] = strides[i + 1] * in_shape[i + 1];

  const std::size_t out_n = shape_numel(out_shape);
  std::vector<double> out(out_n);
  std::vector<std::size_t> argmax(out_n);
  // iterate output coordinates, scan along the reduced axis; the first
  // maximal element wins ties
  std::size_t oi = 0;
  std::vector<int> coord(rank, 0);
  auto scan = [&](auto&& self, int dim_i) -> void {
    if (dim_i == rank) {
      std::size_t base = 0;
      for (int i = 0; i < rank; ++i) base += coord[i] * strides[i];
      double best = a.data()[base];
      std::size_t best_at = base;
      for (int v = 1; v < in_shape[axis]; ++v) {
        const std::size_t idx = base + v * strides[axis];
        if (a.data()[idx] > best) {
          best = a.data()[idx];
          best_at = idx;
        }
      }
      out[oi] = best;
      argmax[oi] = best_at;
      ++oi;
      return;
    }
    if (dim_i == axis) {
      self(self, dim_i + 1);
      return;
    }
    for (coord[dim_i] = 0; coord[dim_i] < in_shape[dim_i]; ++coord[dim_i])
      self(self, dim_i + 1);
  };
  scan(scan, 0);

  return make_op_output(out_shape, std::move(out), {a},
                        [argmax = std::move(argmax)](TensorNode& n) {
                          auto& ga = n.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < n.grad.size(); ++i)
                            ga[argmax[i]] += n.grad[i];
                        });
}

Tensor max_pool2d(const Tensor& a, int pool_d, int pool_t) {
  if (a.rank() != 3) {
    throw std::invalid_argument("max_pool2d: input must be rank-3, got " +
                                shape_str(a.shape()));
  }
  const int D = a.dim(0), T = a.dim(1), C = a.dim(2);
  if (pool_d <= 0 || pool_t <= 0 || pool_d > D || pool_t > T) {
    throw std::invalid_argument(
        "max_pool2d: region (" + std::to_string(pool_d) + "," +
        std::to_string(pool_t) + ") invalid for input " + shape_str(a.shape()));
  }
  const int Od = D / pool_d, Ot = T / pool_t;  // floor mode
  std::vector<double> out(static_cast<std::size_t>(Od) * Ot * C);
  std::vector<std::size_t> argmax(out.size());
  const double* x = a.data().data();
  std::size_t oi = 0;
  for (int od = 0; od < Od; ++od) {
    for (int ot = 0; ot < Ot; ++ot) {
      for (int c = 0; c < C; ++c, ++oi) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_at = 0;
        for (int i = 0; i < pool_d; ++i) {
          for (int j = 0; j < pool_t; ++j) {
            const std::size_t idx =
                (static_cast<std::size_t>(od * pool_d + i) * T +
                 (ot * pool_t + j)) *
                    C +
                c;
            if (x[idx] > best) {
              best = x[idx];
              best_at = idx;
            }
          }
        }
        out[oi] = best;
        argmax[oi] = best_at;
      }
    }
  }

  return make_op_output({Od, Ot, C}, std::move(out), {a},
                        [argmax = std::move(argmax)](TensorNode& n) {
                          auto& ga = n.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < n.grad.size(); ++i)
                            ga[argmax[i]] += n.grad[i];
                        });
}

}  // namespace tribranch
