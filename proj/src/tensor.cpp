// Copyright 2026 The AMVQ Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "amvq/tensor.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "amvq/float16.hpp"

namespace amvq {

int64_t shape_size(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

using detail::Node;
using detail::NodePtr;

void check_shape_positive(const Shape& shape, const char* op) {
  for (int d : shape) {
    if (d <= 0) {
      throw ShapeError(std::string(op) + ": non-positive dim in " +
                       shape_str(shape));
    }
  }
}

void ensure_grad(Node& n) {
  if (n.grad.size() == 0) n.grad = Eigen::ArrayXf::Zero(n.value.size());
}

// stop_gradient value capture for the finite-difference oracle. While
// recording, each stop_gradient call stashes its forward value; while
// replaying, calls return the stashed values so perturbations only
// propagate along non-stopped paths.
struct SgReplayState {
  enum class Mode { kOff, kRecord, kReplay };
  Mode mode = Mode::kOff;
  std::vector<Eigen::ArrayXf> values;
  size_t cursor = 0;
};

thread_local SgReplayState g_sg_replay;

}  // namespace

Tensor make_op_result(Shape shape, Eigen::ArrayXf value,
                      std::vector<Tensor> parents,
                      std::function<void(Node&)> backprop, const char* op) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  for (const Tensor& p : parents) needs = needs || p.node()->requires_grad;
  node->requires_grad = needs;
  if (needs) {
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) node->parents.push_back(p.node());
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape_positive(shape, "zeros");
  return from_data(shape, Eigen::ArrayXf::Zero(shape_size(shape)),
                   requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  check_shape_positive(shape, "full");
  return from_data(shape,
                   Eigen::ArrayXf::Constant(shape_size(shape), value),
                   requires_grad);
}

Tensor Tensor::from_data(Shape shape, Eigen::ArrayXf data,
                         bool requires_grad) {
  check_shape_positive(shape, "from_data");
  if (shape_size(shape) != data.size()) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) {
  return from_data({1}, Eigen::ArrayXf::Constant(1, value), false);
}

Eigen::ArrayXf& Tensor::mutable_value() { return node_->value; }

float Tensor::item() const {
  if (!is_scalar()) {
    throw ShapeError("item: tensor is not scalar, shape " +
                     shape_str(node_->shape));
  }
  return node_->value[0];
}

const Eigen::ArrayXf& Tensor::grad() const {
  if (node_->grad.size() == 0) {
    throw std::runtime_error("grad: no gradient recorded (op " +
                             std::string(node_->op) + ")");
  }
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.resize(0); }

// --- Elementwise ------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  return make_op_result(
      a.shape(), a.value() + b.value(), {a, b},
      [](Node& n) {
        for (int i = 0; i < 2; ++i) {
          Node& p = *n.parents[static_cast<size_t>(i)];
          if (!p.requires_grad) continue;
          ensure_grad(p);
          p.grad += n.grad;
        }
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  return make_op_result(
      a.shape(), a.value() - b.value(), {a, b},
      [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
          ensure_grad(pa);
          pa.grad += n.grad;
        }
        if (pb.requires_grad) {
          ensure_grad(pb);
          pb.grad -= n.grad;
        }
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  return make_op_result(
      a.shape(), a.value() * b.value(), {a, b},
      [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
          ensure_grad(pa);
          pa.grad += n.grad * pb.value;
        }
        if (pb.requires_grad) {
          ensure_grad(pb);
          pb.grad += n.grad * pa.value;
        }
      },
      "mul");
}

Tensor scale(const Tensor& a, float c) {
  return make_op_result(
      a.shape(), a.value() * c, {a},
      [c](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        p.grad += n.grad * c;
      },
      "scale");
}

Tensor relu(const Tensor& x) {
  return make_op_result(
      x.shape(), x.value().max(0.0f), {x},
      [](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        p.grad += n.grad * (p.value > 0.0f).cast<float>();
      },
      "relu");
}

Tensor leaky_relu(const Tensor& x, float negative_slope) {
  const float s = negative_slope;
  Eigen::ArrayXf y = x.value().max(x.value() * s);
  return make_op_result(
      x.shape(), std::move(y), {x},
      [s](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        p.grad += n.grad * (p.value > 0.0f).select(
                               Eigen::ArrayXf::Ones(p.value.size()),
                               Eigen::ArrayXf::Constant(p.value.size(), s));
      },
      "leaky_relu");
}

Tensor sigmoid(const Tensor& x) {
  Eigen::ArrayXf y = 1.0f / (1.0f + (-x.value()).exp());
  return make_op_result(
      x.shape(), std::move(y), {x},
      [](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        p.grad += n.grad * n.value * (1.0f - n.value);
      },
      "sigmoid");
}

Tensor tanh(const Tensor& x) {
  Eigen::ArrayXf y = x.value().tanh();
  return make_op_result(
      x.shape(), std::move(y), {x},
      [](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        p.grad += n.grad * (1.0f - n.value * n.value);
      },
      "tanh");
}

Tensor log(const Tensor& x) {
  Eigen::ArrayXf y = x.value().log();
  return make_op_result(
      x.shape(), std::move(y), {x},
      [](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        p.grad += n.grad / p.value;
      },
      "log");
}

Tensor softplus(const Tensor& x) {
  // max(x,0) + log1p(exp(-|x|)) avoids overflow on both tails.
  Eigen::ArrayXf y(x.size());
  const Eigen::ArrayXf& v = x.value();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    y[i] = std::max(v[i], 0.0f) + std::log1p(std::exp(-std::abs(v[i])));
  }
  return make_op_result(
      x.shape(), std::move(y), {x},
      [](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        p.grad += n.grad / (1.0f + (-p.value).exp());
      },
      "softplus");
}

Tensor sum(const Tensor& x) {
  const double total = x.value().cast<double>().sum();
  return make_op_result(
      {1}, Eigen::ArrayXf::Constant(1, static_cast<float>(total)), {x},
      [](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        p.grad += n.grad[0];
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  const double total = x.value().cast<double>().sum();
  const double inv_n = 1.0 / static_cast<double>(x.size());
  return make_op_result(
      {1}, Eigen::ArrayXf::Constant(1, static_cast<float>(total * inv_n)),
      {x},
      [inv_n](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        p.grad += n.grad[0] * static_cast<float>(inv_n);
      },
      "mean");
}

Tensor squared_l2(const Tensor& x) {
  const double total = x.value().cast<double>().square().sum();
  return make_op_result(
      {1}, Eigen::ArrayXf::Constant(1, static_cast<float>(total)), {x},
      [](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        p.grad += 2.0f * n.grad[0] * p.value;
      },
      "squared_l2");
}

Tensor stop_gradient(const Tensor& x) {
  Eigen::ArrayXf value = x.value();
  SgReplayState& rs = g_sg_replay;
  if (rs.mode == SgReplayState::Mode::kRecord) {
    rs.values.push_back(value);
  } else if (rs.mode == SgReplayState::Mode::kReplay) {
    if (rs.cursor >= rs.values.size()) {
      throw std::runtime_error(
          "gradient_check: stop_gradient count changed between evaluations");
    }
    const Eigen::ArrayXf& recorded = rs.values[rs.cursor++];
    if (recorded.size() != value.size()) {
      throw std::runtime_error(
          "gradient_check: stop_gradient shape changed between evaluations");
    }
    value = recorded;
  }
  // Detached constant: forwards the value, contributes zero gradient.
  return Tensor::from_data(x.shape(), std::move(value), false);
}

// --- Structure --------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  check_shape_positive(shape, "reshape");
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  return make_op_result(
      std::move(shape), x.value(), {x},
      [](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        p.grad += n.grad;
      },
      "reshape");
}

namespace {

using RowMajorMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMajorMap = Eigen::Map<RowMajorMatrix>;
using ConstRowMajorMap = Eigen::Map<const RowMajorMatrix>;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  const int r = a.dim(0), k = a.dim(1), c = b.dim(1);
  Eigen::ArrayXf y(static_cast<int64_t>(r) * c);
  {
    ConstRowMajorMap am(a.value().data(), r, k);
    ConstRowMajorMap bm(b.value().data(), k, c);
    RowMajorMap ym(y.data(), r, c);
    ym.noalias() = am * bm;
  }
  return make_op_result(
      {r, c}, std::move(y), {a, b},
      [r, k, c](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        ConstRowMajorMap g(n.grad.data(), r, c);
        ConstRowMajorMap am(pa.value.data(), r, k);
        ConstRowMajorMap bm(pb.value.data(), k, c);
        if (pa.requires_grad) {
          ensure_grad(pa);
          RowMajorMap ga(pa.grad.data(), r, k);
          ga.noalias() += g * bm.transpose();
        }
        if (pb.requires_grad) {
          ensure_grad(pb);
          RowMajorMap gb(pb.grad.data(), k, c);
          gb.noalias() += am.transpose() * g;
        }
      },
      "matmul");
}

Tensor positions_to_matrix(const Tensor& x) {
  if (x.rank() != 4) {
    throw ShapeError("positions_to_matrix: want rank-4 NCHW, got " +
                     shape_str(x.shape()));
  }
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t hw = static_cast<int64_t>(h) * w;
  Eigen::ArrayXf y(x.size());
  const Eigen::ArrayXf& v = x.value();
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const int64_t src = (static_cast<int64_t>(ni) * c + ci) * hw;
      for (int64_t p = 0; p < hw; ++p) {
        y[(ni * hw + p) * c + ci] = v[src + p];
      }
    }
  }
  return make_op_result(
      {n * h * w, c}, std::move(y), {x},
      [n, c, hw](Node& node) {
        Node& p = *node.parents[0];
        ensure_grad(p);
        for (int ni = 0; ni < n; ++ni) {
          for (int ci = 0; ci < c; ++ci) {
            const int64_t dst = (static_cast<int64_t>(ni) * c + ci) * hw;
            for (int64_t q = 0; q < hw; ++q) {
              p.grad[dst + q] += node.grad[(ni * hw + q) * c + ci];
            }
          }
        }
      },
      "positions_to_matrix");
}

Tensor matrix_to_nchw(const Tensor& x, const Shape& nchw_shape) {
  if (x.rank() != 2 || nchw_shape.size() != 4) {
    throw ShapeError("matrix_to_nchw: want [P,C] and rank-4 target, got " +
                     shape_str(x.shape()) + " -> " + shape_str(nchw_shape));
  }
  const int n = nchw_shape[0], c = nchw_shape[1], h = nchw_shape[2],
            w = nchw_shape[3];
  if (x.dim(0) != n * h * w || x.dim(1) != c) {
    throw ShapeError("matrix_to_nchw: " + shape_str(x.shape()) +
                     " does not map onto " + shape_str(nchw_shape));
  }
  const int64_t hw = static_cast<int64_t>(h) * w;
  Eigen::ArrayXf y(x.size());
  const Eigen::ArrayXf& v = x.value();
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const int64_t dst = (static_cast<int64_t>(ni) * c + ci) * hw;
      for (int64_t p = 0; p < hw; ++p) {
        y[dst + p] = v[(ni * hw + p) * c + ci];
      }
    }
  }
  return make_op_result(
      nchw_shape, std::move(y), {x},
      [n, c, hw](Node& node) {
        Node& p = *node.parents[0];
        ensure_grad(p);
        for (int ni = 0; ni < n; ++ni) {
          for (int ci = 0; ci < c; ++ci) {
            const int64_t src = (static_cast<int64_t>(ni) * c + ci) * hw;
            for (int64_t q = 0; q < hw; ++q) {
              p.grad[(ni * hw + q) * c + ci] += node.grad[src + q];
            }
          }
        }
      },
      "matrix_to_nchw");
}

Tensor index_select_rows(const Tensor& table, const std::vector<int>& rows) {
  if (table.rank() != 2) {
    throw ShapeError("index_select_rows: want rank-2 table, got " +
                     shape_str(table.shape()));
  }
  const int k = table.dim(0), l = table.dim(1);
  for (int r : rows) {
    if (r < 0 || r >= k) {
      throw ShapeError("index_select_rows: row " + std::to_string(r) +
                       " out of range [0," + std::to_string(k) + ")");
    }
  }
  const int m = static_cast<int>(rows.size());
  Eigen::ArrayXf y(static_cast<int64_t>(m) * l);
  const Eigen::ArrayXf& v = table.value();
  for (int i = 0; i < m; ++i) {
    y.segment(static_cast<int64_t>(i) * l, l) =
        v.segment(static_cast<int64_t>(rows[static_cast<size_t>(i)]) * l, l);
  }
  return make_op_result(
      {m, l}, std::move(y), {table},
      [rows, l](Node& n) {
        Node& p = *n.parents[0];
        ensure_grad(p);
        for (size_t i = 0; i < rows.size(); ++i) {
          p.grad.segment(static_cast<int64_t>(rows[i]) * l, l) +=
              n.grad.segment(static_cast<int64_t>(i) * l, l);
        }
      },
      "index_select_rows");
}

// --- Convolution -------------------------------------------------------------

namespace {

struct ConvDims {
  int n, cin, h, w;
  int cout, kh, kw;
  int stride, pad;
  int oh, ow;
};

// col is [cin*kh*kw, oh*ow] for one sample.
void im2col(const float* x, const ConvDims& d, int sample, Eigen::MatrixXf* col) {
  const int64_t plane = static_cast<int64_t>(d.h) * d.w;
  const float* xs = x + static_cast<int64_t>(sample) * d.cin * plane;
  for (int c = 0; c < d.cin; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const int row = (c * d.kh + ki) * d.kw + kj;
        for (int oh = 0; oh < d.oh; ++oh) {
          const int ih = oh * d.stride - d.pad + ki;
          for (int ow = 0; ow < d.ow; ++ow) {
            const int iw = ow * d.stride - d.pad + kj;
            float v = 0.0f;
            if (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w) {
              v = xs[c * plane + static_cast<int64_t>(ih) * d.w + iw];
            }
            (*col)(row, oh * d.ow + ow) = v;
          }
        }
      }
    }
  }
}

void col2im_add(const Eigen::MatrixXf& col, const ConvDims& d, int sample,
                float* dx) {
  const int64_t plane = static_cast<int64_t>(d.h) * d.w;
  float* dxs = dx + static_cast<int64_t>(sample) * d.cin * plane;
  for (int c = 0; c < d.cin; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const int row = (c * d.kh + ki) * d.kw + kj;
        for (int oh = 0; oh < d.oh; ++oh) {
          const int ih = oh * d.stride - d.pad + ki;
          if (ih < 0 || ih >= d.h) continue;
          for (int ow = 0; ow < d.ow; ++ow) {
            const int iw = ow * d.stride - d.pad + kj;
            if (iw < 0 || iw >= d.w) continue;
            dxs[c * plane + static_cast<int64_t>(ih) * d.w + iw] +=
                col(row, oh * d.ow + ow);
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int pad) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d: want NCHW input and OIHW weight, got " +
                     shape_str(x.shape()) + " and " +
                     shape_str(weight.shape()));
  }
  if (stride < 1 || pad < 0) {
    throw ShapeError("conv2d: invalid stride/pad " + std::to_string(stride) +
                     "/" + std::to_string(pad));
  }
  ConvDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = weight.dim(0);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.stride = stride;
  d.pad = pad;
  if (weight.dim(1) != d.cin) {
    throw ShapeError("conv2d: input channels " + std::to_string(d.cin) +
                     " vs weight expecting " + std::to_string(weight.dim(1)));
  }
  if (bias.rank() != 1 || bias.dim(0) != d.cout) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) +
                     " does not match out channels " + std::to_string(d.cout));
  }
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) +
                     " larger than padded input " + shape_str(x.shape()));
  }

  const int kcols = d.cin * d.kh * d.kw;
  const int64_t ohw = static_cast<int64_t>(d.oh) * d.ow;
  Eigen::ArrayXf y(static_cast<int64_t>(d.n) * d.cout * ohw);
  {
    Eigen::MatrixXf col(kcols, ohw);
    ConstRowMajorMap wm(weight.value().data(), d.cout, kcols);
    for (int ni = 0; ni < d.n; ++ni) {
      im2col(x.value().data(), d, ni, &col);
      RowMajorMap ym(y.data() + static_cast<int64_t>(ni) * d.cout * ohw,
                     d.cout, ohw);
      ym.noalias() = wm * col;
      ym.colwise() +=
          Eigen::Map<const Eigen::VectorXf>(bias.value().data(), d.cout);
    }
  }

  return make_op_result(
      {d.n, d.cout, d.oh, d.ow}, std::move(y), {x, weight, bias},
      [d, kcols, ohw](Node& node) {
        Node& px = *node.parents[0];
        Node& pw = *node.parents[1];
        Node& pb = *node.parents[2];
        ConstRowMajorMap wm(pw.value.data(), d.cout, kcols);
        Eigen::MatrixXf col(kcols, ohw);
        if (px.requires_grad) ensure_grad(px);
        if (pw.requires_grad) ensure_grad(pw);
        if (pb.requires_grad) ensure_grad(pb);
        for (int ni = 0; ni < d.n; ++ni) {
          ConstRowMajorMap gy(
              node.grad.data() + static_cast<int64_t>(ni) * d.cout * ohw,
              d.cout, ohw);
          if (pb.requires_grad) {
            Eigen::Map<Eigen::VectorXf>(pb.grad.data(), d.cout) +=
                gy.rowwise().sum();
          }
          if (pw.requires_grad) {
            im2col(px.value.data(), d, ni, &col);
            RowMajorMap gw(pw.grad.data(), d.cout, kcols);
            gw.noalias() += gy * col.transpose();
          }
          if (px.requires_grad) {
            Eigen::MatrixXf gcol = wm.transpose() * gy;
            col2im_add(gcol, d, ni, px.grad.data());
          }
        }
      },
      "conv2d");
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 4) {
    throw ShapeError("upsample_nearest2x: want rank-4 NCHW, got " +
                     shape_str(x.shape()));
  }
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = 2 * h, ow = 2 * w;
  Eigen::ArrayXf y(static_cast<int64_t>(n) * c * oh * ow);
  const Eigen::ArrayXf& v = x.value();
  for (int p = 0; p < n * c; ++p) {
    const float* src = v.data() + static_cast<int64_t>(p) * h * w;
    float* dst = y.data() + static_cast<int64_t>(p) * oh * ow;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        dst[static_cast<int64_t>(i) * ow + j] =
            src[static_cast<int64_t>(i / 2) * w + j / 2];
      }
    }
  }
  return make_op_result(
      {n, c, oh, ow}, std::move(y), {x},
      [n, c, h, w, oh, ow](Node& node) {
        Node& p = *node.parents[0];
        ensure_grad(p);
        for (int q = 0; q < n * c; ++q) {
          const float* g = node.grad.data() + static_cast<int64_t>(q) * oh * ow;
          float* dst = p.grad.data() + static_cast<int64_t>(q) * h * w;
          for (int i = 0; i < oh; ++i) {
            for (int j = 0; j < ow; ++j) {
              dst[static_cast<int64_t>(i / 2) * w + j / 2] +=
                  g[static_cast<int64_t>(i) * ow + j];
            }
          }
        }
      },
      "upsample_nearest2x");
}

// --- Batch norm ---------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training, float momentum,
                  float eps) {
  if (x.rank() != 4) {
    throw ShapeError("batch_norm: want rank-4 NCHW, got " +
                     shape_str(x.shape()));
  }
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 ||
      beta.dim(0) != c) {
    throw ShapeError("batch_norm: gamma/beta " + shape_str(gamma.shape()) +
                     "/" + shape_str(beta.shape()) + " vs channels " +
                     std::to_string(c));
  }
  if (state.running_mean.size() != c || state.running_var.size() != c) {
    throw ShapeError("batch_norm: state expects " + std::to_string(c) +
                     " channels");
  }
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t per_channel = static_cast<int64_t>(n) * plane;
  const Eigen::ArrayXf& v = x.value();

  auto channel_segment = [&](const Eigen::ArrayXf& a, int ni,
                             int ci) -> Eigen::Map<const Eigen::ArrayXf> {
    return Eigen::Map<const Eigen::ArrayXf>(
        a.data() + (static_cast<int64_t>(ni) * c + ci) * plane, plane);
  };

  Eigen::ArrayXf mean_c(c), var_c(c);
  if (training) {
    for (int ci = 0; ci < c; ++ci) {
      double s = 0.0, s2 = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        auto seg = channel_segment(v, ni, ci);
        s += seg.cast<double>().sum();
        s2 += seg.cast<double>().square().sum();
      }
      const double mu = s / static_cast<double>(per_channel);
      mean_c[ci] = static_cast<float>(mu);
      var_c[ci] = static_cast<float>(
          std::max(0.0, s2 / static_cast<double>(per_channel) - mu * mu));
    }
    state.running_mean =
        (1.0f - momentum) * state.running_mean + momentum * mean_c;
    state.running_var =
        (1.0f - momentum) * state.running_var + momentum * var_c;
  } else {
    mean_c = state.running_mean;
    var_c = state.running_var;
  }

  Eigen::ArrayXf inv_std = (var_c + eps).sqrt().inverse();
  Eigen::ArrayXf xhat(v.size());
  Eigen::ArrayXf y(v.size());
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const int64_t off = (static_cast<int64_t>(ni) * c + ci) * plane;
      xhat.segment(off, plane) =
          (v.segment(off, plane) - mean_c[ci]) * inv_std[ci];
      y.segment(off, plane) =
          xhat.segment(off, plane) * gamma.value()[ci] + beta.value()[ci];
    }
  }

  return make_op_result(
      {n, c, h, w}, std::move(y), {x, gamma, beta},
      [n, c, plane, per_channel, training, inv_std,
       xhat = std::move(xhat)](Node& node) {
        Node& px = *node.parents[0];
        Node& pg = *node.parents[1];
        Node& pb = *node.parents[2];
        if (pg.requires_grad) ensure_grad(pg);
        if (pb.requires_grad) ensure_grad(pb);
        if (px.requires_grad) ensure_grad(px);
        for (int ci = 0; ci < c; ++ci) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (int ni = 0; ni < n; ++ni) {
            const int64_t off = (static_cast<int64_t>(ni) * c + ci) * plane;
            auto g = node.grad.segment(off, plane);
            auto xh = xhat.segment(off, plane);
            sum_g += g.cast<double>().sum();
            sum_gx += (g * xh).cast<double>().sum();
          }
          if (pg.requires_grad) pg.grad[ci] += static_cast<float>(sum_gx);
          if (pb.requires_grad) pb.grad[ci] += static_cast<float>(sum_g);
          if (!px.requires_grad) continue;
          const float gamma_c = pg.value[ci];
          const float k = gamma_c * inv_std[ci];
          if (training) {
            const float mean_g =
                static_cast<float>(sum_g / static_cast<double>(per_channel));
            const float mean_gx =
                static_cast<float>(sum_gx / static_cast<double>(per_channel));
            for (int ni = 0; ni < n; ++ni) {
              const int64_t off = (static_cast<int64_t>(ni) * c + ci) * plane;
              px.grad.segment(off, plane) +=
                  k * (node.grad.segment(off, plane) - mean_g -
                       xhat.segment(off, plane) * mean_gx);
            }
          } else {
            for (int ni = 0; ni < n; ++ni) {
              const int64_t off = (static_cast<int64_t>(ni) * c + ci) * plane;
              px.grad.segment(off, plane) += k * node.grad.segment(off, plane);
            }
          }
        }
      },
      "batch_norm");
}

// --- Reverse pass --------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.is_scalar()) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  }
  Node* root = loss.node().get();
  if (root->consumed) {
    throw std::runtime_error(
        "backward: graph already consumed; rerun the forward pass");
  }
  if (!root->requires_grad) {
    return;  // nothing reachable requires gradients
  }

  // Iterative post-order DFS; reversed it yields consumers before producers.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  ensure_grad(*root);
  root->grad[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && node->grad.size() > 0) {
      node->backprop(*node);
    }
    if (node->backprop) {
      node->consumed = true;
      node->backprop = nullptr;  // release saved activations
    }
  }
  root->consumed = true;
}

// --- Gradient checking -----------------------------------------------------------

float gradient_check(const std::function<Tensor(const Tensor&)>& f,
                     const Tensor& x, float eps) {
  if (eps <= 0.0f) {
    throw std::invalid_argument("gradient_check: eps must be positive");
  }
  SgReplayState& rs = g_sg_replay;
  rs.values.clear();
  rs.cursor = 0;
  rs.mode = SgReplayState::Mode::kRecord;

  float analytic_max_err = 0.0f;
  Eigen::ArrayXf analytic;
  try {
    Tensor xv = Tensor::from_data(x.shape(), x.value(), true);
    Tensor y = f(xv);
    rs.mode = SgReplayState::Mode::kOff;
    if (!y.is_scalar()) {
      throw ShapeError("gradient_check: f must be scalar-valued, got " +
                       shape_str(y.shape()));
    }
    if (!std::isfinite(y.item())) {
      throw std::runtime_error("gradient_check: non-finite output");
    }
    backward(y);
    analytic = xv.has_grad() ? xv.grad()
                             : Eigen::ArrayXf::Zero(x.size()).eval();
  } catch (...) {
    rs.mode = SgReplayState::Mode::kOff;
    rs.values.clear();
    throw;
  }

  auto eval_at = [&](const Eigen::ArrayXf& data) -> double {
    rs.cursor = 0;
    rs.mode = SgReplayState::Mode::kReplay;
    Tensor out = f(Tensor::from_data(x.shape(), data, false));
    rs.mode = SgReplayState::Mode::kOff;
    if (rs.cursor != rs.values.size()) {
      throw std::runtime_error(
          "gradient_check: stop_gradient count changed between evaluations");
    }
    const double v = out.item();
    if (!std::isfinite(v)) {
      throw std::runtime_error("gradient_check: non-finite output");
    }
    return v;
  };

  try {
    Eigen::ArrayXf probe = x.value();
    for (Eigen::Index i = 0; i < probe.size(); ++i) {
      const float orig = probe[i];
      probe[i] = orig + eps;
      const double up = eval_at(probe);
      probe[i] = orig - eps;
      const double down = eval_at(probe);
      probe[i] = orig;
      const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
      const double err = std::abs(static_cast<double>(analytic[i]) - numeric) /
                         std::max(1.0, std::abs(numeric));
      analytic_max_err = std::max(analytic_max_err, static_cast<float>(err));
    }
  } catch (...) {
    rs.mode = SgReplayState::Mode::kOff;
    rs.values.clear();
    throw;
  }
  rs.values.clear();
  return analytic_max_err;
}

// --- Container I/O -----------------------------------------------------------------

namespace {

constexpr char kTensorMagic[8] = {'A', 'M', 'V', 'Q', 'T', 'N', 'S', 'R'};
constexpr uint16_t kTensorVersion = 1;

void write_u16(std::ostream& os, uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff),
                     static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}

void write_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

uint16_t read_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 8);
  write_u16(os, kTensorVersion);
  os.put(static_cast<char>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) {
    write_u32(os, static_cast<uint32_t>(t.dim(i)));
  }
  const Eigen::ArrayXf& v = t.value();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    write_u32(os, float_bits(v[i]));
  }
  if (!os) throw IoError("save_tensor: write failed");
}

Tensor load_tensor(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || !std::equal(magic, magic + 8, kTensorMagic)) {
    throw IoError("load_tensor: bad magic");
  }
  const uint16_t version = read_u16(is);
  if (version != kTensorVersion) {
    throw IoError("load_tensor: unsupported version " +
                  std::to_string(version));
  }
  const int rank = is.get();
  if (rank < 0 || rank > 8) {
    throw IoError("load_tensor: bad rank " + std::to_string(rank));
  }
  Shape shape(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    shape[static_cast<size_t>(i)] = static_cast<int>(read_u32(is));
  }
  const int64_t count = shape_size(shape);
  Eigen::ArrayXf data(count);
  for (int64_t i = 0; i < count; ++i) {
    data[i] = bits_to_float(read_u32(is));
  }
  if (!is) throw IoError("load_tensor: truncated payload");
  return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_tensor_file: cannot open " + path);
  save_tensor(os, t);
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_tensor_file: cannot open " + path);
  return load_tensor(is);
}

}  // namespace amvq
