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

// Minimal dense-tensor arithmetic with reverse-mode automatic
// differentiation, sized for small convolutional networks.
//
// Tensors are value-semantic handles onto immutable nodes of a dynamically
// recorded computation graph (straight-line recording only; no control-flow
// capture). Values are 32-bit floats stored flat in row-major order;
// reductions accumulate in 64-bit where cheap. A graph is consumable once:
// after backward() the participating non-leaf nodes are spent and a second
// backward() through them is an error.

#ifndef AMVQ_TENSOR_HPP_
#define AMVQ_TENSOR_HPP_

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "amvq/common.hpp"

namespace amvq {

using Shape = std::vector<int>;

int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Eigen::ArrayXf value;
  Eigen::ArrayXf grad;  // empty until backward reaches this node
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // scatters node.grad into parents
  const char* op = "leaf";
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, Eigen::ArrayXf data,
                          bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t size() const { return node_->value.size(); }
  bool is_scalar() const { return node_->value.size() == 1; }

  const Eigen::ArrayXf& value() const { return node_->value; }
  // In-place mutation is reserved for optimizer updates and checkpoint
  // loading of leaf parameters.
  Eigen::ArrayXf& mutable_value();
  float item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() > 0; }
  const Eigen::ArrayXf& grad() const;
  void zero_grad();

  detail::NodePtr node() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  detail::NodePtr node_;

  friend Tensor make_op_result(Shape shape, Eigen::ArrayXf value,
                               std::vector<Tensor> parents,
                               std::function<void(detail::Node&)> backprop,
                               const char* op);
};

// Records a new graph node; the escape hatch other modules use to define
// composite ops with custom backward rules.
Tensor make_op_result(Shape shape, Eigen::ArrayXf value,
                      std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backprop,
                      const char* op);

// --- Elementwise and reduction primitives ---------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, float negative_slope);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softplus(const Tensor& x);  // log(1 + e^x), numerically stable
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor squared_l2(const Tensor& x);
Tensor stop_gradient(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, float c) { return scale(a, c); }
inline Tensor operator*(float c, const Tensor& a) { return scale(a, c); }

// --- Structural primitives -------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor matmul(const Tensor& a, const Tensor& b);  // [r,k] x [k,c] -> [r,c]

// [N,C,H,W] -> [N*H*W, C]; row p = (n*H + h)*W + w. Inverse restores NCHW.
Tensor positions_to_matrix(const Tensor& x);
Tensor matrix_to_nchw(const Tensor& x, const Shape& nchw_shape);

// Row gather from a [K,L] table; backward scatter-adds into the table.
Tensor index_select_rows(const Tensor& table, const std::vector<int>& rows);

// --- Convolutional primitives ----------------------------------------------

// x: [N,Cin,H,W], weight: [Cout,Cin,kh,kw], bias: [Cout].
// out spatial dim = floor((in + 2*pad - kernel) / stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int pad);

Tensor upsample_nearest2x(const Tensor& x);  // [N,C,H,W] -> [N,C,2H,2W]

// Running statistics live outside the graph; train mode updates them with
// `running = (1 - momentum) * running + momentum * batch`.
struct BatchNormState {
  Eigen::ArrayXf running_mean;
  Eigen::ArrayXf running_var;

  static BatchNormState identity(int channels) {
    BatchNormState s;
    s.running_mean = Eigen::ArrayXf::Zero(channels);
    s.running_var = Eigen::ArrayXf::Ones(channels);
    return s;
  }
};

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training,
                  float momentum = 0.1f, float eps = 1e-5f);

// --- Reverse pass -----------------------------------------------------------

// Populates grad on every requires_grad tensor reachable from `loss`.
// `loss` must be scalar; the graph is spent afterwards.
void backward(const Tensor& loss);

// Central finite differences against the recorded analytic gradient.
// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
// stop_gradient branches are held at their unperturbed values during the
// numeric evaluations, so the oracle matches stop-gradient semantics.
float gradient_check(const std::function<Tensor(const Tensor&)>& f,
                     const Tensor& x, float eps);

// --- Flat binary container ---------------------------------------------------
// Header: magic "AMVQTNSR", version u16, rank u8, dims u32 (little-endian),
// then the raw little-endian f32 payload.

void save_tensor(std::ostream& os, const Tensor& t);
Tensor load_tensor(std::istream& is);
void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

}  // namespace amvq

#endif  // AMVQ_TENSOR_HPP_
