#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace sdopf::ad {

using Mat = Eigen::MatrixXd;

class Node;
using Value = std::shared_ptr<Node>;

/// Reverse-mode value node. Complex tensors carry separate real/imaginary
/// buffers and are differentiated as independent real pairs; losses are
/// always real scalars.
class Node {
 public:
  Mat re;   // data
  Mat im;   // 0x0 for real tensors
  Mat gre;  // gradient accumulators, allocated on first use
  Mat gim;

  bool requires_grad = false;
  std::vector<Value> parents;
  std::function<void(Node&)> backprop;

  Eigen::Index rows() const { return re.rows(); }
  Eigen::Index cols() const { return re.cols(); }
  bool is_complex() const { return im.size() > 0; }
  bool is_scalar() const { return re.rows() == 1 && re.cols() == 1; }
  double scalar() const { return re(0, 0); }

  void ensure_grad();
  void zero_grad();
};

/// Disables graph construction within its scope (forward-only evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Leaf constructors.
Value constant(Mat m);
Value constant_complex(Mat re, Mat im);
Value scalar_const(double v);
Value param(Mat m);
Value param_complex(Mat re, Mat im);

// Elementwise and structural primitives.
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value neg(const Value& a);
Value scale(const Value& a, double s);
Value mul(const Value& a, const Value& b);
Value matmul(const Value& a, const Value& b);
Value complex_matmul(const Value& a, const Value& b);
Value conj(const Value& a);
Value real_part(const Value& a);
Value imag_part(const Value& a);
Value make_complex(const Value& re, const Value& im);
Value magnitude(const Value& a);
Value square_norm(const Value& a);
Value relu(const Value& a);
Value relu_plus(const Value& a);  // rectifier used for inequality penalties
Value crelu(const Value& a);
Value sigmoid(const Value& a);
Value tanh_op(const Value& a);
Value sum(const Value& a);
Value mean(const Value& a);
Value row_sum(const Value& a);
Value add_rowvec(const Value& a, const Value& bias);
Value mul_rowvec(const Value& a, const Value& w);
Value concat_cols(const Value& a, const Value& b);
Value gather_cols(const Value& a, const std::vector<int>& idx);

/// Applies a constant complex operator S to each block_rows-row block of a
/// stacked batch (block-diagonal multiply without forming the big matrix).
Value block_shift(const Value& s, const Value& x, int block_rows);

/// Reshapes a stacked complex batch (nb*block_rows x C) into one real row per
/// sample: [re row-major | im row-major], giving nb x (2*block_rows*C).
Value flatten_blocks(const Value& x, int block_rows);

/// Polynomial graph filter: sum_k S^k X H_k over stacked sample blocks.
Value graph_filter(const std::vector<Value>& taps, const Value& s, const Value& x,
                   int block_rows);

/// Full-width temporal convolution: each output channel is a linear map of
/// the flattened time-channel axis per node; reduces to X * kernel.
Value temporal_conv(const Value& kernel, const Value& x);

/// Reverse pass from a real scalar loss; accumulates into grad buffers of
/// every reachable node with requires_grad set.
void backward(const Value& loss);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers per parameter plus the shared step counter.
struct AdamState {
  std::vector<Mat> m_re, v_re, m_im, v_im;
  long step_count = 0;
};

/// Bias-corrected Adam step over params using their accumulated gradients.
void adam_step(const std::vector<Value>& params, const AdamConfig& cfg, AdamState& state);

class Adam {
 public:
  Adam(std::vector<Value> params, AdamConfig cfg = {});
  void step();
  void zero_grad();
  const std::vector<Value>& params() const { return params_; }

 private:
  std::vector<Value> params_;
  AdamConfig cfg_;
  AdamState state_;
};

}  // namespace sdopf::ad
