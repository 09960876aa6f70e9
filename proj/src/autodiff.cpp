#include "sdopf/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace sdopf::ad {

namespace {

thread_local bool g_grad_enabled = true;

void check_same_shape(const Value& a, const Value& b, const char* op) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a->rows()) + "x" + std::to_string(a->cols()) +
                                " vs " + std::to_string(b->rows()) + "x" +
                                std::to_string(b->cols()));
}

void check_same_dtype(const Value& a, const Value& b, const char* op) {
  if (a->is_complex() != b->is_complex())
    throw std::invalid_argument(std::string(op) + ": dtype mismatch (real vs complex)");
}

Value make_node(Mat re, Mat im, std::vector<Value> parents,
                std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->re = std::move(re);
  n->im = std::move(im);
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& p : parents)
      if (p->requires_grad) needs = true;
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

}  // namespace

void Node::ensure_grad() {
  if (gre.size() == 0) gre = Mat::Zero(re.rows(), re.cols());
  if (is_complex() && gim.size() == 0) gim = Mat::Zero(im.rows(), im.cols());
}

void Node::zero_grad() {
  if (gre.size() > 0) gre.setZero();
  if (gim.size() > 0) gim.setZero();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Value constant(Mat m) {
  auto n = std::make_shared<Node>();
  n->re = std::move(m);
  return n;
}

Value constant_complex(Mat re, Mat im) {
  if (re.rows() != im.rows() || re.cols() != im.cols())
    throw std::invalid_argument("constant_complex: re/im shape mismatch");
  auto n = std::make_shared<Node>();
  n->re = std::move(re);
  n->im = std::move(im);
  return n;
}

Value scalar_const(double v) { return constant(Mat::Constant(1, 1, v)); }

Value param(Mat m) {
  auto n = constant(std::move(m));
  n->requires_grad = true;
  return n;
}

Value param_complex(Mat re, Mat im) {
  auto n = constant_complex(std::move(re), std::move(im));
  n->requires_grad = true;
  return n;
}

Value add(const Value& a, const Value& b) {
  check_same_shape(a, b, "add");
  check_same_dtype(a, b, "add");
  Mat re = a->re + b->re;
  Mat im = a->is_complex() ? Mat(a->im + b->im) : Mat();
  return make_node(std::move(re), std::move(im), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      a->gre += n.gre;
      if (a->is_complex()) a->gim += n.gim;
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->gre += n.gre;
      if (b->is_complex()) b->gim += n.gim;
    }
  });
}

Value sub(const Value& a, const Value& b) {
  check_same_shape(a, b, "sub");
  check_same_dtype(a, b, "sub");
  Mat re = a->re - b->re;
  Mat im = a->is_complex() ? Mat(a->im - b->im) : Mat();
  return make_node(std::move(re), std::move(im), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      a->gre += n.gre;
      if (a->is_complex()) a->gim += n.gim;
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->gre -= n.gre;
      if (b->is_complex()) b->gim -= n.gim;
    }
  });
}

Value neg(const Value& a) { return scale(a, -1.0); }

Value scale(const Value& a, double s) {
  Mat re = s * a->re;
  Mat im = a->is_complex() ? Mat(s * a->im) : Mat();
  return make_node(std::move(re), std::move(im), {a}, [a, s](Node& n) {
    a->ensure_grad();
    a->gre += s * n.gre;
    if (a->is_complex()) a->gim += s * n.gim;
  });
}

Value mul(const Value& a, const Value& b) {
  check_same_shape(a, b, "mul");
  check_same_dtype(a, b, "mul");
  if (!a->is_complex()) {
    Mat re = a->re.cwiseProduct(b->re);
    return make_node(std::move(re), {}, {a, b}, [a, b](Node& n) {
      if (a->requires_grad) {
        a->ensure_grad();
        a->gre += n.gre.cwiseProduct(b->re);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        b->gre += n.gre.cwiseProduct(a->re);
      }
    });
  }
  Mat re = a->re.cwiseProduct(b->re) - a->im.cwiseProduct(b->im);
  Mat im = a->re.cwiseProduct(b->im) + a->im.cwiseProduct(b->re);
  return make_node(std::move(re), std::move(im), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      a->gre += n.gre.cwiseProduct(b->re) + n.gim.cwiseProduct(b->im);
      a->gim += -n.gre.cwiseProduct(b->im) + n.gim.cwiseProduct(b->re);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->gre += n.gre.cwiseProduct(a->re) + n.gim.cwiseProduct(a->im);
      b->gim += -n.gre.cwiseProduct(a->im) + n.gim.cwiseProduct(a->re);
    }
  });
}

Value matmul(const Value& a, const Value& b) {
  if (a->is_complex() || b->is_complex())
    throw std::invalid_argument("matmul: complex operand; use complex_matmul");
  if (a->cols() != b->rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Mat re = a->re * b->re;
  return make_node(std::move(re), {}, {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      a->gre.noalias() += n.gre * b->re.transpose();
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->gre.noalias() += a->re.transpose() * n.gre;
    }
  });
}

Value complex_matmul(const Value& a, const Value& b) {
  if (!a->is_complex() || !b->is_complex())
    throw std::invalid_argument("complex_matmul: both operands must be complex");
  if (a->cols() != b->rows())
    throw std::invalid_argument("complex_matmul: inner dimension mismatch");
  Mat re = a->re * b->re - a->im * b->im;
  Mat im = a->re * b->im + a->im * b->re;
  return make_node(std::move(re), std::move(im), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      a->gre.noalias() += n.gre * b->re.transpose() + n.gim * b->im.transpose();
      a->gim.noalias() += -n.gre * b->im.transpose() + n.gim * b->re.transpose();
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->gre.noalias() += a->re.transpose() * n.gre + a->im.transpose() * n.gim;
      b->gim.noalias() += -a->im.transpose() * n.gre + a->re.transpose() * n.gim;
    }
  });
}

Value conj(const Value& a) {
  if (!a->is_complex()) throw std::invalid_argument("conj: real operand");
  Mat re = a->re;
  Mat im = -a->im;
  return make_node(std::move(re), std::move(im), {a}, [a](Node& n) {
    a->ensure_grad();
    a->gre += n.gre;
    a->gim -= n.gim;
  });
}

Value real_part(const Value& a) {
  if (!a->is_complex()) throw std::invalid_argument("real_part: real operand");
  Mat re = a->re;
  return make_node(std::move(re), {}, {a}, [a](Node& n) {
    a->ensure_grad();
    a->gre += n.gre;
  });
}

Value imag_part(const Value& a) {
  if (!a->is_complex()) throw std::invalid_argument("imag_part: real operand");
  Mat re = a->im;
  return make_node(std::move(re), {}, {a}, [a](Node& n) {
    a->ensure_grad();
    a->gim += n.gre;
  });
}

Value make_complex(const Value& re_in, const Value& im_in) {
  check_same_shape(re_in, im_in, "make_complex");
  if (re_in->is_complex() || im_in->is_complex())
    throw std::invalid_argument("make_complex: operands must be real");
  Mat re = re_in->re;
  Mat im = im_in->re;
  return make_node(std::move(re), std::move(im), {re_in, im_in}, [re_in, im_in](Node& n) {
    if (re_in->requires_grad) {
      re_in->ensure_grad();
      re_in->gre += n.gre;
    }
    if (im_in->requires_grad) {
      im_in->ensure_grad();
      im_in->gre += n.gim;
    }
  });
}

Value magnitude(const Value& a) {
  if (!a->is_complex()) throw std::invalid_argument("magnitude: real operand");
  Mat m = (a->re.array().square() + a->im.array().square()).sqrt();
  return make_node(Mat(m), {}, {a}, [a, m](Node& n) {
    a->ensure_grad();
    // Subgradient 0 at the origin.
    Mat safe = (m.array() > 0.0).select(m, Mat::Ones(m.rows(), m.cols()));
    Mat mask = (m.array() > 0.0).cast<double>();
    a->gre += (n.gre.array() * mask.array() * a->re.array() / safe.array()).matrix();
    a->gim += (n.gre.array() * mask.array() * a->im.array() / safe.array()).matrix();
  });
}

Value square_norm(const Value& a) {
  double s = a->re.squaredNorm();
  if (a->is_complex()) s += a->im.squaredNorm();
  return make_node(Mat::Constant(1, 1, s), {}, {a}, [a](Node& n) {
    a->ensure_grad();
    const double g = n.gre(0, 0);
    a->gre += 2.0 * g * a->re;
    if (a->is_complex()) a->gim += 2.0 * g * a->im;
  });
}

namespace {
Value rectify(const Value& a, const char* /*name*/) {
  if (a->is_complex()) throw std::invalid_argument("relu: complex operand; use crelu");
  Mat re = a->re.cwiseMax(0.0);
  return make_node(std::move(re), {}, {a}, [a](Node& n) {
    a->ensure_grad();
    a->gre += (n.gre.array() * (a->re.array() > 0.0).cast<double>()).matrix();
  });
}
}  // namespace

Value relu(const Value& a) { return rectify(a, "relu"); }
Value relu_plus(const Value& a) { return rectify(a, "relu_plus"); }

Value crelu(const Value& a) {
  if (!a->is_complex()) throw std::invalid_argument("crelu: real operand; use relu");
  Mat re = a->re.cwiseMax(0.0);
  Mat im = a->im.cwiseMax(0.0);
  return make_node(std::move(re), std::move(im), {a}, [a](Node& n) {
    a->ensure_grad();
    a->gre += (n.gre.array() * (a->re.array() > 0.0).cast<double>()).matrix();
    a->gim += (n.gim.array() * (a->im.array() > 0.0).cast<double>()).matrix();
  });
}

Value sigmoid(const Value& a) {
  if (a->is_complex()) throw std::invalid_argument("sigmoid: complex operand");
  Mat y = (1.0 / (1.0 + (-a->re.array()).exp())).matrix();
  return make_node(Mat(y), {}, {a}, [a, y](Node& n) {
    a->ensure_grad();
    a->gre += (n.gre.array() * y.array() * (1.0 - y.array())).matrix();
  });
}

Value tanh_op(const Value& a) {
  if (a->is_complex()) throw std::invalid_argument("tanh: complex operand");
  Mat y = a->re.array().tanh().matrix();
  return make_node(Mat(y), {}, {a}, [a, y](Node& n) {
    a->ensure_grad();
    a->gre += (n.gre.array() * (1.0 - y.array().square())).matrix();
  });
}

Value sum(const Value& a) {
  if (a->is_complex()) throw std::invalid_argument("sum: complex operand");
  return make_node(Mat::Constant(1, 1, a->re.sum()), {}, {a}, [a](Node& n) {
    a->ensure_grad();
    a->gre.array() += n.gre(0, 0);
  });
}

Value mean(const Value& a) {
  if (a->is_complex()) throw std::invalid_argument("mean: complex operand");
  const double inv = 1.0 / static_cast<double>(a->re.size());
  return make_node(Mat::Constant(1, 1, a->re.sum() * inv), {}, {a}, [a, inv](Node& n) {
    a->ensure_grad();
    a->gre.array() += n.gre(0, 0) * inv;
  });
}

Value row_sum(const Value& a) {
  if (a->is_complex()) throw std::invalid_argument("row_sum: complex operand");
  Mat re = a->re.rowwise().sum();
  return make_node(std::move(re), {}, {a}, [a](Node& n) {
    a->ensure_grad();
    a->gre.colwise() += n.gre.col(0);
  });
}

Value add_rowvec(const Value& a, const Value& bias) {
  if (a->is_complex() || bias->is_complex())
    throw std::invalid_argument("add_rowvec: complex operand");
  if (bias->rows() != 1 || bias->cols() != a->cols())
    throw std::invalid_argument("add_rowvec: bias must be 1 x cols(a)");
  Mat re = a->re.rowwise() + bias->re.row(0);
  return make_node(std::move(re), {}, {a, bias}, [a, bias](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      a->gre += n.gre;
    }
    if (bias->requires_grad) {
      bias->ensure_grad();
      bias->gre.row(0) += n.gre.colwise().sum();
    }
  });
}

Value mul_rowvec(const Value& a, const Value& w) {
  if (a->is_complex() || w->is_complex())
    throw std::invalid_argument("mul_rowvec: complex operand");
  if (w->rows() != 1 || w->cols() != a->cols())
    throw std::invalid_argument("mul_rowvec: weight must be 1 x cols(a)");
  Mat re = a->re.array().rowwise() * w->re.row(0).array();
  return make_node(std::move(re), {}, {a, w}, [a, w](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      a->gre += (n.gre.array().rowwise() * w->re.row(0).array()).matrix();
    }
    if (w->requires_grad) {
      w->ensure_grad();
      w->gre.row(0) += (n.gre.array() * a->re.array()).colwise().sum().matrix();
    }
  });
}

Value concat_cols(const Value& a, const Value& b) {
  if (a->is_complex() || b->is_complex())
    throw std::invalid_argument("concat_cols: complex operand");
  if (a->rows() != b->rows()) throw std::invalid_argument("concat_cols: row count mismatch");
  Mat re(a->rows(), a->cols() + b->cols());
  re << a->re, b->re;
  const Eigen::Index ca = a->cols();
  return make_node(std::move(re), {}, {a, b}, [a, b, ca](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      a->gre += n.gre.leftCols(ca);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->gre += n.gre.rightCols(n.gre.cols() - ca);
    }
  });
}

Value gather_cols(const Value& a, const std::vector<int>& idx) {
  if (a->is_complex()) throw std::invalid_argument("gather_cols: complex operand");
  Mat re(a->rows(), static_cast<Eigen::Index>(idx.size()));
  for (size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= a->cols())
      throw std::invalid_argument("gather_cols: index out of range");
    re.col(static_cast<Eigen::Index>(k)) = a->re.col(idx[k]);
  }
  return make_node(std::move(re), {}, {a}, [a, idx](Node& n) {
    a->ensure_grad();
    for (size_t k = 0; k < idx.size(); ++k)
      a->gre.col(idx[k]) += n.gre.col(static_cast<Eigen::Index>(k));
  });
}

Value block_shift(const Value& s, const Value& x, int block_rows) {
  if (!s->is_complex() || !x->is_complex())
    throw std::invalid_argument("block_shift: operands must be complex");
  if (s->rows() != block_rows || s->cols() != block_rows)
    throw std::invalid_argument("block_shift: operator must be block_rows square");
  if (x->rows() % block_rows != 0)
    throw std::invalid_argument("block_shift: stacked rows not a multiple of block size");
  if (s->requires_grad)
    throw std::invalid_argument("block_shift: differentiating the shift operator is unsupported");
  const Eigen::Index nb = x->rows() / block_rows;
  Mat re(x->rows(), x->cols()), im(x->rows(), x->cols());
  for (Eigen::Index b = 0; b < nb; ++b) {
    auto xr = x->re.middleRows(b * block_rows, block_rows);
    auto xi = x->im.middleRows(b * block_rows, block_rows);
    re.middleRows(b * block_rows, block_rows).noalias() = s->re * xr;
    re.middleRows(b * block_rows, block_rows).noalias() -= s->im * xi;
    im.middleRows(b * block_rows, block_rows).noalias() = s->re * xi;
    im.middleRows(b * block_rows, block_rows).noalias() += s->im * xr;
  }
  return make_node(std::move(re), std::move(im), {s, x}, [s, x, block_rows](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const Eigen::Index nb = x->rows() / block_rows;
    for (Eigen::Index b = 0; b < nb; ++b) {
      auto gr = n.gre.middleRows(b * block_rows, block_rows);
      auto gi = n.gim.middleRows(b * block_rows, block_rows);
      x->gre.middleRows(b * block_rows, block_rows).noalias() += s->re.transpose() * gr;
      x->gre.middleRows(b * block_rows, block_rows).noalias() += s->im.transpose() * gi;
      x->gim.middleRows(b * block_rows, block_rows).noalias() -= s->im.transpose() * gr;
      x->gim.middleRows(b * block_rows, block_rows).noalias() += s->re.transpose() * gi;
    }
  });
}

Value flatten_blocks(const Value& x, int block_rows) {
  if (!x->is_complex()) throw std::invalid_argument("flatten_blocks: operand must be complex");
  if (x->rows() % block_rows != 0)
    throw std::invalid_argument("flatten_blocks: stacked rows not a multiple of block size");
  const Eigen::Index nb = x->rows() / block_rows;
  const Eigen::Index c = x->cols();
  const Eigen::Index half = block_rows * c;
  Mat re(nb, 2 * half);
  for (Eigen::Index b = 0; b < nb; ++b)
    for (Eigen::Index i = 0; i < block_rows; ++i)
      for (Eigen::Index f = 0; f < c; ++f) {
        re(b, i * c + f) = x->re(b * block_rows + i, f);
        re(b, half + i * c + f) = x->im(b * block_rows + i, f);
      }
  return make_node(std::move(re), {}, {x}, [x, block_rows, c, half](Node& n) {
    x->ensure_grad();
    const Eigen::Index nb = n.gre.rows();
    for (Eigen::Index b = 0; b < nb; ++b)
      for (Eigen::Index i = 0; i < block_rows; ++i)
        for (Eigen::Index f = 0; f < c; ++f) {
          x->gre(b * block_rows + i, f) += n.gre(b, i * c + f);
          x->gim(b * block_rows + i, f) += n.gre(b, half + i * c + f);
        }
  });
}

Value graph_filter(const std::vector<Value>& taps, const Value& s, const Value& x,
                   int block_rows) {
  if (taps.empty()) throw std::invalid_argument("graph_filter: no taps");
  Value power = x;
  Value out = complex_matmul(power, taps[0]);
  for (size_t k = 1; k < taps.size(); ++k) {
    power = block_shift(s, power, block_rows);
    out = add(out, complex_matmul(power, taps[k]));
  }
  return out;
}

Value temporal_conv(const Value& kernel, const Value& x) { return complex_matmul(x, kernel); }

void backward(const Value& loss) {
  if (!loss->is_scalar() || loss->is_complex())
    throw std::invalid_argument("backward: loss must be a real scalar");
  if (!loss->requires_grad) return;

  // Reverse DFS post-order gives a topological order over parent edges,
  // so each node's gradient is complete before its backprop fires.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->ensure_grad();
  loss->gre(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop) {
      node->ensure_grad();
      node->backprop(*node);
    }
  }
}

void adam_step(const std::vector<Value>& params, const AdamConfig& cfg, AdamState& state) {
  if (state.m_re.size() != params.size()) {
    state.m_re.resize(params.size());
    state.v_re.resize(params.size());
    state.m_im.resize(params.size());
    state.v_im.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m_re[i] = Mat::Zero(params[i]->rows(), params[i]->cols());
      state.v_re[i] = Mat::Zero(params[i]->rows(), params[i]->cols());
      if (params[i]->is_complex()) {
        state.m_im[i] = Mat::Zero(params[i]->rows(), params[i]->cols());
        state.v_im[i] = Mat::Zero(params[i]->rows(), params[i]->cols());
      }
    }
  }
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));
  auto update = [&](Mat& p, const Mat& g, Mat& m, Mat& v) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p -= (cfg.lr * (m / bc1).array() / ((v / bc2).array().sqrt() + cfg.eps)).matrix();
  };
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    p->ensure_grad();
    update(p->re, p->gre, state.m_re[i], state.v_re[i]);
    if (p->is_complex()) update(p->im, p->gim, state.m_im[i], state.v_im[i]);
  }
}

Adam::Adam(std::vector<Value> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {}

void Adam::step() { adam_step(params_, cfg_, state_); }

void Adam::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

}  // namespace sdopf::ad
