#pragma once

#include <cmath>

#include <Eigen/Core>

#include "kgcap/error.hpp"

namespace kgcap {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Gate blocks are stacked in the order input, forget, output, candidate.
struct LstmParams {
  Mat W;  // 4h x input
  Mat U;  // 4h x h
  Vec b;  // 4h

  static LstmParams zeros(int input, int hidden) {
    return {Mat::Zero(4 * hidden, input), Mat::Zero(4 * hidden, hidden), Vec::Zero(4 * hidden)};
  }

  int input_size() const { return static_cast<int>(W.cols()); }
  int hidden_size() const { return static_cast<int>(U.cols()); }

  template <class F>
  void visit(F&& f) {
    f("W", W);
    f("U", U);
    f("b", b);
  }
  template <class F>
  void visit(F&& f) const {
    f("W", W);
    f("U", U);
    f("b", b);
  }
};

struct LstmState {
  Vec h;
  Vec c;

  static LstmState zeros(int hidden) { return {Vec::Zero(hidden), Vec::Zero(hidden)}; }
};

// Activations kept from a forward step for the backward pass.
struct LstmStepCache {
  Vec x, h_prev, c_prev;
  Vec i, f, o, g;
  Vec c, tanh_c;
};

namespace detail {
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
}  // namespace detail

inline LstmState lstm_step(const LstmParams& p, const Vec& x, const LstmState& s,
                           LstmStepCache* cache = nullptr) {
  const Eigen::Index h = p.hidden_size();
  if (x.size() != p.input_size() || s.h.size() != h || s.c.size() != h)
    throw ValidationError("lstm_step: dimension mismatch");
  if (!x.allFinite() || !s.h.allFinite() || !s.c.allFinite())
    throw NumericError("lstm_step: non-finite input");

  Vec z = p.W * x + p.U * s.h + p.b;
  Vec i = z.segment(0, h).unaryExpr(&detail::sigmoid);
  Vec f = z.segment(h, h).unaryExpr(&detail::sigmoid);
  Vec o = z.segment(2 * h, h).unaryExpr(&detail::sigmoid);
  Vec g = z.segment(3 * h, h).array().tanh().matrix();

  LstmState next;
  next.c = f.cwiseProduct(s.c) + i.cwiseProduct(g);
  Vec tanh_c = next.c.array().tanh().matrix();
  next.h = o.cwiseProduct(tanh_c);

  if (cache) {
    *cache = {x, s.h, s.c, std::move(i), std::move(f), std::move(o), std::move(g), next.c,
              std::move(tanh_c)};
  }
  return next;
}

struct LstmStepGrad {
  Vec dx, dh_prev, dc_prev;
};

// Backpropagates through one cached step. `dh` is the total gradient reaching
// this step's hidden output; `dc` the gradient arriving on its cell state from
// the following step. Parameter gradients accumulate into `grad`.
inline LstmStepGrad lstm_step_backward(const LstmParams& p, const LstmStepCache& k,
                                       const Vec& dh, const Vec& dc_in, LstmParams& grad) {
  const Eigen::Index h = p.hidden_size();
  Vec dc = dc_in + dh.cwiseProduct(k.o).cwiseProduct(
                       (1.0 - k.tanh_c.array().square()).matrix());
  Vec dz(4 * h);
  dz.segment(0, h) = dc.cwiseProduct(k.g).cwiseProduct(
      k.i.cwiseProduct((1.0 - k.i.array()).matrix()));
  dz.segment(h, h) = dc.cwiseProduct(k.c_prev).cwiseProduct(
      k.f.cwiseProduct((1.0 - k.f.array()).matrix()));
  dz.segment(2 * h, h) = dh.cwiseProduct(k.tanh_c).cwiseProduct(
      k.o.cwiseProduct((1.0 - k.o.array()).matrix()));
  dz.segment(3 * h, h) =
      dc.cwiseProduct(k.i).cwiseProduct((1.0 - k.g.array().square()).matrix());

  grad.W.noalias() += dz * k.x.transpose();
  grad.U.noalias() += dz * k.h_prev.transpose();
  grad.b += dz;
  return {p.W.transpose() * dz, p.U.transpose() * dz, dc.cwiseProduct(k.f)};
}

}  // namespace kgcap
