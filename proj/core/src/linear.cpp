#include "sbt/linear.hpp"

#include <cmath>

namespace sbt {

namespace {

Shape output_shape(const Tensor& x, std::size_t out) {
  if (x.rank() == 3) return Shape{x.dim(0), x.dim(1), out};
  if (x.rank() == 2) return Shape{x.dim(0), out};
  return Shape{out};
}

}  // namespace

Linear Linear::dense(std::size_t out, std::size_t in, bool bias, Rng& rng, const std::string& id) {
  Linear l;
  l.id_ = id;
  l.in_ = in;
  l.out_ = out;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w(Shape{out, in});
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  l.weight_ = GradSlot(id + ".weight", std::move(w));
  if (bias) {
    Tensor b(Shape{out});
    for (auto& v : b.values()) v = rng.uniform(-bound, bound);
    l.bias_ = GradSlot(id + ".bias", std::move(b));
  }
  return l;
}

Linear Linear::binary(std::size_t out, std::size_t in, const BipropLayer::Options& opt, Rng& rng,
                      const std::string& id) {
  Linear l;
  l.id_ = id;
  l.in_ = in;
  l.out_ = out;
  l.binary_ = BipropLayer::linear(out, in, opt, rng, id + ".scores");
  return l;
}

Tensor Linear::forward(const Tensor& x) {
  if (binary_) return binary_->forward(x);
  if (x.shape().back() != in_)
    throw ShapeError("linear '" + id_ + "': input " + x.shape().str() + " vs weights " +
                     weight_.value.shape().str());
  cached_input_ = x;
  const std::size_t n = x.size() / in_;
  Tensor y(output_shape(x, out_));
  linear_nt<double>(x.values(), weight_.value.values(), y.values(), n, in_, out_);
  if (bias_)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out_; ++o) y[i * out_ + o] += bias_->value[o];
  return y;
}

Tensor Linear::backward(const Tensor& g) {
  if (binary_) return binary_->backward(g);
  const std::size_t n = cached_input_.size() / in_;
  if (g.size() != n * out_) throw ShapeError("linear '" + id_ + "' backward: gradient " + g.shape().str());
  Tensor dx(cached_input_.shape());
  linear_nt_backward<double>(cached_input_.values(), weight_.value.values(), g.values(), dx.values(),
                             weight_.grad.values(), n, in_, out_);
  if (bias_)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out_; ++o) bias_->grad[o] += g[i * out_ + o];
  return dx;
}

void Linear::collect(std::vector<GradSlot*>& out) {
  if (binary_) {
    out.push_back(&binary_->scores());
    return;
  }
  out.push_back(&weight_);
  if (bias_) out.push_back(&*bias_);
}

}  // namespace sbt
