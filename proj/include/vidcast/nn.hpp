#pragma once

// Parameter bookkeeping, recurrent cells, and the first-order optimizer
// shared by the pose and rendering networks.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "vidcast/autodiff.hpp"
#include "vidcast/rng.hpp"

namespace vidcast::nn {

using ad::Var;

// Ordered, named collection of trainable tensors.
class ParameterSet {
 public:
  Var& add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Var::parameter(std::move(init))});
    return entries_.back().var;
  }

  Var& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return entries_[it->second].var;
  }
  const Var& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return entries_[it->second].var;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  struct Entry {
    std::string name;
    Var var;
  };
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  // Entries whose names start with one of the prefixes.
  std::vector<Var> select(const std::vector<std::string>& prefixes) const {
    std::vector<Var> out;
    for (const auto& e : entries_)
      for (const auto& p : prefixes)
        if (e.name.rfind(p, 0) == 0) {
          out.push_back(e.var);
          break;
        }
    return out;
  }
  std::vector<Var> all() const {
    std::vector<Var> out;
    for (const auto& e : entries_) out.push_back(e.var);
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.var.size();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

inline Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

// Glorot-style bound from fan-in and fan-out.
inline Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_init(std::move(shape), bound, rng);
}

struct LstmState {
  Var h;
  Var c;
};

// Standard LSTM over row-batched inputs: x (B x in), state (B x hidden).
struct LstmCell {
  Var w_x, w_h, bias;
  std::size_t hidden = 0;

  static LstmCell create(ParameterSet& ps, const std::string& name, std::size_t input,
                         std::size_t hidden, Rng& rng) {
    LstmCell cell;
    cell.hidden = hidden;
    cell.w_x = ps.add(name + ".w_x", glorot({4 * hidden, input}, input, hidden, rng));
    cell.w_h = ps.add(name + ".w_h", glorot({4 * hidden, hidden}, hidden, hidden, rng));
    Tensor b({4 * hidden});
    for (std::size_t i = hidden; i < 2 * hidden; ++i) b[i] = 1.0;  // forget gate
    cell.bias = ps.add(name + ".b", std::move(b));
    return cell;
  }

  static LstmCell bind(ParameterSet& ps, const std::string& name) {
    LstmCell cell;
    cell.w_x = ps.get(name + ".w_x");
    cell.w_h = ps.get(name + ".w_h");
    cell.bias = ps.get(name + ".b");
    cell.hidden = cell.w_h.dim(1);
    return cell;
  }

  LstmState zero_state(std::size_t batch) const {
    return {Var::constant(Tensor({batch, hidden})), Var::constant(Tensor({batch, hidden}))};
  }

  // Gate order: input, forget, candidate, output.
  LstmState step(const Var& x, const LstmState& s) const {
    Var gates = ad::add(ad::linear(x, w_x, bias), ad::linear(s.h, w_h));
    Var i = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
    Var f = ad::sigmoid(ad::slice_cols(gates, hidden, hidden));
    Var g = ad::tanh(ad::slice_cols(gates, 2 * hidden, hidden));
    Var o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, hidden));
    Var c = ad::add(ad::mul(f, s.c), ad::mul(i, g));
    return {ad::mul(o, ad::tanh(c)), c};
  }
};

// Adaptive-moment optimizer with bias correction.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  Adam(std::vector<Var> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Var& p = params_[k];
      if (!p.node()->has_grad()) continue;
      const Tensor& g = p.node()->grad;
      Tensor& w = p.mutable_value();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m_[k][i] = opt_.beta1 * m_[k][i] + (1 - opt_.beta1) * g[i];
        v_[k][i] = opt_.beta2 * v_[k][i] + (1 - opt_.beta2) * g[i] * g[i];
        w[i] -= opt_.lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + opt_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::vector<Var>& params() { return params_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  long long steps() const { return t_; }
  void set_steps(long long t) { t_ = t; }
  Options& options() { return opt_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  Options opt_;
  long long t_ = 0;
};

inline double global_grad_norm(const std::vector<Var>& params) {
  double s = 0.0;
  for (const auto& p : params)
    if (p.node()->has_grad()) s += p.node()->grad.squared_norm();
  return std::sqrt(s);
}

// Rescale gradients so their joint L2 norm does not exceed max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(std::vector<Var>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& p : params)
      if (p.node()->has_grad())
        for (auto& g : p.node()->grad.vec()) g *= s;
  }
  return norm;
}

}  // namespace vidcast::nn
