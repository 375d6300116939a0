#pragma once

// Dynamic group-based interaction: pairwise interaction scores between person
// states, per-step group assignment with a low-temperature softmax relaxation
// of the argmax, and the group-level recurrent update.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "vidcast/autodiff.hpp"
#include "vidcast/nn.hpp"

namespace vidcast::group {

using ad::Var;

// How gradients reach the assignment.
//  StraightThrough: forward values use the hard assignment, gradients use the
//                   softmax relaxation.
//  Soft:            forward and backward both use the softmax weights.
enum class AssignmentMode { StraightThrough, Soft };

struct InteractionParams {
  Var w_hh;  // (H, H)
  Var b_hh;  // (H)
  Var w_hs;  // (1, H)
  Var b_hs;  // (1)

  std::size_t state_size() const { return w_hh.dim(0); }

  static InteractionParams create(nn::ParameterSet& ps, const std::string& name,
                                  std::size_t hidden, Rng& rng) {
    InteractionParams p;
    p.w_hh = ps.add(name + ".w_hh", nn::glorot({hidden, hidden}, hidden, hidden, rng));
    p.b_hh = ps.add(name + ".b_hh", Tensor({hidden}));
    p.w_hs = ps.add(name + ".w_hs", nn::glorot({1, hidden}, hidden, 1, rng));
    p.b_hs = ps.add(name + ".b_hs", Tensor({1}));
    return p;
  }
  static InteractionParams bind(nn::ParameterSet& ps, const std::string& name) {
    return {ps.get(name + ".w_hh"), ps.get(name + ".b_hh"), ps.get(name + ".w_hs"),
            ps.get(name + ".b_hs")};
  }
};

struct GroupAssignment {
  Var soft;                       // (N, N-1), rows sum to one
  std::vector<std::size_t> hard;  // group index per person
  Tensor scores;                  // (N, N-1) candidate scores before the softmax
  std::size_t groups = 0;

  std::size_t persons() const { return hard.size(); }
  std::vector<std::size_t> counts() const {
    std::vector<std::size_t> c(groups, 0);
    for (auto k : hard) ++c[k];
    return c;
  }
  Tensor hard_one_hot() const {
    Tensor m({hard.size(), groups});
    for (std::size_t i = 0; i < hard.size(); ++i) m.at(i, hard[i]) = 1.0;
    return m;
  }
  bool same_group(std::size_t i, std::size_t j) const { return hard[i] == hard[j]; }
};

// Persons 0 and 1 share group 0; person i >= 2 starts alone in group i-1.
inline GroupAssignment init_groups(std::size_t persons) {
  if (persons < 2) throw std::invalid_argument("init_groups: need at least 2 persons");
  GroupAssignment a;
  a.groups = persons - 1;
  a.hard.resize(persons);
  a.hard[0] = 0;
  a.hard[1] = 0;
  for (std::size_t i = 2; i < persons; ++i) a.hard[i] = i - 1;
  a.soft = Var::constant(a.hard_one_hot());
  a.scores = Tensor({persons, a.groups});
  return a;
}

inline void require_state_size(const Tensor& h, std::size_t n, const char* what) {
  if (h.size() != n)
    throw ShapeError(std::string(what) + ": state length " + std::to_string(h.size()) +
                     " does not match interaction size " + std::to_string(n));
}

// Scalar interaction score sigma(W_hs (W_hh (h_i + h_j) + b_hh) + b_hs).
inline double interaction_score(const Tensor& h_i, const Tensor& h_j,
                                const InteractionParams& params) {
  const std::size_t n = params.state_size();
  require_state_size(h_i, n, "interaction_score");
  require_state_size(h_j, n, "interaction_score");
  Eigen::VectorXd sum(static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < n; ++k) sum[static_cast<Eigen::Index>(k)] = h_i[k] + h_j[k];
  const Eigen::VectorXd hidden =
      ad::as_mat(params.w_hh.value(), n, n) * sum +
      Eigen::Map<const Eigen::VectorXd>(params.b_hh.value().data(), static_cast<Eigen::Index>(n));
  const double z = (ad::as_mat(params.w_hs.value(), 1, n) * hidden)(0, 0) + params.b_hs.value()[0];
  return ad::sigmoid_value(z);
}

// All pairwise scores for row-stacked states H (N x H_p), differentiable.
// The state-to-score map is affine, so it is applied per person and summed:
// s_i + s_j + (W_hs b_hh + b_hs).
inline Var interaction_matrix(const Var& states, const InteractionParams& params) {
  ad::require_rank(states, 2, "interaction_matrix");
  if (states.dim(1) != params.state_size())
    throw ShapeError("interaction_matrix: state width " + std::to_string(states.dim(1)) +
                     " vs " + std::to_string(params.state_size()));
  Var projected = ad::linear(ad::linear(states, params.w_hh), params.w_hs);  // (N,1)
  Var offset = ad::add(ad::linear(ad::reshape(params.b_hh, {1, params.state_size()}), params.w_hs),
                       ad::reshape(params.b_hs, {1, 1}));                   // (1,1)
  const std::size_t n = states.dim(0);
  Var pair = ad::outer_add(projected, projected);
  Var ones = Var::constant(Tensor({n * n, 1}, 1.0));
  Var bias = ad::reshape(ad::matmul(ones, offset), {n, n});
  return ad::sigmoid(ad::add(pair, bias));
}

// Relative tolerance under which two candidate scores count as tied.
inline constexpr double kTieTolerance = 1e-12;

// Argmax with ties broken toward `previous`, then toward the lowest index.
inline std::size_t argmax_with_tiebreak(const double* row, std::size_t n, std::size_t previous) {
  double best = row[0];
  for (std::size_t k = 1; k < n; ++k) best = std::max(best, row[k]);
  const double tol = kTieTolerance * std::max(1.0, std::abs(best));
  if (previous < n && row[previous] >= best - tol) return previous;
  for (std::size_t k = 0; k < n; ++k)
    if (row[k] >= best - tol) return k;
  return 0;
}

struct AssignOptions {
  double temperature = 1.0;
  Rng* gumbel = nullptr;  // adds Gumbel(0,1) noise to the logits when set
};

// One group-membership decision per person from the previous assignment.
// Candidate score of group k for person i is the mean of p_ij over the
// previous members j of k (p_ii is part of that mean when k is i's own
// group); an empty group scores p_ii.
inline GroupAssignment assign_groups(const Var& states, const GroupAssignment& prev,
                                     const InteractionParams& params, AssignOptions opt = {}) {
  if (!(opt.temperature > 0)) throw std::invalid_argument("assign_groups: temperature must be > 0");
  const std::size_t n = states.dim(0);
  if (prev.persons() != n) throw ShapeError("assign_groups: person count mismatch");
  const std::size_t groups = prev.groups;
  const auto counts = prev.counts();

  Tensor member_mean({n, groups});
  Tensor empty_row({1, groups});
  for (std::size_t j = 0; j < n; ++j)
    member_mean.at(j, prev.hard[j]) = 1.0 / static_cast<double>(counts[prev.hard[j]]);
  for (std::size_t k = 0; k < groups; ++k) empty_row[k] = counts[k] == 0 ? 1.0 : 0.0;

  Var p = interaction_matrix(states, params);
  Var scores = ad::add(ad::matmul(p, Var::constant(std::move(member_mean))),
                       ad::matmul(ad::diagonal(p), Var::constant(std::move(empty_row))));

  Var logits = ad::scale(scores, 1.0 / opt.temperature);
  if (opt.gumbel) {
    Tensor noise({n, groups});
    for (std::size_t i = 0; i < noise.size(); ++i) {
      double u = opt.gumbel->uniform();
      while (u <= 0.0) u = opt.gumbel->uniform();
      noise[i] = -std::log(-std::log(u));
    }
    logits = ad::add(logits, Var::constant(std::move(noise)));
  }

  GroupAssignment next;
  next.groups = groups;
  next.scores = scores.value();
  next.soft = ad::softmax_rows(logits);
  next.hard.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    next.hard[i] = argmax_with_tiebreak(logits.value().data() + i * groups, groups, prev.hard[i]);
  return next;
}

// Membership weights used inside the graph: (N x groups).
inline Var membership_weights(const GroupAssignment& a, AssignmentMode mode) {
  if (mode == AssignmentMode::Soft) return a.soft;
  if (!a.soft.requires_grad()) return Var::constant(a.hard_one_hot());
  return ad::add(Var::constant(a.hard_one_hot()), ad::sub(a.soft, ad::stop_gradient(a.soft)));
}

struct GroupParams {
  Var w_hg;  // (G, H_p) person-to-group projection
  nn::LstmCell cell;

  std::size_t group_size() const { return cell.hidden; }

  static GroupParams create(nn::ParameterSet& ps, const std::string& name,
                            std::size_t person_hidden, std::size_t group_hidden, Rng& rng) {
    GroupParams g;
    g.w_hg = ps.add(name + ".w_hg",
                    nn::glorot({group_hidden, person_hidden}, person_hidden, group_hidden, rng));
    g.cell = nn::LstmCell::create(ps, name + ".cell", group_hidden, group_hidden, rng);
    return g;
  }
  static GroupParams bind(nn::ParameterSet& ps, const std::string& name) {
    return {ps.get(name + ".w_hg"), nn::LstmCell::bind(ps, name + ".cell")};
  }
};

struct GroupStates {
  nn::LstmState state;              // (groups, G) hidden and cell memory
  std::vector<std::size_t> counts;  // members per group

  std::size_t groups() const { return counts.size(); }
  const Var& g() const { return state.h; }
};

inline GroupStates zero_group_states(std::size_t groups, const GroupParams& params) {
  GroupStates s;
  s.state = params.cell.zero_state(groups);
  s.counts.assign(groups, 0);
  return s;
}

// Advance every group's cell one step. A nonempty group's input is the mean of
// W_hg h_i over its members; an empty group receives a zero input.
inline GroupStates update_group_states(const GroupAssignment& a, const Var& states,
                                       const GroupStates& prev, const GroupParams& params,
                                       AssignmentMode mode = AssignmentMode::StraightThrough) {
  const std::size_t n = states.dim(0);
  if (a.persons() != n || prev.groups() != a.groups)
    throw ShapeError("update_group_states: assignment/state size mismatch");
  if (states.dim(1) != params.w_hg.dim(1))
    throw ShapeError("update_group_states: person state width mismatch");
  Var weights = membership_weights(a, mode);
  Var projected = ad::linear(states, params.w_hg);                       // (N, G)
  Var sums = ad::matmul(ad::transpose(weights), projected);              // (groups, G)
  const auto counts = a.counts();
  Var divisor;
  if (mode == AssignmentMode::Soft) {
    divisor = ad::clamp_min(ad::matmul(ad::transpose(weights), Var::constant(Tensor({n, 1}, 1.0))),
                            1.0);
  } else {
    Tensor d({a.groups, 1});
    for (std::size_t k = 0; k < a.groups; ++k)
      d[k] = static_cast<double>(std::max<std::size_t>(counts[k], 1));
    divisor = Var::constant(std::move(d));
  }
  GroupStates next;
  next.state = params.cell.step(ad::div_rows(sums, divisor), prev.state);
  next.counts = counts;
  return next;
}

// Interaction context for every person, (N x G). In straight-through mode the
// forward value is exactly the state of the person's hard group.
inline Var context_matrix(const GroupAssignment& a, const GroupStates& s,
                          AssignmentMode mode = AssignmentMode::StraightThrough) {
  return ad::matmul(membership_weights(a, mode), s.g());
}

inline Tensor group_context(const GroupAssignment& a, const GroupStates& s, std::size_t i) {
  if (i >= a.persons()) throw std::out_of_range("group_context: person index");
  const std::size_t width = s.g().dim(1);
  Tensor out({width});
  for (std::size_t c = 0; c < width; ++c) out[c] = s.g().value().at(a.hard[i], c);
  return out;
}

// Exponential decay from start to end over `total` iterations.
inline double temperature_at(std::size_t iteration, std::size_t total, double start = 1.0,
                             double end = 0.1) {
  if (total <= 1) return end;
  const double frac =
      std::min(1.0, static_cast<double>(iteration) / static_cast<double>(total - 1));
  return start * std::pow(end / start, frac);
}

}  // namespace vidcast::group
