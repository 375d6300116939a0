#pragma once

// Hierarchical pose forecaster: person-level recurrent encoding with group
// interaction context, coarse autoregressive rollout, and a spatio-temporal
// joint refiner. Vanilla (no interaction) and social-pooling baselines share
// the same person path.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidcast/checkpoint.hpp"
#include "vidcast/group_dynamics.hpp"
#include "vidcast/nn.hpp"
#include "vidcast/pose_data.hpp"

namespace vidcast::forecast {

using ad::Var;
using group::AssignmentMode;

enum class ModelKind { MultiGranularity, Vanilla, Social };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::MultiGranularity: return "mg";
    case ModelKind::Vanilla: return "vanilla";
    case ModelKind::Social: return "social";
  }
  return "mg";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "mg") return ModelKind::MultiGranularity;
  if (s == "vanilla") return ModelKind::Vanilla;
  if (s == "social") return ModelKind::Social;
  throw std::invalid_argument("unknown model kind '" + s + "' (expected mg|vanilla|social)");
}

struct ForecasterConfig {
  ModelKind kind = ModelKind::MultiGranularity;
  std::size_t joints = kDefaultJoints;
  std::size_t person_hidden = 256;
  std::size_t group_hidden = 256;
  std::size_t joint_hidden = 128;
  std::size_t social_grid = 4;
  double social_extent = 0.5;
  AssignmentMode mode = AssignmentMode::StraightThrough;
  bool gumbel = false;
  std::uint64_t init_seed = 0;

  std::size_t pose_width() const { return 2 * joints; }
  std::size_t input_width() const { return pose_width() + 4 + group_hidden; }
};

inline nlohmann::json to_json(const ForecasterConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"joints", c.joints},
          {"person_hidden", c.person_hidden},
          {"group_hidden", c.group_hidden},
          {"joint_hidden", c.joint_hidden},
          {"social_grid", c.social_grid},
          {"social_extent", c.social_extent},
          {"assignment_mode", c.mode == AssignmentMode::Soft ? "soft" : "straight_through"},
          {"gumbel", c.gumbel},
          {"init_seed", c.init_seed}};
}

inline ForecasterConfig forecaster_config_from_json(const nlohmann::json& j,
                                                    ForecasterConfig c = {}) {
  if (j.contains("kind")) c.kind = model_kind_from_string(j["kind"].get<std::string>());
  if (j.contains("joints")) c.joints = j["joints"].get<std::size_t>();
  if (j.contains("person_hidden")) c.person_hidden = j["person_hidden"].get<std::size_t>();
  if (j.contains("group_hidden")) c.group_hidden = j["group_hidden"].get<std::size_t>();
  if (j.contains("joint_hidden")) c.joint_hidden = j["joint_hidden"].get<std::size_t>();
  if (j.contains("social_grid")) c.social_grid = j["social_grid"].get<std::size_t>();
  if (j.contains("social_extent")) c.social_extent = j["social_extent"].get<double>();
  if (j.contains("assignment_mode")) {
    const auto m = j["assignment_mode"].get<std::string>();
    if (m != "soft" && m != "straight_through")
      throw std::invalid_argument("assignment_mode must be soft|straight_through");
    c.mode = m == "soft" ? AssignmentMode::Soft : AssignmentMode::StraightThrough;
  }
  if (j.contains("gumbel")) c.gumbel = j["gumbel"].get<bool>();
  if (j.contains("init_seed")) c.init_seed = j["init_seed"].get<std::uint64_t>();
  return c;
}

// Spatio-temporal LSTM cell: each (joint, time) node reads its spatial
// predecessor (parent joint, same step) and its temporal predecessor (same
// joint, previous step). Gate order: input, spatial forget, temporal forget,
// output, candidate.
struct StLstmCell {
  Var w_x, w_s, w_t, bias;
  std::size_t hidden = 0;

  static StLstmCell create(nn::ParameterSet& ps, const std::string& name, std::size_t input,
                           std::size_t hidden, Rng& rng) {
    StLstmCell c;
    c.hidden = hidden;
    c.w_x = ps.add(name + ".w_x", nn::glorot({5 * hidden, input}, input, hidden, rng));
    c.w_s = ps.add(name + ".w_s", nn::glorot({5 * hidden, hidden}, hidden, hidden, rng));
    c.w_t = ps.add(name + ".w_t", nn::glorot({5 * hidden, hidden}, hidden, hidden, rng));
    Tensor b({5 * hidden});
    for (std::size_t i = hidden; i < 3 * hidden; ++i) b[i] = 1.0;
    c.bias = ps.add(name + ".b", std::move(b));
    return c;
  }
  static StLstmCell bind(nn::ParameterSet& ps, const std::string& name) {
    StLstmCell c{ps.get(name + ".w_x"), ps.get(name + ".w_s"), ps.get(name + ".w_t"),
                 ps.get(name + ".b"), 0};
    c.hidden = c.w_s.dim(1);
    return c;
  }

  nn::LstmState step(const Var& x, const nn::LstmState& spatial,
                     const nn::LstmState& temporal) const {
    Var gates = ad::add(ad::add(ad::linear(x, w_x, bias), ad::linear(spatial.h, w_s)),
                        ad::linear(temporal.h, w_t));
    const std::size_t H = hidden;
    Var i = ad::sigmoid(ad::slice_cols(gates, 0, H));
    Var fs = ad::sigmoid(ad::slice_cols(gates, H, H));
    Var ft = ad::sigmoid(ad::slice_cols(gates, 2 * H, H));
    Var o = ad::sigmoid(ad::slice_cols(gates, 3 * H, H));
    Var u = ad::tanh(ad::slice_cols(gates, 4 * H, H));
    Var c = ad::add(ad::add(ad::mul(i, u), ad::mul(fs, spatial.c)), ad::mul(ft, temporal.c));
    return {ad::mul(o, ad::tanh(c)), c};
  }
};

// One node of the refiner unroll.
struct RefineStep {
  std::size_t t;
  std::size_t joint;
  std::optional<std::size_t> spatial_prev;   // parent joint at the same step
  std::optional<std::size_t> temporal_prev;  // same joint at the previous step

  friend bool operator==(const RefineStep&, const RefineStep&) = default;
};

// Time-major schedule; joints within a step follow the tree's DFS order.
inline std::vector<RefineStep> refine_schedule(std::size_t steps, const KinematicTree& tree) {
  std::vector<RefineStep> out;
  const auto order = tree.dfs_order();
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t j : order) {
      RefineStep s{t, j, std::nullopt, std::nullopt};
      if (tree.parent[j] >= 0) s.spatial_prev = static_cast<std::size_t>(tree.parent[j]);
      if (t > 0) s.temporal_prev = j;
      out.push_back(s);
    }
  return out;
}

// Per-clip tensors, one (N x width) matrix per frame.
struct ClipTensors {
  std::vector<Tensor> poses;  // (N, 2J)
  std::vector<Tensor> boxes;  // (N, 4)
  std::size_t T1 = 0, T2 = 0;
};

inline ClipTensors clip_tensors(const SceneClip& clip) {
  ClipTensors ct;
  ct.T1 = clip.T1;
  ct.T2 = clip.T2;
  const std::size_t n = clip.persons(), J = clip.J;
  for (std::size_t t = 0; t < clip.frames(); ++t) {
    Tensor p({n, 2 * J}), b({n, 4});
    for (std::size_t i = 0; i < n; ++i) {
      const auto& pose = clip.tracks[i].poses[t];
      for (std::size_t j = 0; j < J; ++j) {
        p.at(i, 2 * j) = pose.joints[j].x;
        p.at(i, 2 * j + 1) = pose.joints[j].y;
      }
      const auto& bx = clip.tracks[i].boxes[t];
      b.at(i, 0) = bx.cx;
      b.at(i, 1) = bx.cy;
      b.at(i, 2) = bx.w;
      b.at(i, 3) = bx.h;
    }
    ct.poses.push_back(std::move(p));
    ct.boxes.push_back(std::move(b));
  }
  return ct;
}

// Recurrent state after observing T1 frames.
struct Snapshot {
  nn::LstmState person;
  group::GroupStates groups;
  group::GroupAssignment assignment;
  Var context;     // (N, G) context fed at the next step
  Tensor last_pose;  // (N, 2J)
  Tensor last_box;   // (N, 4)
  std::vector<group::GroupAssignment> history;
};

struct RunOptions {
  double temperature = 1.0;
  Rng* gumbel = nullptr;
  // Run the shared person path as another model kind (baseline probes).
  std::optional<ModelKind> kind;
};

// Differentiable rollout output.
struct Rollout {
  std::vector<Var> coarse;  // T2 x (N, 2J)
  std::vector<group::GroupAssignment> history;
};

struct ForecastResult {
  std::vector<Tensor> coarse;   // T2 x (N, 2J)
  std::vector<Tensor> refined;  // T2 x (N, 2J)
  std::vector<Tensor> deltas;   // refined - coarse
  std::vector<std::vector<std::size_t>> hard_history;  // observed + future steps
  std::vector<Tensor> soft_history;
};

class Forecaster {
 public:
  explicit Forecaster(ForecasterConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.joints < 1) throw std::invalid_argument("forecaster: joints must be positive");
    tree_ = KinematicTree::for_joints(cfg_.joints);
    Rng rng(cfg_.init_seed);
    person_ = nn::LstmCell::create(params_, "person.cell", cfg_.input_width(), cfg_.person_hidden,
                                   rng);
    interaction_ = group::InteractionParams::create(params_, "interaction", cfg_.person_hidden, rng);
    groups_ = group::GroupParams::create(params_, "group", cfg_.person_hidden, cfg_.group_hidden,
                                         rng);
    const std::size_t dec_in = cfg_.person_hidden + cfg_.group_hidden;
    dec_w_ = params_.add("decoder.w",
                         nn::glorot({cfg_.pose_width(), dec_in}, dec_in, cfg_.pose_width(), rng));
    dec_b_ = params_.add("decoder.b", Tensor({cfg_.pose_width()}, 0.5));
    const std::size_t pooled = cfg_.social_grid * cfg_.social_grid * cfg_.person_hidden;
    social_w_ = params_.add("social.w",
                            nn::glorot({cfg_.group_hidden, pooled}, pooled, cfg_.group_hidden, rng));
    refiner_ = StLstmCell::create(params_, "refiner.cell", 2, cfg_.joint_hidden, rng);
    out_w_ = params_.add("refiner.out.w", Tensor({2, cfg_.joint_hidden}));
    out_b_ = params_.add("refiner.out.b", Tensor({2}));
  }

  Forecaster(const Forecaster&) = delete;
  Forecaster& operator=(const Forecaster&) = delete;

  const ForecasterConfig& config() const { return cfg_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }
  const KinematicTree& tree() const { return tree_; }
  const group::InteractionParams& interaction() const { return interaction_; }
  const group::GroupParams& group_params() const { return groups_; }
  bool uses_refiner() const { return cfg_.kind == ModelKind::MultiGranularity; }

  // Parameters trained in the first stage (everything except the refiner).
  std::vector<Var> coarse_parameters() const {
    return params_.select({"person.", "interaction.", "group.", "decoder.", "social."});
  }
  std::vector<Var> refiner_parameters() const { return params_.select({"refiner."}); }

  void check_clip(const ClipTensors& ct) const {
    if (ct.T1 < 1) throw std::invalid_argument("forecaster: T1 must be at least 1");
    if (ct.poses.empty() || ct.poses[0].dim(1) != cfg_.pose_width())
      throw ShapeError("forecaster: clip joint count does not match the model");
    if (ct.poses[0].dim(0) < 2) throw std::invalid_argument("forecaster: need at least 2 persons");
  }

  Snapshot encode_observations(const ClipTensors& ct, RunOptions opt = {}) const {
    check_clip(ct);
    const std::size_t n = ct.poses[0].dim(0);
    Snapshot s;
    s.person = person_.zero_state(n);
    s.groups = group::zero_group_states(n - 1, groups_);
    s.assignment = group::init_groups(n);
    s.context = Var::constant(Tensor({n, cfg_.group_hidden}));
    for (std::size_t t = 0; t < ct.T1; ++t) {
      Var x = ad::concat_cols({Var::constant(ct.poses[t]), Var::constant(ct.boxes[t]), s.context});
      s.person = person_.step(x, s.person);
      advance_context(s, ct.boxes[t], opt);
    }
    s.last_pose = ct.poses[ct.T1 - 1];
    s.last_box = ct.boxes[ct.T1 - 1];
    return s;
  }

  // Autoregressive coarse prediction. With `teacher` set, the pose and box
  // fed at each step come from the ground truth instead of the prediction.
  Rollout rollout_coarse(Snapshot s, std::size_t steps, RunOptions opt = {},
                         const ClipTensors* teacher = nullptr) const {
    if (steps < 1) throw std::invalid_argument("rollout_coarse: T2 must be at least 1");
    Rollout r;
    Var prev_pose = Var::constant(s.last_pose);
    Var prev_box = Var::constant(s.last_box);
    for (std::size_t k = 0; k < steps; ++k) {
      Var ctx = s.context;
      Var x = ad::concat_cols({prev_pose, prev_box, ctx});
      s.person = person_.step(x, s.person);
      Var pred = ad::linear(ad::concat_cols({s.person.h, ctx}), dec_w_, dec_b_);
      r.coarse.push_back(pred);
      advance_context(s, prev_box.value(), opt);
      if (teacher) {
        const std::size_t t = teacher->T1 + k;
        prev_pose = Var::constant(teacher->poses.at(t));
        prev_box = Var::constant(teacher->boxes.at(t));
      } else {
        prev_pose = pred;
      }
    }
    r.history = std::move(s.history);
    return r;
  }

  // Refined poses = coarse + per-joint deltas from the spatio-temporal cell.
  std::vector<Var> refine_poses(const std::vector<Var>& coarse) const {
    const std::size_t J = cfg_.joints;
    if (coarse.empty()) return {};
    const std::size_t n = coarse[0].dim(0);
    const nn::LstmState zero{Var::constant(Tensor({n, cfg_.joint_hidden})),
                             Var::constant(Tensor({n, cfg_.joint_hidden}))};
    std::vector<nn::LstmState> previous(J, zero), current(J, zero);
    std::vector<Var> deltas(J);
    std::vector<Var> refined;
    std::size_t t_seen = 0;
    for (const auto& step : refine_schedule(coarse.size(), tree_)) {
      if (step.t != t_seen) {
        refined.push_back(assemble(coarse[t_seen], deltas));
        previous = current;
        t_seen = step.t;
      }
      Var x = ad::slice_cols(coarse[step.t], 2 * step.joint, 2);
      const nn::LstmState& sp = step.spatial_prev ? current[*step.spatial_prev] : zero;
      const nn::LstmState& tp = step.temporal_prev ? previous[step.joint] : zero;
      current[step.joint] = refiner_.step(x, sp, tp);
      deltas[step.joint] = ad::linear(current[step.joint].h, out_w_, out_b_);
    }
    refined.push_back(assemble(coarse[t_seen], deltas));
    return refined;
  }

  ForecastResult forecast(const SceneClip& clip, std::size_t steps, RunOptions opt = {}) const {
    const ClipTensors ct = clip_tensors(clip);
    Snapshot s = encode_observations(ct, opt);
    Rollout r = rollout_coarse(std::move(s), steps, opt);
    ForecastResult out;
    const bool refine = opt.kind.value_or(cfg_.kind) == ModelKind::MultiGranularity;
    std::vector<Var> refined = refine ? refine_poses(r.coarse) : r.coarse;
    for (std::size_t t = 0; t < steps; ++t) {
      out.coarse.push_back(r.coarse[t].value());
      out.refined.push_back(refined[t].value());
      Tensor d = refined[t].value();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= r.coarse[t].value()[i];
      out.deltas.push_back(std::move(d));
    }
    for (const auto& a : r.history) {
      out.hard_history.push_back(a.hard);
      out.soft_history.push_back(a.soft.value());
    }
    return out;
  }

  // Spatial-grid pooling of neighbours' states around each person, embedded
  // to the context width without bias so that an empty neighbourhood yields
  // a zero context.
  Var social_context(const Var& states, const Tensor& boxes) const {
    const std::size_t n = states.dim(0), grid = cfg_.social_grid;
    Tensor select({n * grid * grid, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        if (auto cell = social_cell(boxes, i, j)) select.at(i * grid * grid + *cell, j) = 1.0;
      }
    Var pooled = ad::matmul(Var::constant(std::move(select)), states);
    pooled = ad::reshape(pooled, {n, grid * grid * states.dim(1)});
    return ad::linear(pooled, social_w_);
  }

  // Grid cell of neighbour j relative to person i, if inside the window.
  std::optional<std::size_t> social_cell(const Tensor& boxes, std::size_t i, std::size_t j) const {
    const double half = 0.5 * cfg_.social_extent;
    const double dx = boxes.at(j, 0) - boxes.at(i, 0);
    const double dy = boxes.at(j, 1) - boxes.at(i, 1);
    if (dx < -half || dx >= half || dy < -half || dy >= half) return std::nullopt;
    const auto g = static_cast<double>(cfg_.social_grid);
    const auto cx = std::min(cfg_.social_grid - 1,
                             static_cast<std::size_t>((dx + half) / cfg_.social_extent * g));
    const auto cy = std::min(cfg_.social_grid - 1,
                             static_cast<std::size_t>((dy + half) / cfg_.social_extent * g));
    return cy * cfg_.social_grid + cx;
  }

  void save(Checkpoint& ck) const {
    ck.meta["model"] = to_json(cfg_);
    ck.put_parameters(params_, "param/");
  }

  static std::unique_ptr<Forecaster> load(const Checkpoint& ck) {
    auto m = std::make_unique<Forecaster>(forecaster_config_from_json(ck.meta.at("model")));
    ck.load_parameters(m->params_, "param/");
    return m;
  }

 private:
  void advance_context(Snapshot& s, const Tensor& boxes, const RunOptions& opt) const {
    switch (opt.kind.value_or(cfg_.kind)) {
      case ModelKind::MultiGranularity: {
        group::AssignOptions ao{opt.temperature, cfg_.gumbel ? opt.gumbel : nullptr};
        s.assignment = group::assign_groups(s.person.h, s.assignment, interaction_, ao);
        s.groups = group::update_group_states(s.assignment, s.person.h, s.groups, groups_, cfg_.mode);
        s.context = group::context_matrix(s.assignment, s.groups, cfg_.mode);
        s.history.push_back(s.assignment);
        break;
      }
      case ModelKind::Social:
        s.context = social_context(s.person.h, boxes);
        break;
      case ModelKind::Vanilla:
        break;
    }
  }

  Var assemble(const Var& coarse, const std::vector<Var>& deltas) const {
    return ad::add(coarse, ad::concat_cols(deltas));
  }

  ForecasterConfig cfg_;
  KinematicTree tree_;
  nn::ParameterSet params_;
  nn::LstmCell person_;
  group::InteractionParams interaction_;
  group::GroupParams groups_;
  Var dec_w_, dec_b_, social_w_;
  StLstmCell refiner_;
  Var out_w_, out_b_;
};

// Same person path with a zero interaction context and no refinement.
inline std::vector<Tensor> forecast_baseline_vanilla(const SceneClip& clip, const Forecaster& model,
                                                     std::size_t steps, RunOptions opt = {}) {
  opt.kind = ModelKind::Vanilla;
  return model.forecast(clip, steps, opt).coarse;
}

// Same person path with social-pooling context and no refinement.
inline std::vector<Tensor> forecast_baseline_social(const SceneClip& clip, const Forecaster& model,
                                                    std::size_t steps, RunOptions opt = {}) {
  opt.kind = ModelKind::Social;
  return model.forecast(clip, steps, opt).coarse;
}

}  // namespace vidcast::forecast
