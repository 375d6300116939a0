#pragma once

// Two-stage training of the pose forecaster.
//   stage 1: person/group/decoder parameters, coarse pose loss.
//   stage 2: all parameters, refined loss + w_s1 * coarse loss.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidcast/forecaster.hpp"

namespace vidcast::training {

using ad::Var;

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 1e-5;
  double w_s1 = 0.1;
  double clip_norm = 5.0;
  int stage = 1;
  std::size_t iterations = 200;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  double tau_start = 1.0;
  double tau_end = 0.1;
  bool per_joint_average = false;
  // Defaults to ground-truth feedback in stage 1 and closed loop in stage 2.
  std::optional<bool> teacher_forcing;

  bool uses_teacher_forcing() const { return teacher_forcing.value_or(stage == 1); }
};

inline void validate(const TrainConfig& c) {
  if (!(c.lr > 0)) throw std::invalid_argument("train: lr must be > 0");
  if (!(c.w_s1 >= 0)) throw std::invalid_argument("train: w_s1 must be >= 0");
  if (!(c.clip_norm > 0)) throw std::invalid_argument("train: clip_norm must be > 0");
  if (c.stage != 1 && c.stage != 2) throw std::invalid_argument("train: stage must be 1 or 2");
  if (c.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(c.tau_start > 0) || !(c.tau_end > 0))
    throw std::invalid_argument("train: temperatures must be > 0");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j{{"lr", c.lr},
                   {"w_s1", c.w_s1},
                   {"clip_norm", c.clip_norm},
                   {"stage", c.stage},
                   {"iterations", c.iterations},
                   {"batch_size", c.batch_size},
                   {"seed", c.seed},
                   {"tau_start", c.tau_start},
                   {"tau_end", c.tau_end},
                   {"per_joint_average", c.per_joint_average}};
  if (c.teacher_forcing) j["teacher_forcing"] = *c.teacher_forcing;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  if (j.contains("lr")) c.lr = j["lr"].get<double>();
  if (j.contains("w_s1")) c.w_s1 = j["w_s1"].get<double>();
  if (j.contains("clip_norm")) c.clip_norm = j["clip_norm"].get<double>();
  if (j.contains("stage")) c.stage = j["stage"].get<int>();
  if (j.contains("iterations")) c.iterations = j["iterations"].get<std::size_t>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("tau_start")) c.tau_start = j["tau_start"].get<double>();
  if (j.contains("tau_end")) c.tau_end = j["tau_end"].get<double>();
  if (j.contains("per_joint_average")) c.per_joint_average = j["per_joint_average"].get<bool>();
  if (j.contains("teacher_forcing")) c.teacher_forcing = j["teacher_forcing"].get<bool>();
  return c;
}

// (1/N) sum_i sum_t ||pred_i^t - truth_i^t||^2 over the future steps.
// With per_joint set the sum is further divided by the entries per person.
inline Var pose_mse(const std::vector<Var>& pred, const std::vector<Tensor>& truth,
                    bool per_joint = false) {
  if (pred.size() != truth.size() || pred.empty())
    throw ShapeError("pose_mse: step count mismatch");
  std::vector<Var> terms;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    pred[t].value().require_same(truth[t], "pose_mse");
    terms.push_back(ad::squared_distance(pred[t], Var::constant(truth[t])));
  }
  const auto persons = static_cast<double>(pred[0].dim(0));
  double norm = persons;
  if (per_joint) norm *= static_cast<double>(pred.size() * pred[0].dim(1));
  return ad::scale(ad::add_all(terms), 1.0 / norm);
}

inline Var loss_stage1(const std::vector<Var>& coarse, const std::vector<Tensor>& truth,
                       bool per_joint = false) {
  return pose_mse(coarse, truth, per_joint);
}

inline Var loss_stage2(const std::vector<Var>& refined, const std::vector<Var>& coarse,
                       const std::vector<Tensor>& truth, double w_s1, bool per_joint = false) {
  return ad::add(pose_mse(refined, truth, per_joint),
                 ad::scale(pose_mse(coarse, truth, per_joint), w_s1));
}

// Value-level helpers.
inline double loss_stage1(const std::vector<Tensor>& coarse, const std::vector<Tensor>& truth) {
  std::vector<Var> c;
  for (const auto& t : coarse) c.push_back(Var::constant(t));
  return loss_stage1(c, truth).item();
}
inline double loss_stage2(const std::vector<Tensor>& refined, const std::vector<Tensor>& coarse,
                          const std::vector<Tensor>& truth, double w_s1) {
  std::vector<Var> r, c;
  for (const auto& t : refined) r.push_back(Var::constant(t));
  for (const auto& t : coarse) c.push_back(Var::constant(t));
  return loss_stage2(r, c, truth, w_s1).item();
}

inline std::vector<Tensor> future_truth(const forecast::ClipTensors& ct) {
  return {ct.poses.begin() + static_cast<std::ptrdiff_t>(ct.T1), ct.poses.end()};
}

struct LossRecord {
  std::size_t iteration;
  int stage;
  double loss;
};

// Graph of one clip under a given stage.
struct ClipLoss {
  Var loss;
  Var mse1;
};

inline ClipLoss clip_loss(const forecast::Forecaster& model, const forecast::ClipTensors& ct,
                          int stage, const TrainConfig& cfg, forecast::RunOptions opt) {
  auto snap = model.encode_observations(ct, opt);
  auto roll = model.rollout_coarse(std::move(snap), ct.T2, opt,
                                   cfg.uses_teacher_forcing() ? &ct : nullptr);
  const auto truth = future_truth(ct);
  Var mse1 = loss_stage1(roll.coarse, truth, cfg.per_joint_average);
  if (stage == 1 || !model.uses_refiner()) return {mse1, mse1};
  auto refined = model.refine_poses(roll.coarse);
  Var total = ad::add(pose_mse(refined, truth, cfg.per_joint_average), ad::scale(mse1, cfg.w_s1));
  return {total, mse1};
}

// Owns the optimizer state for one stage. Batches are a pure function of the
// iteration index, so an interrupted run resumes onto the same curve.
class PoseTrainer {
 public:
  PoseTrainer(forecast::Forecaster& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    validate(cfg_);
    std::vector<Var> params = cfg_.stage == 1 ? model_.coarse_parameters()
                                              : model_.parameters().all();
    opt_ = nn::Adam(std::move(params), {cfg_.lr});
  }

  const TrainConfig& config() const { return cfg_; }
  std::size_t iteration() const { return iteration_; }
  nn::Adam& optimizer() { return opt_; }

  std::vector<std::size_t> batch_indices(std::size_t iteration, std::size_t n_clips) const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < cfg_.batch_size; ++k) {
      const std::size_t pos = iteration * cfg_.batch_size + k;
      const std::size_t epoch = pos / n_clips;
      Rng rng(mix_seed(cfg_.seed, 1000 + epoch));
      out.push_back(rng.permutation(n_clips)[pos % n_clips]);
    }
    return out;
  }

  double temperature(std::size_t iteration) const {
    return group::temperature_at(iteration, cfg_.iterations, cfg_.tau_start, cfg_.tau_end);
  }

  // One optimizer step; returns the mean batch loss before the update.
  double step(const std::vector<forecast::ClipTensors>& clips) {
    if (clips.empty()) throw TrainingError("no training clips");
    const auto idx = batch_indices(iteration_, clips.size());
    Rng gumbel(mix_seed(cfg_.seed, 7'000'000 + iteration_));
    forecast::RunOptions opt{temperature(iteration_), &gumbel, std::nullopt};
    opt_.zero_grad();
    double total = 0.0;
    for (std::size_t b : idx) {
      ClipLoss cl = clip_loss(model_, clips[b], cfg_.stage, cfg_, opt);
      Var scaled = ad::scale(cl.loss, 1.0 / static_cast<double>(idx.size()));
      if (!std::isfinite(cl.loss.item())) {
        std::ostringstream os;
        os << "non-finite loss at iteration " << iteration_ << " (stage " << cfg_.stage
           << ", clip " << b << ", temperature " << opt.temperature << ")";
        throw TrainingError(os.str());
      }
      ad::backward(scaled);
      total += cl.loss.item();
    }
    last_grad_norm_ = nn::clip_grad_norm(opt_.params(), cfg_.clip_norm);
    opt_.step();
    ++iteration_;
    return total / static_cast<double>(idx.size());
  }

  std::vector<LossRecord> run(const std::vector<forecast::ClipTensors>& clips,
                              const std::function<void(const LossRecord&)>& on_step = {}) {
    std::vector<LossRecord> curve;
    while (iteration_ < cfg_.iterations) {
      const std::size_t it = iteration_;
      LossRecord rec{it, cfg_.stage, step(clips)};
      if (on_step) on_step(rec);
      curve.push_back(rec);
    }
    return curve;
  }

  double last_grad_norm() const { return last_grad_norm_; }

  void save(Checkpoint& ck) {
    model_.save(ck);
    ck.meta["train"] = to_json(cfg_);
    ck.meta["iteration"] = iteration_;
    ck.put_optimizer(opt_, "adam");
  }

  // Restore optimizer progress written by save() for the same stage.
  void resume(const Checkpoint& ck) {
    if (ck.meta.at("train").at("stage").get<int>() != cfg_.stage)
      throw TrainingError("resume checkpoint belongs to a different stage");
    iteration_ = ck.meta.at("iteration").get<std::size_t>();
    ck.load_optimizer(opt_, "adam");
  }

 private:
  forecast::Forecaster& model_;
  TrainConfig cfg_;
  nn::Adam opt_;
  std::size_t iteration_ = 0;
  double last_grad_norm_ = 0.0;
};

inline std::vector<forecast::ClipTensors> to_tensors(const std::vector<SceneClip>& clips) {
  std::vector<forecast::ClipTensors> out;
  out.reserve(clips.size());
  for (const auto& c : clips) out.push_back(forecast::clip_tensors(c));
  return out;
}

inline std::vector<LossRecord> train(forecast::Forecaster& model,
                                     const std::vector<SceneClip>& clips, const TrainConfig& cfg) {
  PoseTrainer trainer(model, cfg);
  return trainer.run(to_tensors(clips));
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& curve,
                           bool append = false) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (!append) out << "iteration,stage,loss\n";
  out << std::setprecision(17);
  for (const auto& r : curve) out << r.iteration << ',' << r.stage << ',' << r.loss << '\n';
}

}  // namespace vidcast::training
