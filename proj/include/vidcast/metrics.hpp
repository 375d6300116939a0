#pragma once

// Evaluation metrics: piecewise joint score, per-step pose MSE, image
// MSE/PSNR and classifier-based action accuracy.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "vidcast/image.hpp"
#include "vidcast/nn.hpp"
#include "vidcast/tensor.hpp"

namespace vidcast::metrics {

struct JointScoreParams {
  double mu = 5.0;       // pixels
  double sigma2 = 72.0;  // pixels^2
  double resolution = 256.0;
};

inline void validate(const JointScoreParams& p) {
  if (!(p.mu >= 0)) throw std::invalid_argument("joint score: mu must be >= 0");
  if (!(p.sigma2 > 0)) throw std::invalid_argument("joint score: sigma2 must be > 0");
  if (!(p.resolution > 0)) throw std::invalid_argument("joint score: resolution must be > 0");
}

// Score of an error of `dist` pixels: 1 inside mu, Gaussian falloff beyond.
inline double joint_score_px(double dist, const JointScoreParams& p = {}) {
  if (dist < p.mu) return 1.0;
  const double e = dist - p.mu;
  return std::exp(-e * e / (2.0 * p.sigma2));
}

// Normalized coordinates are scaled by the declared resolution.
inline double joint_score(double px, double py, double rx, double ry, const JointScoreParams& p = {}) {
  return joint_score_px(std::hypot((px - rx) * p.resolution, (py - ry) * p.resolution), p);
}

struct StepEval {
  std::size_t step;  // absolute frame index, T1+1 .. T1+T2
  double mse;        // mean squared joint error, pixels^2
  double score;      // mean joint score
};

// pred/ref: per future step an (N x 2J) tensor of normalized coordinates.
// Predictions are clamped to [0,1] before scoring.
inline std::vector<StepEval> sequence_pose_eval(const std::vector<Tensor>& pred,
                                                const std::vector<Tensor>& ref, std::size_t T1,
                                                const JointScoreParams& p = {}) {
  validate(p);
  if (pred.size() != ref.size()) throw ShapeError("sequence_pose_eval: step count mismatch");
  std::vector<StepEval> out;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    pred[t].require_same(ref[t], "sequence_pose_eval");
    if (pred[t].rank() != 2 || pred[t].dim(1) % 2 != 0)
      throw ShapeError("sequence_pose_eval: expected (N x 2J) poses");
    const std::size_t n = pred[t].dim(0), joints = pred[t].dim(1) / 2;
    double se = 0.0, score = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < joints; ++j) {
        const double px = std::clamp(pred[t].at(i, 2 * j), 0.0, 1.0);
        const double py = std::clamp(pred[t].at(i, 2 * j + 1), 0.0, 1.0);
        const double dx = (px - ref[t].at(i, 2 * j)) * p.resolution;
        const double dy = (py - ref[t].at(i, 2 * j + 1)) * p.resolution;
        se += dx * dx + dy * dy;
        score += joint_score_px(std::sqrt(dx * dx + dy * dy), p);
      }
    const double cnt = static_cast<double>(n * joints);
    out.push_back({T1 + 1 + t, se / cnt, score / cnt});
  }
  return out;
}

struct ImageEval {
  double mse = 0.0;
  double psnr = std::numeric_limits<double>::infinity();  // +inf when mse == 0
  bool psnr_infinite() const { return std::isinf(psnr); }
};

inline double psnr_from_mse(double mse) {
  if (mse <= 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

// Mean squared 8-bit pixel error over every frame, pixel and channel.
inline ImageEval image_mse_psnr(const std::vector<Image>& gen, const std::vector<Image>& goal) {
  if (gen.size() != goal.size() || gen.empty())
    throw std::invalid_argument("image_mse_psnr: frame count mismatch");
  double se = 0.0;
  std::size_t count = 0;
  for (std::size_t f = 0; f < gen.size(); ++f) {
    if (gen[f].width != goal[f].width || gen[f].height != goal[f].height ||
        gen[f].channels != goal[f].channels)
      throw std::invalid_argument("image_mse_psnr: frame " + std::to_string(f) + " size mismatch");
    for (std::size_t i = 0; i < gen[f].pixels.size(); ++i) {
      const double d = static_cast<double>(gen[f].pixels[i]) - static_cast<double>(goal[f].pixels[i]);
      se += d * d;
    }
    count += gen[f].pixels.size();
  }
  ImageEval r;
  r.mse = se / static_cast<double>(count);
  r.psnr = psnr_from_mse(r.mse);
  return r;
}

// ------------------------------------------------------------ action accuracy

// One labelled sequence: T x F features (for poses, F = 2J).
struct LabelledSequence {
  Tensor features;
  std::size_t label = 0;
};

struct ClassifierConfig {
  std::size_t hidden = 32;
  std::size_t iterations = 300;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

// Single-layer LSTM over the frames followed by a linear read-out of the
// last hidden state.
class SequenceClassifier {
 public:
  SequenceClassifier(std::size_t features, std::size_t classes, ClassifierConfig cfg)
      : classes_(classes), cfg_(cfg) {
    Rng rng(mix_seed(cfg_.seed, 0xAC7));
    cell_ = nn::LstmCell::create(params_, "cls.cell", features, cfg_.hidden, rng);
    out_w_ = params_.add("cls.out.w", nn::glorot({classes, cfg_.hidden}, cfg_.hidden, classes, rng));
    out_b_ = params_.add("cls.out.b", Tensor({classes}));
  }

  ad::Var logits(const std::vector<LabelledSequence>& data) const {
    const std::size_t n = data.size(), frames = data.front().features.dim(0),
                      f = data.front().features.dim(1);
    nn::LstmState s = cell_.zero_state(n);
    for (std::size_t t = 0; t < frames; ++t) {
      Tensor x({n, f});
      for (std::size_t i = 0; i < n; ++i) {
        if (data[i].features.dim(0) != frames || data[i].features.dim(1) != f)
          throw ShapeError("classifier: all sequences must share T x F");
        for (std::size_t k = 0; k < f; ++k) x.at(i, k) = data[i].features.at(t, k);
      }
      s = cell_.step(ad::Var::constant(std::move(x)), s);
    }
    return ad::linear(s.h, out_w_, out_b_);
  }

  void fit(const std::vector<LabelledSequence>& data) {
    if (data.empty()) throw std::invalid_argument("classifier: no training data");
    std::vector<std::size_t> labels;
    for (const auto& d : data) {
      if (d.label >= classes_) throw std::invalid_argument("classifier: label out of range");
      labels.push_back(d.label);
    }
    nn::Adam opt(params_.all(), {cfg_.lr});
    for (std::size_t it = 0; it < cfg_.iterations; ++it) {
      opt.zero_grad();
      ad::Var loss = ad::cross_entropy(logits(data), labels);
      ad::backward(loss);
      nn::clip_grad_norm(opt.params(), 5.0);
      opt.step();
    }
  }

  std::vector<std::size_t> predict(const std::vector<LabelledSequence>& data) const {
    if (data.empty()) return {};
    const Tensor z = logits(data).value();
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes_; ++c)
        if (z.at(i, c) > z.at(i, best)) best = c;
      out.push_back(best);
    }
    return out;
  }

 private:
  std::size_t classes_;
  ClassifierConfig cfg_;
  nn::ParameterSet params_;
  nn::LstmCell cell_;
  ad::Var out_w_, out_b_;
};

struct ActionEval {
  double accuracy = 0.0;
  double non_majority_accuracy = 0.0;  // NaN when every test label is the majority
  std::size_t majority_label = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

// Most frequent label; ties go to the smaller label.
inline std::size_t majority_label(const std::vector<LabelledSequence>& data) {
  std::map<std::size_t, std::size_t> counts;
  for (const auto& d : data) ++counts[d.label];
  std::size_t best = 0, best_n = 0;
  for (const auto& [label, n] : counts)
    if (n > best_n) {
      best = label;
      best_n = n;
    }
  return best;
}

inline ActionEval score_predictions(const std::vector<std::size_t>& truth,
                                    const std::vector<std::size_t>& pred, std::size_t classes,
                                    std::size_t majority) {
  if (truth.size() != pred.size()) throw std::invalid_argument("score_predictions: size mismatch");
  ActionEval r;
  r.majority_label = majority;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t ok = 0, nm = 0, nm_ok = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++r.confusion.at(truth[i]).at(pred[i]);
    ok += truth[i] == pred[i];
    if (truth[i] != majority) {
      ++nm;
      nm_ok += truth[i] == pred[i];
    }
  }
  r.accuracy = truth.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(truth.size());
  r.non_majority_accuracy =
      nm ? static_cast<double>(nm_ok) / static_cast<double>(nm) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

// Train on real sequences, test on generated ones. The majority label is
// taken from the training set.
inline ActionEval action_eval(const std::vector<LabelledSequence>& real_train,
                              const std::vector<LabelledSequence>& generated_test,
                              std::size_t classes, const ClassifierConfig& cfg = {}) {
  if (real_train.empty() || generated_test.empty())
    throw std::invalid_argument("action_eval: empty train or test set");
  SequenceClassifier clf(real_train.front().features.dim(1), classes, cfg);
  clf.fit(real_train);
  std::vector<std::size_t> truth;
  for (const auto& d : generated_test) truth.push_back(d.label);
  return score_predictions(truth, clf.predict(generated_test), classes, majority_label(real_train));
}

}  // namespace vidcast::metrics
