#include <gtest/gtest.h>

#include "test_support.hpp"
#include "vidcast/metrics.hpp"
#include "vidcast/pose_data.hpp"

using namespace vidcast;
using namespace vidcast::metrics;
using vidcast::testing::random_tensor;
using vidcast::testing::rel_error;

namespace {

// One sequence per person: T x 2J coordinates, labelled by the person's action.
std::vector<LabelledSequence> sequences(std::size_t clips, std::uint64_t seed) {
  std::vector<LabelledSequence> out;
  SynthConfig sc;
  sc.persons = 4;
  sc.groups = 2;
  sc.T1 = 5;
  sc.T2 = 3;
  for (std::size_t c = 0; c < clips; ++c) {
    const SceneClip clip = synth_scene(sc, mix_seed(seed, c));
    for (std::size_t i = 0; i < clip.persons(); ++i) {
      Tensor f({clip.frames(), 2 * clip.J});
      for (std::size_t t = 0; t < clip.frames(); ++t)
        for (std::size_t j = 0; j < clip.J; ++j) {
          f.at(t, 2 * j) = clip.tracks[i].poses[t].joints[j].x;
          f.at(t, 2 * j + 1) = clip.tracks[i].poses[t].joints[j].y;
        }
      out.push_back({f, static_cast<std::size_t>((*clip.labels)[i])});
    }
  }
  return out;
}

// Equal count per class so a constant predictor scores exactly 1/classes.
std::vector<LabelledSequence> balanced(const std::vector<LabelledSequence>& data, std::size_t per_class) {
  std::vector<LabelledSequence> out;
  std::vector<std::size_t> have(4, 0);
  for (const auto& d : data)
    if (have[d.label] < per_class) {
      ++have[d.label];
      out.push_back(d);
    }
  for (auto h : have) EXPECT_EQ(h, per_class);
  return out;
}

}  // namespace

TEST(JointScore, PaperThresholds) {
  EXPECT_EQ(joint_score_px(0), 1.0);
  EXPECT_EQ(joint_score_px(5), 1.0);
  EXPECT_NEAR(joint_score_px(17), std::exp(-1.0), 1e-9);
  EXPECT_NEAR(joint_score_px(17), 0.36788, 1e-5);
}

TEST(JointScore, ContinuousAndDecreasingBeyondMu) {
  EXPECT_NEAR(joint_score_px(5 + 1e-9), 1.0, 1e-12);
  for (double d = 5.0; d < 60.0; d += 0.5) EXPECT_LT(joint_score_px(d + 0.5), joint_score_px(d));
  for (double d = 0.0; d < 5.0; d += 0.25) EXPECT_EQ(joint_score_px(d), 1.0);
}

TEST(JointScore, RotationInvariantInNormalizedUnits) {
  const double r = 12.0 / 256.0;
  const double base = joint_score(0.5 + r, 0.5, 0.5, 0.5);
  for (double a = 0.0; a < 6.3; a += 0.3)
    EXPECT_NEAR(joint_score(0.5 + r * std::cos(a), 0.5 + r * std::sin(a), 0.5, 0.5), base, 1e-12);
  EXPECT_NEAR(base, std::exp(-49.0 / 144.0), 1e-12);
}

TEST(JointScore, InvalidParameters) {
  JointScoreParams p;
  p.sigma2 = 0;
  EXPECT_THROW(validate(p), std::invalid_argument);
  p = {};
  p.mu = -1;
  EXPECT_THROW(validate(p), std::invalid_argument);
}

TEST(SequencePoseEval, PerfectPrediction) {
  Rng rng(1);
  std::vector<Tensor> ref{random_tensor({3, 28}, rng, 0, 1), random_tensor({3, 28}, rng, 0, 1)};
  const auto ev = sequence_pose_eval(ref, ref, 10);
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_EQ(ev[0].step, 11u);
  EXPECT_EQ(ev[1].step, 12u);
  for (const auto& e : ev) {
    EXPECT_EQ(e.mse, 0.0);
    EXPECT_EQ(e.score, 1.0);
  }
}

TEST(SequencePoseEval, SingleJointHandComputation) {
  Tensor ref({1, 2}, std::vector<double>{0.5, 0.5});
  Tensor pred({1, 2}, std::vector<double>{0.5 + 3.0 / 256, 0.5 + 4.0 / 256});
  auto e = sequence_pose_eval({pred}, {ref}, 0)[0];
  EXPECT_NEAR(e.mse, 25.0, 1e-9);
  EXPECT_EQ(e.score, 1.0);
  Tensor far({1, 2}, std::vector<double>{0.5 + 17.0 / 256, 0.5});
  e = sequence_pose_eval({far}, {ref}, 0)[0];
  EXPECT_NEAR(e.mse, 289.0, 1e-9);
  EXPECT_NEAR(e.score, std::exp(-1.0), 1e-9);
}

TEST(SequencePoseEval, PredictionsClampedToCanvas) {
  Tensor ref({1, 2}, std::vector<double>{1.0, 0.0});
  Tensor pred({1, 2}, std::vector<double>{1.4, -0.3});
  const auto e = sequence_pose_eval({pred}, {ref}, 0)[0];
  EXPECT_EQ(e.mse, 0.0);
}

TEST(SequencePoseEval, MatchesLoopOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(4), w = 2 * (1 + rng.below(6));
    Tensor p = random_tensor({n, w}, rng, 0, 1), r = random_tensor({n, w}, rng, 0, 1);
    double se = 0.0, sc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w / 2; ++j) {
        const double dx = 256 * (p.at(i, 2 * j) - r.at(i, 2 * j)), dy = 256 * (p.at(i, 2 * j + 1) - r.at(i, 2 * j + 1));
        const double d = std::sqrt(dx * dx + dy * dy);
        se += dx * dx + dy * dy;
        sc += d < 5 ? 1.0 : std::exp(-(d - 5) * (d - 5) / 144.0);
      }
    const auto e = sequence_pose_eval({p}, {r}, 0)[0];
    const double cnt = static_cast<double>(n * w / 2);
    EXPECT_LT(rel_error(e.mse, se / cnt), 1e-12);
    EXPECT_LT(rel_error(e.score, sc / cnt), 1e-12);
  }
}

TEST(SequencePoseEval, ShapeErrors) {
  EXPECT_THROW(sequence_pose_eval({Tensor({1, 2})}, {}, 0), ShapeError);
  EXPECT_THROW(sequence_pose_eval({Tensor({1, 2})}, {Tensor({1, 4})}, 0), ShapeError);
  EXPECT_THROW(sequence_pose_eval({Tensor({1, 3})}, {Tensor({1, 3})}, 0), ShapeError);
}

TEST(ImageMsePsnr, IdenticalFramesGiveInfinity) {
  Image a(4, 3, 3, 17);
  const auto e = image_mse_psnr({a, a}, {a, a});
  EXPECT_EQ(e.mse, 0.0);
  EXPECT_TRUE(e.psnr_infinite());
}

TEST(ImageMsePsnr, UnitOffset) {
  Image a(5, 5, 3, 100), b(5, 5, 3, 101);
  const auto e = image_mse_psnr({a}, {b});
  EXPECT_EQ(e.mse, 1.0);
  EXPECT_NEAR(e.psnr, 10 * std::log10(65025.0), 1e-12);
  EXPECT_NEAR(e.psnr, 48.13, 5e-3);
}

TEST(ImageMsePsnr, MatchesPixelOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t frames = 1 + rng.below(3);
    std::vector<Image> g, r;
    double se = 0.0, cnt = 0.0;
    for (std::size_t f = 0; f < frames; ++f) {
      Image a(6, 4, 3), b(6, 4, 3);
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 6; ++x)
          for (int c = 0; c < 3; ++c) {
            a.at(x, y, c) = static_cast<std::uint8_t>(rng.below(256));
            b.at(x, y, c) = static_cast<std::uint8_t>(rng.below(256));
            const double d = static_cast<double>(a.at(x, y, c)) - b.at(x, y, c);
            se += d * d;
            cnt += 1;
          }
      g.push_back(a);
      r.push_back(b);
    }
    const auto e = image_mse_psnr(g, r);
    EXPECT_LT(rel_error(e.mse, se / cnt), 1e-12);
    EXPECT_LT(rel_error(e.psnr, 10 * std::log10(255.0 * 255.0 / (se / cnt))), 1e-12);
  }
}

TEST(ImageMsePsnr, PsnrStrictlyDecreasesWithMse) {
  double prev = psnr_from_mse(1e-6);
  for (double m = 1e-5; m < 1e5; m *= 3.7) {
    EXPECT_LT(psnr_from_mse(m), prev);
    prev = psnr_from_mse(m);
  }
}

TEST(ImageMsePsnr, MismatchedInputs) {
  EXPECT_THROW(image_mse_psnr({Image(2, 2, 3)}, {}), std::invalid_argument);
  EXPECT_THROW(image_mse_psnr({Image(2, 2, 3)}, {Image(3, 2, 3)}), std::invalid_argument);
}

TEST(ActionEval, NonMajorityAccuracyMatchesConfusionRecount) {
  Rng rng(4);
  std::vector<std::size_t> truth, pred;
  for (int k = 0; k < 200; ++k) {
    truth.push_back(rng.below(10) < 5 ? 0 : rng.below(4));
    pred.push_back(rng.below(3) == 0 ? truth.back() : rng.below(4));
  }
  const auto ev = score_predictions(truth, pred, 4, 0);
  double total = 0, diag = 0, nm_total = 0, nm_diag = 0;
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t p = 0; p < 4; ++p) {
      const double v = static_cast<double>(ev.confusion[t][p]);
      total += v;
      if (t == p) diag += v;
      if (t != 0) {
        nm_total += v;
        if (t == p) nm_diag += v;
      }
    }
  EXPECT_EQ(total, 200.0);
  EXPECT_DOUBLE_EQ(ev.accuracy, diag / total);
  EXPECT_DOUBLE_EQ(ev.non_majority_accuracy, nm_diag / nm_total);
}

TEST(ActionEval, AllMajorityLeavesNonMajorityUndefined) {
  const auto ev = score_predictions({2, 2, 2}, {2, 1, 2}, 3, 2);
  EXPECT_TRUE(std::isnan(ev.non_majority_accuracy));
  EXPECT_NEAR(ev.accuracy, 2.0 / 3.0, 1e-15);
}

TEST(ActionEval, MajorityLabelPrefersSmallerOnTies) {
  std::vector<LabelledSequence> d{{Tensor({1, 1}), 3}, {Tensor({1, 1}), 1}, {Tensor({1, 1}), 3}, {Tensor({1, 1}), 1}};
  EXPECT_EQ(majority_label(d), 1u);
}

TEST(ActionEval, TrainingSetAccuracyAboveChance) {
  const auto data = balanced(sequences(120, 5), 40);
  ClassifierConfig cfg;
  cfg.hidden = 16;
  cfg.iterations = 150;
  const auto ev = action_eval(data, data, 4, cfg);
  EXPECT_GT(ev.accuracy, 0.25);
}

TEST(ActionEval, ShuffledLabelsGiveChanceAccuracy) {
  auto train = sequences(60, 6);
  Rng rng(7);
  std::vector<std::size_t> labels;
  for (const auto& d : train) labels.push_back(d.label);
  rng.shuffle(labels);
  for (std::size_t i = 0; i < train.size(); ++i) train[i].label = labels[i];
  const auto test = balanced(sequences(200, 8), 50);
  ClassifierConfig cfg;
  cfg.hidden = 16;
  cfg.iterations = 150;
  const auto ev = action_eval(train, test, 4, cfg);
  EXPECT_NEAR(ev.accuracy, 0.25, 0.10);
}
