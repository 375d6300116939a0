// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,4,8] [--strict] [--cli path] [--workdir dir] [--report file]
//
// Exit status is 0 once every selected criterion has been evaluated; with
// --strict any FAIL makes it 1.

#include <CLI11.hpp>
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "test_support.hpp"
#include "vidcast/checkpoint.hpp"
#include "vidcast/metrics.hpp"
#include "vidcast/pose_training.hpp"
#include "vidcast/render_data.hpp"

namespace fs = std::filesystem;
using namespace vidcast;
using vidcast::ad::Var;
using vidcast::testing::grad_check;
using vidcast::testing::random_tensor;
using vidcast::testing::rel_error;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// Tracks the worst relative error over many comparisons.
struct Worst {
  double err = 0.0;
  std::size_t count = 0;
  void add(double got, double want) {
    err = std::max(err, rel_error(got, want));
    ++count;
  }
};

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// ------------------------------------------------------------- 1. oracles

double score_oracle(const Tensor& H, std::size_t i, std::size_t j, const group::InteractionParams& p) {
  const std::size_t n = H.dim(1);
  double z = p.b_hs.value()[0];
  for (std::size_t r = 0; r < n; ++r) {
    double u = p.b_hh.value()[r];
    for (std::size_t c = 0; c < n; ++c) u += p.w_hh.value().at(r, c) * (H.at(i, c) + H.at(j, c));
    z += p.w_hs.value()[r] * u;
  }
  return sig(z);
}

void lstm_oracle(const nn::LstmCell& cell, const std::vector<double>& x, const std::vector<double>& h,
                 const std::vector<double>& c, std::vector<double>& h_out, std::vector<double>& c_out) {
  const std::size_t H = cell.hidden;
  std::vector<double> z(4 * H);
  for (std::size_t r = 0; r < 4 * H; ++r) {
    z[r] = cell.bias.value()[r];
    for (std::size_t k = 0; k < x.size(); ++k) z[r] += cell.w_x.value().at(r, k) * x[k];
    for (std::size_t k = 0; k < H; ++k) z[r] += cell.w_h.value().at(r, k) * h[k];
  }
  h_out.assign(H, 0.0);
  c_out.assign(H, 0.0);
  for (std::size_t k = 0; k < H; ++k) {
    c_out[k] = sig(z[H + k]) * c[k] + sig(z[k]) * std::tanh(z[2 * H + k]);
    h_out[k] = sig(z[3 * H + k]) * std::tanh(c_out[k]);
  }
}

struct GroupFixture {
  nn::ParameterSet ps;
  group::InteractionParams inter;
  group::GroupParams gp;
  GroupFixture(std::size_t hp, std::size_t g, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    inter = group::InteractionParams::create(ps, "interaction", hp, rng);
    gp = group::GroupParams::create(ps, "group", hp, g, rng);
    for (auto& e : ps.entries()) {
      Tensor& v = e.var.mutable_value();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = scale * rng.uniform(-1, 1);
    }
  }
};

group::GroupAssignment random_assignment(std::size_t n, Rng& rng) {
  auto a = group::init_groups(n);
  for (auto& k : a.hard) k = rng.below(n - 1);
  a.soft = Var::constant(a.hard_one_hot());
  return a;
}

// Nested-loop stride-1 zero-padded convolution of a (C,H,W) image with
// weights (O,C,k,k) and optional bias.
std::vector<double> conv_oracle(const std::vector<double>& x, std::size_t C, std::size_t H, std::size_t W,
                                const Tensor& w, const Tensor* bias) {
  const std::size_t O = w.dim(0), k = w.dim(2);
  const long pad = static_cast<long>(k / 2);
  std::vector<double> out(O * H * W, 0.0);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        double s = bias ? (*bias)[o] : 0.0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < k; ++u)
            for (std::size_t v = 0; v < k; ++v) {
              const long yy = static_cast<long>(y + u) - pad, xv = static_cast<long>(xx + v) - pad;
              if (yy < 0 || xv < 0 || yy >= static_cast<long>(H) || xv >= static_cast<long>(W)) continue;
              s += w[((o * C + c) * k + u) * k + v] *
                   x[(c * H + static_cast<std::size_t>(yy)) * W + static_cast<std::size_t>(xv)];
            }
        out[(o * H + y) * W + xx] = s;
      }
  return out;
}

// Brute-force perceptual features of one (3,H,W) image, from the stored
// extractor weights: per block optional 2x2 mean pooling, then two 3x3
// conv+ReLU layers.
struct Features {
  std::map<std::string, std::vector<double>> act;
  std::map<std::string, std::array<std::size_t, 3>> shape;
};

Features features_oracle(const std::vector<double>& img, std::size_t H, std::size_t W, const Checkpoint& ex) {
  Features f;
  std::vector<double> x = img;
  std::size_t C = 3;
  for (std::size_t b = 1; b <= 5; ++b) {
    if (b > 1 && H >= 2 && W >= 2) {
      std::vector<double> p(C * (H / 2) * (W / 2));
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H / 2; ++y)
          for (std::size_t xx = 0; xx < W / 2; ++xx) {
            double s = 0.0;
            for (std::size_t u = 0; u < 2; ++u)
              for (std::size_t v = 0; v < 2; ++v) s += x[(c * H + 2 * y + u) * W + 2 * xx + v];
            p[(c * (H / 2) + y) * (W / 2) + xx] = s / 4.0;
          }
      x = std::move(p);
      H /= 2;
      W /= 2;
    }
    for (int k = 1; k <= 2; ++k) {
      const std::string n = "relu" + std::to_string(b) + "_" + std::to_string(k);
      const Tensor& w = ex.get("extractor." + n + ".w");
      const Tensor& bias = ex.get("extractor." + n + ".b");
      x = conv_oracle(x, C, H, W, w, &bias);
      for (auto& v : x) v = std::max(v, 0.0);
      C = w.dim(0);
      f.act[n] = x;
      f.shape[n] = {C, H, W};
    }
  }
  return f;
}

std::vector<double> gram_oracle(const std::vector<double>& a, const std::array<std::size_t, 3>& s) {
  const std::size_t C = s[0], HW = s[1] * s[2];
  std::vector<double> g(C * C, 0.0);
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      double sum = 0.0;
      for (std::size_t p = 0; p < HW; ++p) sum += a[i * HW + p] * a[j * HW + p];
      g[i * C + j] = sum / static_cast<double>(HW);
    }
  return g;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::vector<double> sample_vec(const Tensor& t, std::size_t b) {
  const std::size_t n = t.size() / t.dim(0);
  return {t.data() + b * n, t.data() + (b + 1) * n};
}

Outcome criterion_oracles() {
  const auto t0 = Clock::now();
  std::ostringstream detail;
  bool pass = true;
  auto report = [&](const char* name, const Worst& w) {
    const bool ok = w.count >= 100 && w.err < 1e-5;
    pass = pass && ok;
    detail << name << " " << fmt(w.err, 2) << " over " << w.count << "; ";
  };
  Rng rng(101);

  Worst score;
  int instances = 0;
  for (int trial = 0; trial < 100; ++trial, ++instances) {
    const std::size_t n = 2 + rng.below(5), hp = 1 + rng.below(6);
    GroupFixture f(hp, 2, 1000 + trial);
    Tensor H = random_tensor({n, hp}, rng);
    const Tensor m = group::interaction_matrix(Var::constant(H), f.inter).value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double want = score_oracle(H, i, j, f.inter);
        score.add(m.at(i, j), want);
        Tensor hi({hp}), hj({hp});
        for (std::size_t c = 0; c < hp; ++c) {
          hi[c] = H.at(i, c);
          hj[c] = H.at(j, c);
        }
        score.add(group::interaction_score(hi, hj, f.inter), want);
      }
  }
  score.count = static_cast<std::size_t>(instances);
  report("interaction_score", score);

  Worst assign;
  bool hard_ok = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(6), hp = 1 + rng.below(5);
    GroupFixture f(hp, 2, 2000 + trial);
    Tensor H = random_tensor({n, hp}, rng);
    const auto prev = random_assignment(n, rng);
    const double tau = rng.uniform(0.2, 2.0);
    const auto a = group::assign_groups(Var::constant(H), prev, f.inter, {tau});
    const std::size_t G = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> cand(G);
      for (std::size_t k = 0; k < G; ++k) {
        double s = 0.0;
        std::size_t cnt = 0;
        for (std::size_t j = 0; j < n; ++j)
          if (prev.hard[j] == k) {
            s += score_oracle(H, i, j, f.inter);
            ++cnt;
          }
        cand[k] = cnt ? s / static_cast<double>(cnt) : score_oracle(H, i, i, f.inter);
      }
      double z = 0.0, top = cand[0];
      for (double c : cand) {
        z += std::exp(c / tau);
        top = std::max(top, c);
      }
      for (std::size_t k = 0; k < G; ++k) {
        assign.add(a.scores.at(i, k), cand[k]);
        assign.add(a.soft.value().at(i, k), std::exp(cand[k] / tau) / z);
      }
      // ties keep the previous group, else go to the lowest index
      std::size_t want = G;
      if (cand[prev.hard[i]] >= top - 1e-12 * std::abs(top)) want = prev.hard[i];
      for (std::size_t k = 0; k < G && want == G; ++k)
        if (cand[k] >= top - 1e-12 * std::abs(top)) want = k;
      hard_ok = hard_ok && a.hard[i] == want;
    }
  }
  assign.count = 100;
  if (!hard_ok) assign.err = std::max(assign.err, 1.0);
  report("assign_groups", assign);

  Worst update;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(6), hp = 1 + rng.below(5), g = 1 + rng.below(4);
    GroupFixture f(hp, g, 3000 + trial);
    Tensor H = random_tensor({n, hp}, rng);
    const auto a = random_assignment(n, rng);
    auto prev = group::zero_group_states(n - 1, f.gp);
    prev.state.h = Var::constant(random_tensor({n - 1, g}, rng));
    prev.state.c = Var::constant(random_tensor({n - 1, g}, rng));
    const auto next = group::update_group_states(a, Var::constant(H), prev, f.gp);
    for (std::size_t k = 0; k < n - 1; ++k) {
      std::vector<double> x(g, 0.0), h0(g), c0(g), h, c;
      std::size_t cnt = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (a.hard[i] != k) continue;
        ++cnt;
        for (std::size_t r = 0; r < g; ++r)
          for (std::size_t q = 0; q < hp; ++q) x[r] += f.gp.w_hg.value().at(r, q) * H.at(i, q);
      }
      for (auto& v : x) v = cnt ? v / static_cast<double>(cnt) : 0.0;
      for (std::size_t r = 0; r < g; ++r) {
        h0[r] = prev.state.h.value().at(k, r);
        c0[r] = prev.state.c.value().at(k, r);
      }
      lstm_oracle(f.gp.cell, x, h0, c0, h, c);
      for (std::size_t r = 0; r < g; ++r) {
        update.add(next.state.h.value().at(k, r), h[r]);
        update.add(next.state.c.value().at(k, r), c[r]);
      }
    }
  }
  update.count = 100;
  report("update_group_states", update);

  Worst losses;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t steps = 1 + rng.below(5), n = 1 + rng.below(6), w = 2 * (1 + rng.below(6));
    std::vector<Tensor> refined, coarse, truth;
    for (std::size_t t = 0; t < steps; ++t) {
      refined.push_back(random_tensor({n, w}, rng, 0, 1));
      coarse.push_back(random_tensor({n, w}, rng, 0, 1));
      truth.push_back(random_tensor({n, w}, rng, 0, 1));
    }
    auto mse = [&](const std::vector<Tensor>& p) {
      double s = 0.0;
      for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < w; ++c) s += (p[t].at(i, c) - truth[t].at(i, c)) * (p[t].at(i, c) - truth[t].at(i, c));
      return s / static_cast<double>(n);
    };
    const double w1 = rng.uniform(0, 1);
    losses.add(training::loss_stage1(coarse, truth), mse(coarse));
    losses.add(training::loss_stage2(refined, coarse, truth, w1), mse(refined) + w1 * mse(coarse));
  }
  losses.count = 100;
  report("loss_stage1/2", losses);

  Worst inject;
  {
    render::RenderConfig cfg;
    cfg.arch = render::render_arch("5-5-10");
    cfg.resolution = 16;
    cfg.base_channels = 4;
    cfg.max_channels = 4;
    render::AdaRenderer gen(cfg);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t B = 1 + rng.below(2), H = 1 + rng.below(6), W = 1 + rng.below(6);
      Tensor f = random_tensor({B, 4, H, W}, rng);
      Tensor bank = random_tensor({B, 10, 4, 5, 5}, rng);
      const Tensor got = gen.inject(Var::constant(f), Var::constant(bank)).value();
      for (std::size_t b = 0; b < B; ++b) {
        Tensor wb({10, 4, 5, 5});
        std::copy_n(bank.data() + b * wb.size(), wb.size(), wb.data());
        const auto want = conv_oracle(sample_vec(f, b), 4, H, W, wb, nullptr);
        const auto mine = sample_vec(got, b);
        for (std::size_t i = 0; i < want.size(); ++i) inject.add(mine[i], want[i]);
      }
    }
    inject.count = 100;
  }
  report("filter injection", inject);

  Worst transfer;
  {
    render::PerceptualExtractor ex;
    Checkpoint exck;
    ex.save(exck);
    render::RenderLossWeights w;
    for (int trial = 0; trial < 100; ++trial) {
      w.gamma = rng.uniform(0.1, 5.0);
      const std::size_t B = 1 + rng.below(2), R = 4 * (1 + rng.below(2));
      Tensor gen = random_tensor({B, 3, R, R}, rng, 0, 1), goal = random_tensor({B, 3, R, R}, rng, 0, 1),
             ref = random_tensor({B, 3, R, R}, rng, 0, 1);
      const auto l = render::transfer_loss(Var::constant(gen), goal, ref, w, ex);
      double mse = 0.0, content = 0.0, style = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const auto g = sample_vec(gen, b), t = sample_vec(goal, b), r = sample_vec(ref, b);
        mse += sq_dist(g, t);
        const auto fg = features_oracle(g, R, R, exck), ft = features_oracle(t, R, R, exck),
                   fr = features_oracle(r, R, R, exck);
        for (const auto& name : w.content_layers) content += sq_dist(fg.act.at(name), ft.act.at(name));
        for (const auto& name : w.style_layers)
          style += sq_dist(gram_oracle(fg.act.at(name), fg.shape.at(name)),
                           gram_oracle(fr.act.at(name), fr.shape.at(name)));
      }
      const double nb = static_cast<double>(B);
      transfer.add(l.mse, mse / nb);
      transfer.add(l.content, content / nb);
      transfer.add(l.style, style / nb);
      transfer.add(l.total.item(), (w.alpha * mse + w.beta * content + w.gamma * style) / nb);
    }
    transfer.count = 100;
  }
  report("transfer_loss", transfer);

  const double secs = seconds_since(t0);
  pass = pass && secs < 60.0;
  detail << "runtime " << fmt(secs, 3) << " s";
  return {pass, detail.str()};
}

// ------------------------------------------------------- 2. gradient suite

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  std::ostringstream detail;
  Rng rng(202);

  double soft_err = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    GroupFixture f(5, 3, 4000 + trial);
    const std::size_t n = 3 + rng.below(4);
    Var H = Var::parameter(random_tensor({n, 5}, rng));
    const auto prev = random_assignment(n, rng);
    const Tensor probe = random_tensor({n, n - 1}, rng);
    const auto gc = grad_check({H}, [&] {
      const auto a = group::assign_groups(H, prev, f.inter, {0.7});
      return ad::sum(ad::mul(a.soft, Var::constant(probe)));
    });
    soft_err = std::max(soft_err, gc.error());
  }

  forecast::ForecasterConfig cfg;
  cfg.joints = 4;
  cfg.person_hidden = 8;
  cfg.group_hidden = 4;
  cfg.joint_hidden = 3;
  cfg.mode = group::AssignmentMode::Soft;
  cfg.init_seed = 5;
  forecast::Forecaster model(cfg);
  for (auto& e : model.parameters().entries()) {
    Tensor& v = e.var.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = rng.uniform(-0.4, 0.4);
  }
  SynthConfig sc;
  sc.persons = 3;
  sc.joints = 4;
  sc.T1 = 3;
  sc.T2 = 2;
  const auto ct = forecast::clip_tensors(synth_scene(sc, 21));
  training::TrainConfig tc;
  tc.stage = 2;
  const auto stage2 = grad_check(model.parameters().all(), [&] {
    return training::clip_loss(model, ct, 2, tc, forecast::RunOptions{0.5, nullptr, std::nullopt}).loss;
  });

  render::PerceptualExtractor ex;
  render::RenderLossWeights w;
  w.gamma = 2.0;
  Var gen = Var::parameter(random_tensor({1, 3, 8, 8}, rng, 0.1, 0.9));
  const Tensor goal = random_tensor({1, 3, 8, 8}, rng, 0, 1), ref = random_tensor({1, 3, 8, 8}, rng, 0, 1);
  const auto transfer = grad_check({gen}, [&] { return render::transfer_loss(gen, goal, ref, w, ex).total; });

  const double secs = seconds_since(t0);
  const bool pass = soft_err < 1e-3 && stage2.error() < 1e-3 && transfer.error() < 1e-3 && secs < 120.0;
  detail << "soft assignment " << fmt(soft_err, 2) << "; stage-2 loss (" << stage2.analytic.size()
         << " params) " << fmt(stage2.error(), 2) << "; transfer_loss " << fmt(transfer.error(), 2) << "; runtime "
         << fmt(secs, 3) << " s";
  return {pass, detail.str()};
}

// ---------------------------------------------------- 3. temperature limit

Outcome criterion_temperature() {
  Rng rng(303);
  int checked = 0, trials = 0;
  double worst = 0.0;
  for (; checked < 100 && trials < 50000; ++trials) {
    const std::size_t n = 3 + rng.below(5);
    GroupFixture f(4, 3, 5000 + static_cast<std::uint64_t>(trials), 2.0);
    Tensor H = random_tensor({n, 4}, rng, -2, 2);
    auto prev = group::init_groups(n);
    rng.shuffle(prev.hard);
    const auto probe = group::assign_groups(Var::constant(H), prev, f.inter, {1.0});
    bool distinct = true;
    for (std::size_t i = 0; i < n && distinct; ++i) {
      std::vector<double> r;
      for (std::size_t k = 0; k < n - 1; ++k) r.push_back(probe.scores.at(i, k));
      std::sort(r.rbegin(), r.rend());
      distinct = r[0] - r[1] > 0.1;
    }
    if (!distinct) continue;
    ++checked;
    const auto a = group::assign_groups(Var::constant(H), prev, f.inter, {1e-4});
    const Tensor hot = a.hard_one_hot();
    for (std::size_t i = 0; i < hot.size(); ++i) worst = std::max(worst, std::abs(a.soft.value()[i] - hot[i]));
  }
  return {checked == 100 && worst < 1e-3, "max |soft - one_hot| " + fmt(worst, 3) + " over " +
                                              std::to_string(checked) + " instances (top-two score gap > 0.1)"};
}

// ----------------------------------------------------- 4. joint score

Outcome criterion_joint_score() {
  metrics::JointScoreParams p;  // mu 5, sigma^2 72
  const double s0 = metrics::joint_score_px(0, p), s5 = metrics::joint_score_px(5, p),
               s17 = metrics::joint_score_px(17, p);
  const bool pass = std::abs(s0 - 1) <= 1e-9 && std::abs(s5 - 1) <= 1e-9 && std::abs(s17 - std::exp(-1.0)) <= 1e-9;
  return {pass, "score(0)=" + fmt(s0, 12) + " score(5)=" + fmt(s5, 12) + " score(17)=" + fmt(s17, 12)};
}

// ----------------------------------------------- 5/6. forecasting runs

struct PoseBudget {
  std::size_t train_clips = 200;
  std::size_t test_clips = 100;
  std::size_t hidden = 64;
  std::size_t stage1_iterations = 3000;
  std::size_t stage2_iterations = 1500;
  std::size_t batch_size = 4;
  double lr = 1e-3;
};

std::vector<SceneClip> synth_clips(std::size_t count, std::uint64_t seed, double noise) {
  SynthConfig sc;
  sc.persons = 6;
  sc.groups = 2;
  sc.noise = noise;
  std::vector<SceneClip> out;
  for (std::size_t k = 0; k < count; ++k) out.push_back(synth_scene(sc, mix_seed(seed, k)));
  return out;
}

struct TrainedModel {
  std::unique_ptr<forecast::Forecaster> model;
  double seconds = 0.0;
};

TrainedModel train_model(forecast::ModelKind kind, const std::vector<SceneClip>& clips, std::uint64_t seed,
                         const PoseBudget& b) {
  forecast::ForecasterConfig fc;
  fc.kind = kind;
  fc.person_hidden = b.hidden;
  fc.group_hidden = b.hidden;
  fc.joint_hidden = b.hidden / 2;
  fc.init_seed = seed;
  TrainedModel out{std::make_unique<forecast::Forecaster>(fc)};
  const auto t0 = Clock::now();
  const auto data = training::to_tensors(clips);
  training::TrainConfig tc;
  tc.lr = b.lr;
  tc.batch_size = b.batch_size;
  tc.seed = seed;
  tc.stage = 1;
  tc.iterations = b.stage1_iterations;
  training::PoseTrainer(*out.model, tc).run(data);
  tc.stage = 2;
  tc.iterations = b.stage2_iterations;
  training::PoseTrainer(*out.model, tc).run(data);
  out.seconds = seconds_since(t0);
  return out;
}

struct PoseEval {
  std::vector<double> refined_score, coarse_score;
  double refined_mse_first = 0.0, coarse_mse_first = 0.0;
};

PoseEval evaluate(const forecast::Forecaster& m, const std::vector<SceneClip>& clips) {
  PoseEval e;
  const std::size_t T2 = clips.front().T2;
  e.refined_score.assign(T2, 0.0);
  e.coarse_score.assign(T2, 0.0);
  const double n = static_cast<double>(clips.size());
  for (const auto& c : clips) {
    const auto r = m.forecast(c, c.T2);
    const auto truth = training::future_truth(forecast::clip_tensors(c));
    const auto ev = metrics::sequence_pose_eval(r.refined, truth, c.T1);
    const auto evc = metrics::sequence_pose_eval(r.coarse, truth, c.T1);
    for (std::size_t t = 0; t < T2; ++t) {
      e.refined_score[t] += ev[t].score / n;
      e.coarse_score[t] += evc[t].score / n;
    }
    e.refined_mse_first += ev[0].mse / n;
    e.coarse_mse_first += evc[0].mse / n;
  }
  return e;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i], 4);
  return s;
}

Outcome criterion_forecasting(const PoseBudget& b) {
  std::ostringstream detail;
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  int score_wins = 0, refiner_wins = 0;
  double worst_minutes = 0.0;
  for (auto seed : seeds) {
    const auto train = synth_clips(b.train_clips, mix_seed(seed, 11), 0.01);
    const auto test = synth_clips(b.test_clips, mix_seed(seed, 12), 0.01);
    const auto mg = train_model(forecast::ModelKind::MultiGranularity, train, seed, b);
    const auto vanilla = train_model(forecast::ModelKind::Vanilla, train, seed, b);
    worst_minutes = std::max({worst_minutes, mg.seconds / 60.0, vanilla.seconds / 60.0});
    const auto em = evaluate(*mg.model, test), ev = evaluate(*vanilla.model, test);
    bool every_step = true;
    for (std::size_t t = 0; t < em.refined_score.size(); ++t)
      every_step = every_step && em.refined_score[t] >= ev.refined_score[t];
    const bool refiner = em.refined_mse_first <= em.coarse_mse_first;
    score_wins += every_step;
    refiner_wins += refiner;
    detail << "seed " << seed << ": MG " << join(em.refined_score) << " vs vanilla " << join(ev.refined_score)
           << (every_step ? " (ok)" : " (no)") << ", MSE@T1+1 refined " << fmt(em.refined_mse_first) << " vs coarse "
           << fmt(em.coarse_mse_first) << (refiner ? " (ok)" : " (no)") << "; ";
  }
  const int majority = static_cast<int>(seeds.size()) / 2 + 1;
  const bool pass = score_wins >= majority && refiner_wins >= majority && worst_minutes <= 15.0;
  detail << "score wins " << score_wins << "/" << seeds.size() << ", refiner wins " << refiner_wins << "/"
         << seeds.size() << ", longest training " << fmt(worst_minutes, 3) << " min";
  return {pass, detail.str()};
}

double rand_index(const std::vector<std::size_t>& a, const std::vector<int>& truth) {
  std::size_t agree = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      ++total;
      agree += (a[i] == a[j]) == (truth[i] == truth[j]);
    }
  return static_cast<double>(agree) / static_cast<double>(total);
}

Outcome criterion_group_recovery(const PoseBudget& b) {
  const auto train = synth_clips(b.train_clips, 61, 0.0);
  const auto test = synth_clips(b.test_clips, 62, 0.0);
  const auto mg = train_model(forecast::ModelKind::MultiGranularity, train, 6, b);
  // Rand index of the assignment after the last observed frame, and over
  // every recorded step.
  double ri_last = 0.0, ri_all = 0.0;
  std::size_t steps = 0, one_group = 0;
  for (const auto& c : test) {
    const auto r = mg.model->forecast(c, c.T2);
    ri_last += rand_index(r.hard_history[c.T1 - 1], *c.true_groups);
    for (const auto& h : r.hard_history) {
      ri_all += rand_index(h, *c.true_groups);
      ++steps;
    }
    const auto& h = r.hard_history[c.T1 - 1];
    one_group += std::all_of(h.begin(), h.end(), [&](std::size_t k) { return k == h[0]; });
  }
  ri_last /= static_cast<double>(test.size());
  ri_all /= static_cast<double>(steps);
  return {ri_last >= 0.8, "Rand index at T1 " + fmt(ri_last) + " (all steps " + fmt(ri_all) + "); " +
                              std::to_string(one_group) + "/" + std::to_string(test.size()) +
                              " scenes put everyone in one group; training " + fmt(mg.seconds / 60.0, 3) + " min"};
}

// ------------------------------------------------------------ 7. renderer

struct RenderBudget {
  std::size_t train_persons = 300;
  std::size_t held_out_persons = 40;
  std::size_t minutes = 14;
  std::size_t max_iterations = 4000;
};

Outcome criterion_appearance(const RenderBudget& b) {
  std::ostringstream detail;
  render::RenderSetConfig train_cfg;
  train_cfg.persons = b.train_persons;
  train_cfg.triples_per_person = 1;
  const auto train = render::triples_of(render::synth_render_set(train_cfg, 71));
  render::RenderSetConfig held_cfg;
  held_cfg.persons = b.held_out_persons;
  held_cfg.triples_per_person = 1;
  const auto held = render::synth_render_set(held_cfg, 72);

  render::RenderConfig rc;
  rc.arch = render::render_arch("5-5-10");
  render::AdaRenderer gen(rc);
  render::PatchDiscriminator disc(rc);
  render::PerceptualExtractor ex;
  render::GanConfig gc;
  gc.iterations = b.max_iterations;
  render::GanTrainer trainer(gen, disc, ex, gc);
  const auto t0 = Clock::now();
  trainer.calibrate(train);
  while (trainer.iteration() < gc.iterations && seconds_since(t0) < 60.0 * static_cast<double>(b.minutes))
    trainer.step(train);
  const double minutes = seconds_since(t0) / 60.0;
  const auto app = render::appearance_test(gen, held, 9, 73);
  const bool app_ok = app.rate() >= 0.8 && minutes <= 15.0;
  detail << "held-out nearest-reference " << app.passed << "/" << app.total << " (" << fmt(100 * app.rate(), 3)
         << "%) after " << trainer.iteration() << " GAN iterations in " << fmt(minutes, 3) << " min; ";

  // Supervised-only run: adversarial weight 0, 200 iterations.
  render::AdaRenderer gen2(rc);
  render::PatchDiscriminator disc2(rc);
  render::GanConfig sup;
  sup.iterations = 200;
  sup.adv_weight = 0.0;
  render::GanTrainer t2(gen2, disc2, ex, sup);
  t2.calibrate(train);
  std::vector<std::size_t> probe(32);
  std::iota(probe.begin(), probe.end(), 0);
  const double before = t2.eval_transfer(train, probe);
  t2.run(train);
  const double after = t2.eval_transfer(train, probe);
  const bool drop_ok = after <= 0.5 * before;
  detail << "supervised-only transfer_loss " << fmt(before) << " -> " << fmt(after) << " ("
         << fmt(100 * (1 - after / before), 3) << "% drop)";
  return {app_ok && drop_ok, detail.str()};
}

// ---------------------------------------------------------- 8. schedule

Outcome criterion_schedule() {
  render::RenderConfig rc;
  rc.arch = render::render_arch("5-5-10");
  rc.resolution = 16;
  rc.base_channels = 4;
  rc.max_channels = 8;
  rc.fcn_channels = 4;
  rc.disc_channels = 4;
  render::AdaRenderer gen(rc);
  render::PatchDiscriminator disc(rc);
  render::PerceptualExtractor ex;
  render::RenderSetConfig sc;
  sc.resolution = 16;
  sc.persons = 4;
  sc.triples_per_person = 1;
  const auto data = render::triples_of(render::synth_render_set(sc, 81));
  render::GanConfig gc;
  gc.iterations = 5;
  gc.batch_size = 2;
  render::GanTrainer tr(gen, disc, ex, gc);
  tr.run(data);
  const std::string got(tr.schedule().begin(), tr.schedule().end());
  std::string want;
  for (int i = 0; i < 5; ++i) want += "GGD";
  return {got == want, "recorded " + got + " over 5 iterations"};
}

// -------------------------------------------------------- 9. determinism

int run_cli(const std::string& cli, const fs::path& dir, const std::string& args) {
  const std::string cmd = "'" + cli + "' --workdir '" + dir.string() + "' " + args + " > '" +
                          (dir / "stdout.log").string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == "stdout.log") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), root).string()] = ss.str();
  }
  return out;
}

Outcome criterion_determinism(const std::string& cli, const fs::path& work) {
  const std::vector<std::pair<std::string, std::string>> commands{
      {"synth", "--seed 9 synth --out clips.jsonl --count 3"},
      {"synth-render",
       "--seed 9 --set figures.persons=4 --set figures.triples_per_person=1 --set figures.resolution=16 "
       "synth-render --out figs"},
      {"train-pose (stage 1)",
       "--seed 9 --set train.iterations=3 --set model.person_hidden=8 --set model.group_hidden=8 "
       "--set model.joint_hidden=4 train-pose --clips clips.jsonl --out s1.ckpt"},
      {"train-pose (stage 2)",
       "--seed 9 --set train.iterations=2 train-pose --stage 2 --clips clips.jsonl --init-from s1.ckpt --out s2.ckpt"},
      {"train-render",
       "--seed 9 --set gan.iterations=2 --set gan.batch_size=2 --set gan.calibration_triples=2 "
       "--set render.resolution=16 --set render.arch='\"5-5-10\"' train-render --triples figs/triples.jsonl "
       "--out r.ckpt"},
      {"forecast", "--seed 9 --workers 2 forecast --clips clips.jsonl --checkpoint s2.ckpt --out f.json "
                   "--posemaps posemaps --posemap-resolution 16"},
      {"render", "render --forecast f.json --checkpoint r.ckpt --reference figs/00000_reference.png --out frames"},
      {"eval (pose)", "eval --pred f.json --ref clips.jsonl --out pose.json --csv pose.csv"},
      {"eval (image)", "eval --mode image --pred frames --ref frames --out image.json"},
      {"eval (action)", "--seed 9 --set classifier.iterations=20 eval --mode action --pred f.json --ref clips.jsonl "
                        "--out action.json"},
  };
  const fs::path a = work / "run_a", b = work / "run_b";
  fs::remove_all(a);
  fs::remove_all(b);
  fs::create_directories(a);
  fs::create_directories(b);
  std::ostringstream detail;
  bool pass = true;
  for (const auto& [name, args] : commands) {
    const int ra = run_cli(cli, a, args), rb = run_cli(cli, b, args);
    if (ra != 0 || rb != 0) {
      pass = false;
      detail << name << " exited " << ra << "/" << rb << "; ";
    }
  }
  const auto ta = tree_bytes(a), tb = tree_bytes(b);
  std::size_t differing = 0;
  for (const auto& [path, bytes] : ta) {
    auto it = tb.find(path);
    if (it == tb.end() || it->second != bytes) {
      ++differing;
      if (differing <= 3) detail << "differs: " << path << "; ";
    }
  }
  pass = pass && differing == 0 && ta.size() == tb.size() && !ta.empty();
  detail << commands.size() << " commands, " << ta.size() << " output files compared byte for byte, " << differing
         << " differ";
  return {pass, detail.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vidcast acceptance run"};
  std::string only;
  bool strict = false;
  std::string cli = VIDCAST_CLI;
  std::string workdir = (fs::temp_directory_path() / "vidcast_acceptance").string();
  app.add_option("--only", only, "Comma-separated criterion numbers");
  app.add_flag("--strict", strict, "Exit 1 if any criterion fails");
  app.add_option("--cli", cli, "vidcast executable");
  app.add_option("--workdir", workdir, "Scratch directory");
  std::string report_path;
  app.add_option("--report", report_path, "Also write the result lines to this file");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  if (!only.empty()) {
    std::stringstream ss(only);
    for (std::string tok; std::getline(ss, tok, ',');) selected.insert(std::stoi(tok));
  }
  const PoseBudget pose_budget;
  const RenderBudget render_budget;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"equation oracles", criterion_oracles},
      {"gradient suite", criterion_gradients},
      {"temperature limit", criterion_temperature},
      {"joint score", criterion_joint_score},
      {"MG beats vanilla, refiner helps", [&] { return criterion_forecasting(pose_budget); }},
      {"group recovery", [&] { return criterion_group_recovery(pose_budget); }},
      {"appearance transfer", [&] { return criterion_appearance(render_budget); }},
      {"GAN schedule", criterion_schedule},
      {"CLI determinism", [&] { return criterion_determinism(cli, workdir); }},
  };
  std::ofstream report_file;
  if (!report_path.empty()) report_file.open(report_path);
  auto emit = [&](const std::string& line) {
    std::cout << line << std::endl;
    if (report_file) report_file << line << std::endl;
  };
  int failures = 0, run = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    ++run;
    failures += !o.pass;
    emit("CRITERION " + std::to_string(id) + " " + (o.pass ? "PASS" : "FAIL") + " [" + criteria[k].first + "] " +
         o.detail + " (" + fmt(seconds_since(t0), 3) + " s)");
  }
  emit("SUMMARY " + std::to_string(run - failures) + "/" + std::to_string(run) + " criteria passed");
  return strict && failures ? 1 : 0;
}
