// vidcast command-line driver: synthetic data, training, forecasting,
// rendering and evaluation. Every command writes a manifest beside its
// output. Exit codes: 0 success, 2 validation error, 3 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "vidcast/checkpoint.hpp"
#include "vidcast/metrics.hpp"
#include "vidcast/pose_training.hpp"
#include "vidcast/render_data.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vidcast;

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Globals {
  std::string workdir = ".";
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string config_path;
  std::vector<std::string> sets;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : fs::path(workdir) / path;
  }
};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

void assign_dotted(json& cfg, const std::string& entry, const std::string& origin) {
  const auto eq = entry.find('=');
  const auto dot = entry.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw UsageError(origin + ": expected section.key=value, got '" + entry + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  const std::string section = trim(entry.substr(0, dot));
  const std::string key = trim(entry.substr(dot + 1, eq - dot - 1));
  cfg[section][key] = parse_value(trim(entry.substr(eq + 1)));
}

// JSON object, or key=value lines of the form section.key=value.
json load_config(const Globals& g) {
  json cfg = json::object();
  if (!g.config_path.empty()) {
    const fs::path p = g.resolve(g.config_path);
    std::ifstream in(p);
    if (!in) throw UsageError("cannot open config " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    try {
      cfg = json::parse(text);
      if (!cfg.is_object()) throw UsageError("config " + p.string() + " must be a JSON object");
    } catch (const json::parse_error&) {
      std::istringstream lines(text);
      std::string line;
      while (std::getline(lines, line)) {
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos || line[b] == '#') continue;
        assign_dotted(cfg, line, p.string());
      }
    }
  }
  for (const auto& s : g.sets) assign_dotted(cfg, s, "--set");
  return cfg;
}

// Rejects keys that the section's defaults do not know about.
json section(const json& cfg, const std::string& name, const json& defaults) {
  if (!cfg.contains(name)) return json::object();
  const json& s = cfg.at(name);
  if (!s.is_object()) throw UsageError("config section '" + name + "' must be an object");
  for (const auto& [k, v] : s.items())
    if (!defaults.contains(k)) throw UsageError("unknown config key '" + name + "." + k + "'");
  return s;
}

void check_sections(const json& cfg, const std::set<std::string>& allowed) {
  for (const auto& [k, v] : cfg.items())
    if (!allowed.count(k)) throw UsageError("config section '" + k + "' is not used by this command");
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_text(const fs::path& p, const std::string& text) {
  ensure_parent(p);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("short write on " + p.string());
}

// Manifest beside a file output (<file>.manifest.json) or inside a
// directory output (manifest.json).
void write_manifest(const fs::path& output, bool is_dir, const std::string& command, const json& config,
                    const json& seeds, const json& inputs) {
  json m;
  m["command"] = command;
  m["version"] = VIDCAST_VERSION;
  m["config"] = config;
  m["config_hash"] = hex64(fnv1a(config.dump()));
  m["seeds"] = seeds;
  m["inputs"] = inputs;
  m["output"] = output.filename().string();
  const fs::path where = is_dir ? output / "manifest.json" : fs::path(output.string() + ".manifest.json");
  write_text(where, m.dump(2) + "\n");
}

std::vector<SceneClip> read_clips(const fs::path& p) {
  require_file(p, "clip file");
  auto res = load_clips(p);
  for (const auto& w : res.warnings) std::cerr << "warning: skipped clip at " << w << "\n";
  return std::move(res.clips);
}

Checkpoint read_checkpoint(const fs::path& p) {
  require_file(p, "checkpoint");
  return load_checkpoint(p);
}

// Runs f(i) for i in [0, n) on up to `workers` threads; results are written
// by index so the output order never depends on scheduling.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F f) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Pose pose_from_row(const Tensor& m, std::size_t i) {
  Pose p;
  for (std::size_t j = 0; j < m.dim(1) / 2; ++j)
    p.joints.push_back({std::clamp(m.at(i, 2 * j), 0.0, 1.0), std::clamp(m.at(i, 2 * j + 1), 0.0, 1.0), true});
  return p;
}

json matrix_json(const Tensor& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    json r = json::array();
    for (std::size_t c = 0; c < m.dim(1); ++c) r.push_back(m.at(i, c));
    rows.push_back(std::move(r));
  }
  return rows;
}

Tensor matrix_from_json(const json& rows) {
  const std::size_t n = rows.size(), w = n ? rows[0].size() : 0;
  Tensor m({n, w});
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].size() != w) throw UsageError("ragged pose matrix in forecast file");
    for (std::size_t c = 0; c < w; ++c) m.at(i, c) = rows[i][c].get<double>();
  }
  return m;
}

std::string frame_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%03zu.png", k);
  return buf;
}

std::string person_dir(std::size_t i) { return "person_" + std::to_string(i); }

// ------------------------------------------------------------------ commands

struct SynthArgs {
  std::string out;
  std::size_t count = 10;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  const json cfg = load_config(g);
  check_sections(cfg, {"synth"});
  SynthConfig defaults;
  defaults.persons = 12;
  defaults.groups = 3;
  const SynthConfig sc = synth_config_from_json(section(cfg, "synth", to_json(defaults)), defaults);
  validate(sc);
  std::vector<SceneClip> clips;
  for (std::size_t k = 0; k < a.count; ++k) clips.push_back(synth_scene(sc, mix_seed(g.seed, k)));
  const fs::path out = g.resolve(a.out);
  ensure_parent(out);
  write_clips(clips, out);
  write_manifest(out, false, "synth", {{"synth", to_json(sc)}, {"count", a.count}}, {{"seed", g.seed}},
                 json::array());
  std::cout << "wrote " << clips.size() << " clips to " << out.string() << "\n";
  return 0;
}

struct SynthRenderArgs {
  std::string out;
};

int cmd_synth_render(const Globals& g, const SynthRenderArgs& a) {
  const json cfg = load_config(g);
  check_sections(cfg, {"figures"});
  const json defaults{{"resolution", 64}, {"persons", 16}, {"triples_per_person", 4}};
  const json s = section(cfg, "figures", defaults);
  render::RenderSetConfig rc;
  rc.resolution = s.value("resolution", 64);
  rc.persons = s.value("persons", std::size_t{16});
  rc.triples_per_person = s.value("triples_per_person", std::size_t{4});
  if (rc.resolution < 16) throw UsageError("figures.resolution must be >= 16");
  const auto set = render::synth_render_set(rc, g.seed);
  const fs::path out = g.resolve(a.out);
  render::write_render_set(out, render::triples_of(set));
  write_manifest(out, true, "synth-render",
                 {{"figures", {{"resolution", rc.resolution}, {"persons", rc.persons},
                               {"triples_per_person", rc.triples_per_person}}}},
                 {{"seed", g.seed}}, json::array());
  std::cout << "wrote " << set.size() << " triples to " << (out / "triples.jsonl").string() << "\n";
  return 0;
}

struct TrainPoseArgs {
  std::string clips, out, init_from, resume, loss_csv;
  int stage = 1;
};

int cmd_train_pose(const Globals& g, const TrainPoseArgs& a) {
  const json cfg = load_config(g);
  check_sections(cfg, {"model", "train"});
  training::TrainConfig tdef;
  tdef.seed = g.seed;
  tdef.stage = a.stage;
  json tkeys = training::to_json(tdef);
  tkeys["teacher_forcing"] = nullptr;
  training::TrainConfig tc = training::train_config_from_json(section(cfg, "train", tkeys), tdef);
  if (cfg.contains("train") && cfg["train"].contains("stage") && tc.stage != a.stage)
    throw UsageError("train.stage disagrees with --stage");
  tc.stage = a.stage;
  training::validate(tc);
  if (tc.stage == 2 && a.init_from.empty() && a.resume.empty())
    throw UsageError("stage 2 requires --init-from <stage-1 checkpoint>");

  const auto clips = read_clips(g.resolve(a.clips));
  if (clips.empty()) throw UsageError("no usable clips in " + a.clips);

  std::unique_ptr<forecast::Forecaster> model;
  json inputs = json::array({a.clips});
  std::optional<Checkpoint> resume_ck;
  if (!a.resume.empty()) {
    resume_ck = read_checkpoint(g.resolve(a.resume));
    model = forecast::Forecaster::load(*resume_ck);
    inputs.push_back(a.resume);
  } else if (!a.init_from.empty()) {
    model = forecast::Forecaster::load(read_checkpoint(g.resolve(a.init_from)));
    inputs.push_back(a.init_from);
  } else {
    forecast::ForecasterConfig mdef;
    mdef.joints = clips.front().J;
    mdef.init_seed = g.seed;
    model = std::make_unique<forecast::Forecaster>(
        forecast::forecaster_config_from_json(section(cfg, "model", forecast::to_json(mdef)), mdef));
  }
  if (cfg.contains("model") && (resume_ck || !a.init_from.empty()))
    throw UsageError("model settings come from the checkpoint; drop the model section");
  for (const auto& c : clips)
    if (c.J != model->config().joints)
      throw UsageError("clip " + c.clip_id + " has " + std::to_string(c.J) + " joints, model expects " +
                       std::to_string(model->config().joints));

  training::PoseTrainer trainer(*model, tc);
  if (resume_ck) trainer.resume(*resume_ck);
  const auto data = training::to_tensors(clips);
  const auto curve = trainer.run(data);

  Checkpoint ck;
  trainer.save(ck);
  const fs::path out = g.resolve(a.out);
  ensure_parent(out);
  save_checkpoint(out, ck);
  const fs::path csv = a.loss_csv.empty() ? fs::path(out.string() + ".loss.csv") : g.resolve(a.loss_csv);
  ensure_parent(csv);
  training::write_loss_csv(csv, curve, resume_ck.has_value() && fs::exists(csv));
  write_manifest(out, false, "train-pose",
                 {{"model", forecast::to_json(model->config())}, {"train", training::to_json(tc)}},
                 {{"seed", g.seed}, {"train_seed", tc.seed}, {"init_seed", model->config().init_seed}},
                 inputs);
  std::cout << "stage " << tc.stage << ": " << curve.size() << " iterations";
  if (!curve.empty()) std::cout << ", final loss " << curve.back().loss;
  std::cout << "\n";
  return 0;
}

struct TrainRenderArgs {
  std::string triples, out, loss_csv;
};

int cmd_train_render(const Globals& g, const TrainRenderArgs& a) {
  const json cfg = load_config(g);
  check_sections(cfg, {"render", "gan"});
  render::RenderConfig rdef;
  rdef.init_seed = g.seed;
  const auto rc = render::render_config_from_json(section(cfg, "render", render::to_json(rdef)), rdef);
  render::validate(rc);
  render::GanConfig gdef;
  gdef.seed = g.seed;
  auto gc = render::gan_config_from_json(section(cfg, "gan", render::to_json(gdef)), gdef);
  const fs::path index = g.resolve(a.triples);
  require_file(index, "triples index");
  const auto data = render::load_render_set(index);
  if (data.empty()) throw UsageError("no triples in " + a.triples);
  for (const auto& t : data)
    if (t.posemap.dim(1) != rc.resolution || t.posemap.dim(2) != rc.resolution)
      throw UsageError("triple resolution differs from render.resolution=" + std::to_string(rc.resolution));

  render::AdaRenderer gen(rc);
  render::PatchDiscriminator disc(rc);
  render::PerceptualExtractor ex;
  render::GanTrainer trainer(gen, disc, ex, gc);
  trainer.calibrate(data);
  const auto logs = trainer.run(data);
  for (const auto& w : trainer.warnings()) std::cerr << "warning: " << w << "\n";

  Checkpoint ck;
  trainer.save(ck);
  ex.save(ck);
  const fs::path out = g.resolve(a.out);
  ensure_parent(out);
  save_checkpoint(out, ck);
  const fs::path csv = a.loss_csv.empty() ? fs::path(out.string() + ".loss.csv") : g.resolve(a.loss_csv);
  std::ostringstream os;
  os << "iteration,g_loss,transfer,d_loss\n" << std::setprecision(17);
  for (const auto& l : logs) os << l.iteration << ',' << l.g_loss << ',' << l.transfer << ',' << l.d_loss << '\n';
  write_text(csv, os.str());
  json gan = render::to_json(gc);
  gan["gamma"] = trainer.weights().gamma;
  write_manifest(out, false, "train-render", {{"render", render::to_json(rc)}, {"gan", gan}},
                 {{"seed", g.seed}, {"gan_seed", gc.seed}, {"init_seed", rc.init_seed}}, json::array({a.triples}));
  std::cout << "trained " << logs.size() << " iterations on " << data.size() << " triples\n";
  return 0;
}

struct ForecastArgs {
  std::string clips, checkpoint, out, model = "mg", posemaps;
  std::size_t posemap_resolution = 64;
};

int cmd_forecast(const Globals& g, const ForecastArgs& a) {
  const json cfg = load_config(g);
  check_sections(cfg, {});
  const auto kind = forecast::model_kind_from_string(a.model);
  const auto clips = read_clips(g.resolve(a.clips));
  const auto model = forecast::Forecaster::load(read_checkpoint(g.resolve(a.checkpoint)));
  for (const auto& c : clips)
    if (c.J != model->config().joints) throw UsageError("clip " + c.clip_id + " joint count differs from model");
  if (kind == forecast::ModelKind::MultiGranularity && model->config().kind != kind)
    throw UsageError("checkpoint was trained as '" + forecast::to_string(model->config().kind) +
                     "', cannot run it as mg");

  std::vector<forecast::ForecastResult> results(clips.size());
  parallel_for(clips.size(), g.workers, [&](std::size_t i) {
    Rng gumbel(mix_seed(g.seed, i));
    forecast::RunOptions opt{0.1, &gumbel, kind};
    results[i] = model->forecast(clips[i], clips[i].T2, opt);
  });

  json doc;
  doc["model"] = a.model;
  doc["clips"] = json::array();
  for (std::size_t c = 0; c < clips.size(); ++c) {
    const auto& r = results[c];
    json jc{{"clip_id", clips[c].clip_id}, {"T1", clips[c].T1}, {"T2", clips[c].T2}, {"J", clips[c].J},
            {"persons", clips[c].persons()}};
    jc["coarse"] = json::array();
    jc["refined"] = json::array();
    for (std::size_t t = 0; t < r.coarse.size(); ++t) {
      jc["coarse"].push_back(matrix_json(r.coarse[t]));
      jc["refined"].push_back(matrix_json(r.refined[t]));
    }
    jc["assignments"] = {{"hard", r.hard_history}, {"soft", json::array()}};
    for (const auto& s : r.soft_history) jc["assignments"]["soft"].push_back(matrix_json(s));
    doc["clips"].push_back(std::move(jc));
  }
  const fs::path out = g.resolve(a.out);
  write_text(out, doc.dump() + "\n");

  if (!a.posemaps.empty()) {
    const fs::path dir = g.resolve(a.posemaps);
    const int res = static_cast<int>(a.posemap_resolution);
    for (std::size_t c = 0; c < clips.size(); ++c)
      for (std::size_t i = 0; i < clips[c].persons(); ++i)
        for (std::size_t t = 0; t < results[c].refined.size(); ++t) {
          const fs::path p = dir / clips[c].clip_id / person_dir(i) / frame_name(t);
          fs::create_directories(p.parent_path());
          write_png(p, rasterize_posemap(pose_from_row(results[c].refined[t], i), res, res,
                                         default_posemap_radius(res)));
        }
  }
  write_manifest(out, false, "forecast",
                 {{"model", a.model}, {"posemaps", !a.posemaps.empty()}, {"posemap_resolution", a.posemap_resolution},
                  {"temperature", 0.1}},
                 {{"seed", g.seed}}, json::array({a.clips, a.checkpoint}));
  std::cout << "forecast " << clips.size() << " clips to " << out.string() << "\n";
  return 0;
}

json read_json_file(const fs::path& p, const std::string& what) {
  require_file(p, what);
  std::ifstream in(p);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(what + " " + p.string() + " is not valid JSON: " + e.what());
  }
}

struct RenderArgs {
  std::string forecast, checkpoint, out, reference, reference_dir;
};

int cmd_render(const Globals& g, const RenderArgs& a) {
  const json cfg = load_config(g);
  check_sections(cfg, {});
  if (a.reference.empty() == a.reference_dir.empty())
    throw UsageError("give exactly one of --reference or --reference-dir");
  const json doc = read_json_file(g.resolve(a.forecast), "forecast file");
  const Checkpoint ck = read_checkpoint(g.resolve(a.checkpoint));
  render::AdaRenderer gen(render::render_config_from_json(ck.meta.at("render")));
  gen.load_state(ck);
  const std::size_t res = gen.config().resolution;

  auto reference_for = [&](const std::string& clip_id, std::size_t person) {
    fs::path p = g.resolve(a.reference);
    if (!a.reference_dir.empty()) {
      const fs::path dir = g.resolve(a.reference_dir);
      p = dir / clip_id / (person_dir(person) + ".png");
      if (!fs::exists(p)) p = dir / (person_dir(person) + ".png");
    }
    require_file(p, "reference image");
    Image img = read_png(p, 3);
    if (static_cast<std::size_t>(img.width) != res || static_cast<std::size_t>(img.height) != res)
      throw UsageError("reference " + p.string() + " is not " + std::to_string(res) + "x" + std::to_string(res));
    return image_to_tensor(img);
  };

  const fs::path out = g.resolve(a.out);
  std::size_t frames = 0;
  for (const auto& jc : doc.at("clips")) {
    const std::string id = jc.at("clip_id").get<std::string>();
    std::vector<Tensor> steps;
    for (const auto& m : jc.at("refined")) steps.push_back(matrix_from_json(m));
    if (steps.empty()) continue;
    for (std::size_t i = 0; i < steps[0].dim(0); ++i) {
      std::vector<Tensor> posemaps;
      for (const auto& s : steps)
        posemaps.push_back(image_to_tensor(rasterize_posemap(pose_from_row(s, i), static_cast<int>(res),
                                                             static_cast<int>(res),
                                                             default_posemap_radius(static_cast<int>(res)))));
      const auto rendered = gen.render_sequence(posemaps, reference_for(id, i));
      const fs::path dir = out / id / person_dir(i);
      fs::create_directories(dir);
      for (std::size_t t = 0; t < rendered.size(); ++t) write_png(dir / frame_name(t), tensor_to_image(rendered[t]));
      frames += rendered.size();
    }
  }
  write_manifest(out, true, "render", {{"resolution", res}}, {{"seed", g.seed}},
                 json::array({a.forecast, a.checkpoint, a.reference.empty() ? a.reference_dir : a.reference}));
  std::cout << "rendered " << frames << " frames into " << out.string() << "\n";
  return 0;
}

// Per clip, predicted future poses: either a forecast file or a clip file
// (its own future frames, which gives a perfect self-evaluation).
std::map<std::string, std::vector<Tensor>> load_predictions(const fs::path& p) {
  std::map<std::string, std::vector<Tensor>> out;
  require_file(p, "prediction file");
  std::ifstream in(p);
  std::string first;
  std::getline(in, first);
  bool forecast_doc = false;
  try {
    const json j = json::parse(first);
    forecast_doc = j.is_object() && j.contains("clips") && j.contains("model");
  } catch (const json::exception&) {
  }
  if (forecast_doc) {
    const json doc = read_json_file(p, "forecast file");
    for (const auto& jc : doc.at("clips")) {
      std::vector<Tensor> steps;
      for (const auto& m : jc.at("refined")) steps.push_back(matrix_from_json(m));
      out[jc.at("clip_id").get<std::string>()] = std::move(steps);
    }
    return out;
  }
  for (const auto& c : read_clips(p)) {
    const auto ct = forecast::clip_tensors(c);
    out[c.clip_id] = training::future_truth(ct);
  }
  return out;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

struct EvalArgs {
  std::string pred, ref, mode = "pose", out, csv;
};

json eval_pose(const Globals&, const json& cfg, const EvalArgs&, const std::vector<SceneClip>& refs,
               const std::map<std::string, std::vector<Tensor>>& preds, std::ostringstream& csv) {
  const json s = section(cfg, "metrics", {{"mu", 5.0}, {"sigma2", 72.0}, {"resolution", 256.0}});
  metrics::JointScoreParams p;
  p.mu = s.value("mu", p.mu);
  p.sigma2 = s.value("sigma2", p.sigma2);
  p.resolution = s.value("resolution", p.resolution);
  metrics::validate(p);
  std::map<std::size_t, std::pair<double, double>> sums;
  std::map<std::size_t, std::size_t> counts;
  json per_clip = json::array();
  for (const auto& c : refs) {
    auto it = preds.find(c.clip_id);
    if (it == preds.end()) throw UsageError("no prediction for clip " + c.clip_id);
    const auto truth = training::future_truth(forecast::clip_tensors(c));
    if (it->second.size() != truth.size())
      throw UsageError("clip " + c.clip_id + ": prediction has " + std::to_string(it->second.size()) +
                       " steps, reference has " + std::to_string(truth.size()));
    const auto ev = metrics::sequence_pose_eval(it->second, truth, c.T1, p);
    json rows = json::array();
    for (const auto& e : ev) {
      sums[e.step].first += e.mse;
      sums[e.step].second += e.score;
      ++counts[e.step];
      rows.push_back({{"step", e.step}, {"mse", e.mse}, {"score", e.score}});
    }
    per_clip.push_back({{"clip_id", c.clip_id}, {"steps", rows}});
  }
  json steps = json::array();
  csv << "step,mse,score\n" << std::setprecision(17);
  for (const auto& [step, sm] : sums) {
    const double n = static_cast<double>(counts[step]);
    steps.push_back({{"step", step}, {"mse", sm.first / n}, {"score", sm.second / n}});
    csv << step << ',' << sm.first / n << ',' << sm.second / n << '\n';
  }
  return {{"params", {{"mu", p.mu}, {"sigma2", p.sigma2}, {"resolution", p.resolution}}},
          {"steps", steps},
          {"per_clip", per_clip}};
}

std::vector<fs::path> png_files(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

json eval_image(const Globals& g, const EvalArgs& a, std::ostringstream& csv) {
  const fs::path pred = g.resolve(a.pred), ref = g.resolve(a.ref);
  if (!fs::is_directory(pred) || !fs::is_directory(ref))
    throw UsageError("image mode expects --pred and --ref to be frame directories");
  const auto files = png_files(pred);
  if (files.empty()) throw UsageError("no PNG frames under " + pred.string());
  std::vector<Image> gen, goal;
  for (const auto& f : files) {
    require_file(ref / f, "reference frame");
    gen.push_back(read_png(pred / f, 3));
    goal.push_back(read_png(ref / f, 3));
  }
  const auto ev = metrics::image_mse_psnr(gen, goal);
  csv << "frames,mse,psnr\n" << std::setprecision(17) << files.size() << ',' << ev.mse << ','
      << (ev.psnr_infinite() ? std::string("inf") : std::to_string(ev.psnr)) << '\n';
  return {{"frames", files.size()},
          {"mse", ev.mse},
          {"psnr", number_or_null(ev.psnr)},
          {"psnr_infinite", ev.psnr_infinite()}};
}

metrics::LabelledSequence person_sequence(const std::vector<Tensor>& frames, std::size_t i, std::size_t label) {
  const std::size_t w = frames[0].dim(1);
  Tensor f({frames.size(), w});
  for (std::size_t t = 0; t < frames.size(); ++t)
    for (std::size_t c = 0; c < w; ++c) f.at(t, c) = frames[t].at(i, c);
  return {f, label};
}

json eval_action(const Globals& g, const json& cfg, const std::vector<SceneClip>& refs,
                 const std::map<std::string, std::vector<Tensor>>& preds, std::ostringstream& csv) {
  const json s = section(cfg, "classifier", {{"hidden", 32}, {"iterations", 300}, {"lr", 1e-2}, {"classes", 4}});
  metrics::ClassifierConfig cc;
  cc.hidden = s.value("hidden", cc.hidden);
  cc.iterations = s.value("iterations", cc.iterations);
  cc.lr = s.value("lr", cc.lr);
  cc.seed = g.seed;
  const std::size_t classes = s.value("classes", std::size_t{4});
  std::vector<metrics::LabelledSequence> train, test;
  for (const auto& c : refs) {
    if (!c.labels) throw UsageError("clip " + c.clip_id + " has no action labels");
    auto it = preds.find(c.clip_id);
    if (it == preds.end()) throw UsageError("no prediction for clip " + c.clip_id);
    const auto ct = forecast::clip_tensors(c);
    std::vector<Tensor> generated(ct.poses.begin(), ct.poses.begin() + static_cast<std::ptrdiff_t>(c.T1));
    generated.insert(generated.end(), it->second.begin(), it->second.end());
    for (std::size_t i = 0; i < c.persons(); ++i) {
      const auto label = static_cast<std::size_t>((*c.labels)[i]);
      if (label >= classes) throw UsageError("label " + std::to_string(label) + " >= classifier.classes");
      train.push_back(person_sequence(ct.poses, i, label));
      test.push_back(person_sequence(generated, i, label));
    }
  }
  const auto ev = metrics::action_eval(train, test, classes, cc);
  csv << "accuracy,non_majority_accuracy\n" << std::setprecision(17) << ev.accuracy << ','
      << ev.non_majority_accuracy << '\n';
  return {{"accuracy", ev.accuracy},
          {"non_majority_accuracy", number_or_null(ev.non_majority_accuracy)},
          {"majority_label", ev.majority_label},
          {"confusion", ev.confusion},
          {"sequences", test.size()}};
}

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const json cfg = load_config(g);
  json report{{"mode", a.mode}, {"version", VIDCAST_VERSION}};
  std::ostringstream csv;
  if (a.mode == "pose" || a.mode == "action") {
    check_sections(cfg, {a.mode == "pose" ? "metrics" : "classifier"});
    const auto refs = read_clips(g.resolve(a.ref));
    const auto preds = load_predictions(g.resolve(a.pred));
    report["clips"] = refs.size();
    report[a.mode] = a.mode == "pose" ? eval_pose(g, cfg, a, refs, preds, csv) : eval_action(g, cfg, refs, preds, csv);
  } else if (a.mode == "image") {
    check_sections(cfg, {});
    report["image"] = eval_image(g, a, csv);
  } else {
    throw UsageError("--mode must be pose, image or action");
  }
  const fs::path out = g.resolve(a.out);
  write_text(out, report.dump(2) + "\n");
  if (!a.csv.empty()) write_text(g.resolve(a.csv), csv.str());
  write_manifest(out, false, "eval", {{"mode", a.mode}, {"config", cfg}}, {{"seed", g.seed}},
                 json::array({a.pred, a.ref}));
  std::cout << report.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vidcast: multi-person pose forecasting and appearance rendering"};
  app.set_version_flag("--version", std::string(VIDCAST_VERSION));
  app.require_subcommand(1);
  Globals g;
  app.add_option("--workdir", g.workdir, "Root for every relative path")->capture_default_str();
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--workers", g.workers, "Parallel workers (forecast)")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--config", g.config_path, "JSON or section.key=value config file");
  app.add_option("--set", g.sets, "Override a config value: section.key=value");

  std::function<int()> run;

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate synthetic multi-person clips");
  synth->add_option("--out", sa.out, "Clip file (JSON lines)")->required();
  synth->add_option("--count", sa.count, "Number of clips")->capture_default_str();
  synth->callback([&] { run = [&] { return cmd_synth(g, sa); }; });

  SynthRenderArgs sra;
  auto* sr = app.add_subcommand("synth-render", "Generate (posemap, reference, goal) figure triples");
  sr->add_option("--out", sra.out, "Output directory")->required();
  sr->callback([&] { run = [&] { return cmd_synth_render(g, sra); }; });

  TrainPoseArgs tpa;
  auto* tp = app.add_subcommand("train-pose", "Train the pose forecaster (stage 1 or 2)");
  tp->add_option("--clips", tpa.clips, "Training clips")->required();
  tp->add_option("--stage", tpa.stage, "Training stage")->check(CLI::IsMember({1, 2}))->capture_default_str();
  tp->add_option("--out", tpa.out, "Output checkpoint")->required();
  tp->add_option("--init-from", tpa.init_from, "Stage-1 checkpoint (required for stage 2)");
  tp->add_option("--resume", tpa.resume, "Continue an interrupted run of the same stage");
  tp->add_option("--loss-csv", tpa.loss_csv, "Loss curve CSV (default <out>.loss.csv)");
  tp->callback([&] { run = [&] { return cmd_train_pose(g, tpa); }; });

  TrainRenderArgs tra;
  auto* trn = app.add_subcommand("train-render", "Train the appearance renderer");
  trn->add_option("--triples", tra.triples, "Triples index (JSON lines)")->required();
  trn->add_option("--out", tra.out, "Output checkpoint")->required();
  trn->add_option("--loss-csv", tra.loss_csv, "Loss CSV (default <out>.loss.csv)");
  trn->callback([&] { run = [&] { return cmd_train_render(g, tra); }; });

  ForecastArgs fa;
  auto* fc = app.add_subcommand("forecast", "Forecast future poses");
  fc->add_option("--clips", fa.clips, "Input clips")->required();
  fc->add_option("--checkpoint", fa.checkpoint, "Pose checkpoint")->required();
  fc->add_option("--out", fa.out, "Forecast JSON")->required();
  fc->add_option("--model", fa.model, "mg, vanilla or social")->check(CLI::IsMember({"mg", "vanilla", "social"}))->capture_default_str();
  fc->add_option("--posemaps", fa.posemaps, "Also write posemap PNGs under this directory");
  fc->add_option("--posemap-resolution", fa.posemap_resolution, "Posemap size")->check(CLI::Range(8, 4096))->capture_default_str();
  fc->callback([&] { run = [&] { return cmd_forecast(g, fa); }; });

  RenderArgs ra;
  auto* rd = app.add_subcommand("render", "Render forecast poses frame by frame");
  rd->add_option("--forecast", ra.forecast, "Forecast JSON")->required();
  rd->add_option("--checkpoint", ra.checkpoint, "Render checkpoint")->required();
  rd->add_option("--out", ra.out, "Output directory")->required();
  rd->add_option("--reference", ra.reference, "One reference PNG for every person");
  rd->add_option("--reference-dir", ra.reference_dir, "Directory of person_<i>.png references");
  rd->callback([&] { run = [&] { return cmd_render(g, ra); }; });

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate predictions against references");
  ev->add_option("--pred", ea.pred, "Forecast JSON, clip file, or frame directory")->required();
  ev->add_option("--ref", ea.ref, "Reference clips or frame directory")->required();
  ev->add_option("--mode", ea.mode, "pose, image or action")->check(CLI::IsMember({"pose", "image", "action"}))->capture_default_str();
  ev->add_option("--out", ea.out, "Report JSON")->required();
  ev->add_option("--csv", ea.csv, "Also write the table as CSV");
  ev->callback([&] { run = [&] { return cmd_eval(g, ea); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    return run();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ClipFormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: bad configuration or input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  }
}
