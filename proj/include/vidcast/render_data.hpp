#pragma once

// Synthetic stick figures with one uniform color per person, used as paired
// (posemap, reference, goal) data for the renderer.

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidcast/ada_render.hpp"
#include "vidcast/image.hpp"
#include "vidcast/pose_data.hpp"

namespace vidcast::render {

using Color = std::array<double, 3>;

struct FigureStyle {
  Color color{1, 1, 1};
  double limb_radius = 2.0;  // pixels at 64x64
  double head_radius = 3.5;
};

inline double segment_distance2(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = px - (ax + t * dx), ey = py - (ay + t * dy);
  return ex * ex + ey * ey;
}

// Figure mask at resolution r: limbs follow the kinematic tree edges between
// visible joints, plus a disk for the head joint.
inline std::vector<std::uint8_t> figure_mask(const Pose& pose, const KinematicTree& tree, int r,
                                             const FigureStyle& style) {
  const double s = r / 64.0;
  const double lr = style.limb_radius * s, hr = style.head_radius * s;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(r) * r, 0);
  auto px = [&](double v) { return v * (r - 1); };
  for (std::size_t j = 0; j < pose.joints.size(); ++j) {
    const auto& a = pose.joints[j];
    if (!a.visible) continue;
    const int parent = tree.parent[j];
    const bool edge = parent >= 0 && pose.joints[static_cast<std::size_t>(parent)].visible;
    const auto& b = edge ? pose.joints[static_cast<std::size_t>(parent)] : a;
    const double rad = j == 0 ? hr : lr;
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x) {
        const double d2 = segment_distance2(x, y, px(a.x), px(a.y), px(b.x), px(b.y));
        if (d2 <= lr * lr) mask[static_cast<std::size_t>(y) * r + x] = 1;
        if (j == 0) {
          const double hx = x - px(a.x), hy = y - px(a.y);
          if (hx * hx + hy * hy <= rad * rad) mask[static_cast<std::size_t>(y) * r + x] = 1;
        }
      }
  }
  return mask;
}

// RGB (3,r,r) tensor: the figure in its color on black.
inline Tensor draw_figure(const std::vector<std::uint8_t>& mask, int r, const Color& color) {
  Tensor t({3, static_cast<std::size_t>(r), static_cast<std::size_t>(r)});
  const std::size_t plane = static_cast<std::size_t>(r) * r;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      if (mask[i]) t[c * plane + i] = color[c];
  return t;
}

inline Tensor posemap_tensor(const Pose& pose, int r) {
  return image_to_tensor(rasterize_posemap(pose, r, r, default_posemap_radius(r)));
}

// Distinct, reasonably bright colors: each channel in [0.1, 1] and the
// brightest channel at least 0.5. Colors are 8-bit representable.
inline Color random_color(Rng& rng) {
  for (;;) {
    Color c;
    for (auto& v : c) v = std::round(rng.uniform(0.1, 1.0) * 255.0) / 255.0;
    if (std::max({c[0], c[1], c[2]}) >= 0.5) return c;
  }
}

struct FigureTriple {
  RenderTriple triple;
  std::vector<std::uint8_t> goal_mask;
  Color color;
  int person = 0;  // figure identity within the generated set
};

struct RenderSetConfig {
  int resolution = 64;
  std::size_t persons = 16;
  std::size_t triples_per_person = 4;
  FigureStyle style;
};

// Each person gets one color and one pose track; a triple pairs the
// person's posemap/goal at one frame with a reference at another frame.
inline std::vector<FigureTriple> synth_render_set(const RenderSetConfig& cfg, std::uint64_t seed) {
  if (cfg.resolution < 16) throw std::invalid_argument("render set resolution must be >= 16");
  Rng rng(mix_seed(seed, 0xF16));
  const auto tree = KinematicTree::standard14();
  std::vector<FigureTriple> out;
  for (std::size_t p = 0; p < cfg.persons; ++p) {
    SynthConfig sc;
    sc.persons = 2;
    sc.groups = 1;
    sc.T1 = 6;
    sc.T2 = 6;
    sc.noise = 0.01;
    const SceneClip clip = synth_scene(sc, mix_seed(seed, 0x5000 + p));
    const auto& poses = clip.tracks[0].poses;
    FigureStyle style = cfg.style;
    style.color = random_color(rng);
    for (std::size_t k = 0; k < cfg.triples_per_person; ++k) {
      const std::size_t gt = rng.below(poses.size());
      std::size_t rt = rng.below(poses.size() - 1);
      if (rt >= gt) ++rt;
      FigureTriple ft;
      ft.person = static_cast<int>(p);
      ft.color = style.color;
      ft.goal_mask = figure_mask(poses[gt], tree, cfg.resolution, style);
      ft.triple.posemap = posemap_tensor(poses[gt], cfg.resolution);
      ft.triple.goal = draw_figure(ft.goal_mask, cfg.resolution, style.color);
      ft.triple.reference =
          draw_figure(figure_mask(poses[rt], tree, cfg.resolution, style), cfg.resolution, style.color);
      out.push_back(std::move(ft));
    }
  }
  return out;
}

inline std::vector<RenderTriple> triples_of(const std::vector<FigureTriple>& set) {
  std::vector<RenderTriple> out;
  out.reserve(set.size());
  for (const auto& f : set) out.push_back(f.triple);
  return out;
}

// Mean RGB over the masked pixels of a (3,r,r) image.
inline Color masked_mean_color(const Tensor& image, const std::vector<std::uint8_t>& mask) {
  const std::size_t plane = mask.size();
  if (image.size() != 3 * plane) throw ShapeError("masked_mean_color: size mismatch");
  Color sum{0, 0, 0};
  std::size_t n = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (!mask[i]) continue;
    ++n;
    for (std::size_t c = 0; c < 3; ++c) sum[c] += image[c * plane + i];
  }
  if (n == 0) return sum;
  for (auto& v : sum) v /= static_cast<double>(n);
  return sum;
}

inline double color_distance(const Color& a, const Color& b) {
  double s = 0.0;
  for (std::size_t c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return std::sqrt(s);
}

struct AppearanceResult {
  std::size_t passed = 0;
  std::size_t total = 0;
  double rate() const { return total ? static_cast<double>(passed) / static_cast<double>(total) : 0.0; }
};

// For each triple, the rendered figure's mean color must be closer to its own
// reference color than to the colors of `distractors` other references drawn
// from different persons. The figure's reference color is its uniform
// fill, so the reference mean color is the person's color.
inline AppearanceResult appearance_test(AdaRenderer& gen, const std::vector<FigureTriple>& set,
                                        std::size_t distractors, std::uint64_t seed) {
  AppearanceResult res;
  Rng rng(mix_seed(seed, 0xC010));
  for (const auto& ft : set) {
    std::vector<Color> others;
    std::vector<int> seen{ft.person};
    for (const auto& o : set)
      if (std::find(seen.begin(), seen.end(), o.person) == seen.end()) {
        seen.push_back(o.person);
        others.push_back(o.color);
      }
    if (others.size() < distractors) throw std::invalid_argument("appearance test: too few persons");
    rng.shuffle(others);
    const auto frames = gen.render_sequence({ft.triple.posemap}, ft.triple.reference);
    const Color got = masked_mean_color(frames[0], ft.goal_mask);
    const double own = color_distance(got, ft.color);
    bool ok = true;
    for (std::size_t k = 0; k < distractors; ++k)
      if (color_distance(got, others[k]) <= own) ok = false;
    res.passed += ok;
    ++res.total;
  }
  return res;
}

// ------------------------------------------------------------------ disk I/O

// Writes posemap/reference/goal PNGs and an index of JSON lines
// {"posemap": path, "reference": path, "goal": path}, paths relative to dir.
inline void write_render_set(const std::filesystem::path& dir, const std::vector<RenderTriple>& set) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "triples.jsonl", std::ios::trunc);
  if (!index) throw std::runtime_error("cannot write " + (dir / "triples.jsonl").string());
  for (std::size_t i = 0; i < set.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%05zu", i);
    const std::string pm = std::string(stem) + "_posemap.png";
    const std::string ref = std::string(stem) + "_reference.png";
    const std::string goal = std::string(stem) + "_goal.png";
    write_png(dir / pm, tensor_to_image(set[i].posemap));
    write_png(dir / ref, tensor_to_image(set[i].reference));
    write_png(dir / goal, tensor_to_image(set[i].goal));
    index << nlohmann::json{{"posemap", pm}, {"reference", ref}, {"goal", goal}}.dump() << '\n';
  }
}

inline std::vector<RenderTriple> load_render_set(const std::filesystem::path& index_path) {
  std::ifstream in(index_path);
  if (!in) throw std::runtime_error("cannot open " + index_path.string());
  const auto base = index_path.parent_path();
  std::vector<RenderTriple> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(index_path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
    auto resolve = [&](const std::string& key) {
      std::filesystem::path p = j.at(key).get<std::string>();
      return p.is_absolute() ? p : base / p;
    };
    RenderTriple t;
    t.posemap = image_to_tensor(read_png(resolve("posemap"), 1));
    t.reference = image_to_tensor(read_png(resolve("reference"), 3));
    t.goal = image_to_tensor(read_png(resolve("goal"), 3));
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace vidcast::render
