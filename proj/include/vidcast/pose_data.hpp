#pragma once

// Pose and scene data model, line-delimited JSON clip files, posemap
// rasterization and the synthetic multi-person scene generator.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidcast/image.hpp"
#include "vidcast/rng.hpp"

namespace vidcast {

inline constexpr std::size_t kDefaultJoints = 14;

// head, neck, r-shoulder, r-elbow, r-wrist, l-shoulder, l-elbow, l-wrist,
// r-hip, r-knee, r-ankle, l-hip, l-knee, l-ankle
inline const std::vector<std::string>& joint_names14() {
  static const std::vector<std::string> names{
      "head",  "neck",   "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow",
      "l_wrist", "r_hip", "r_knee",    "r_ankle", "l_hip",   "l_knee",     "l_ankle"};
  return names;
}

// Rooted joint tree. parent[root] == -1.
struct KinematicTree {
  std::vector<int> parent;
  std::size_t root = 0;

  std::size_t size() const { return parent.size(); }

  // 14-joint skeleton rooted at the neck.
  static KinematicTree standard14() {
    return {{1, -1, 1, 2, 3, 1, 5, 6, 1, 8, 9, 1, 11, 12}, 1};
  }
  static KinematicTree chain(std::size_t joints) {
    KinematicTree t;
    for (std::size_t j = 0; j < joints; ++j) t.parent.push_back(static_cast<int>(j) - 1);
    return t;
  }
  static KinematicTree for_joints(std::size_t joints) {
    return joints == kDefaultJoints ? standard14() : chain(joints);
  }

  // Depth-first pre-order from the root, children visited by ascending index.
  std::vector<std::size_t> dfs_order() const {
    std::vector<std::size_t> order;
    std::vector<std::size_t> stack{root};
    while (!stack.empty()) {
      const std::size_t j = stack.back();
      stack.pop_back();
      order.push_back(j);
      for (std::size_t c = parent.size(); c-- > 0;)
        if (parent[c] == static_cast<int>(j)) stack.push_back(c);
    }
    return order;
  }
};

struct Joint {
  double x = 0.0;
  double y = 0.0;
  bool visible = true;

  friend bool operator==(const Joint&, const Joint&) = default;
};

struct Pose {
  std::vector<Joint> joints;

  std::size_t size() const { return joints.size(); }
  std::size_t visible_count() const {
    return static_cast<std::size_t>(
        std::count_if(joints.begin(), joints.end(), [](const Joint& j) { return j.visible; }));
  }
  friend bool operator==(const Pose&, const Pose&) = default;
};

// Scene-normalized box: center and size.
struct Box {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
  friend bool operator==(const Box&, const Box&) = default;
};

struct PersonTrack {
  int person_id = 0;
  std::vector<Pose> poses;
  std::vector<Box> boxes;
  friend bool operator==(const PersonTrack&, const PersonTrack&) = default;
};

struct SceneClip {
  std::string clip_id;
  std::size_t T1 = 6;
  std::size_t T2 = 5;
  std::size_t J = kDefaultJoints;
  std::vector<PersonTrack> tracks;
  std::optional<std::vector<int>> labels;
  std::optional<std::vector<int>> true_groups;

  std::size_t persons() const { return tracks.size(); }
  std::size_t frames() const { return T1 + T2; }
  friend bool operator==(const SceneClip&, const SceneClip&) = default;
};

// Returns a description of the first violated invariant, if any.
inline std::optional<std::string> clip_violation(const SceneClip& clip) {
  if (clip.tracks.size() < 2) return "fewer than 2 tracks";
  if (clip.T1 < 1) return "T1 must be at least 1";
  if (clip.J < 1) return "J must be positive";
  const std::size_t n = clip.tracks.size();
  if (clip.labels && clip.labels->size() != n) return "labels length differs from track count";
  if (clip.true_groups && clip.true_groups->size() != n)
    return "true_groups length differs from track count";
  for (const auto& tr : clip.tracks) {
    const std::string who = "person " + std::to_string(tr.person_id);
    if (tr.poses.size() != clip.frames()) return who + ": pose count differs from T1+T2";
    if (tr.boxes.size() != clip.frames()) return who + ": box count differs from T1+T2";
    for (const auto& p : tr.poses) {
      if (p.size() != clip.J) return who + ": pose has " + std::to_string(p.size()) + " joints";
      for (const auto& j : p.joints)
        if (j.visible && (!(j.x >= 0.0 && j.x <= 1.0) || !(j.y >= 0.0 && j.y <= 1.0)))
          return who + ": visible joint outside [0,1]";
    }
    for (const auto& b : tr.boxes)
      if (!std::isfinite(b.cx) || !std::isfinite(b.cy) || !std::isfinite(b.w) ||
          !std::isfinite(b.h))
        return who + ": non-finite box";
  }
  return std::nullopt;
}

// ------------------------------------------------------------------ file I/O

class ClipFormatError : public std::runtime_error {
 public:
  ClipFormatError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline nlohmann::json clip_to_json(const SceneClip& clip) {
  nlohmann::json j;
  j["clip_id"] = clip.clip_id;
  j["T1"] = clip.T1;
  j["T2"] = clip.T2;
  j["J"] = clip.J;
  j["tracks"] = nlohmann::json::array();
  for (const auto& tr : clip.tracks) {
    nlohmann::json t;
    t["person_id"] = tr.person_id;
    t["boxes"] = nlohmann::json::array();
    for (const auto& b : tr.boxes) t["boxes"].push_back({b.cx, b.cy, b.w, b.h});
    t["poses"] = nlohmann::json::array();
    for (const auto& p : tr.poses) {
      nlohmann::json pj = nlohmann::json::array();
      for (const auto& jt : p.joints) pj.push_back({jt.x, jt.y, jt.visible ? 1 : 0});
      t["poses"].push_back(std::move(pj));
    }
    j["tracks"].push_back(std::move(t));
  }
  if (clip.labels) j["labels"] = *clip.labels;
  if (clip.true_groups) j["true_groups"] = *clip.true_groups;
  return j;
}

// Throws nlohmann::json exceptions on schema errors.
inline SceneClip clip_from_json(const nlohmann::json& j) {
  SceneClip clip;
  clip.clip_id = j.at("clip_id").get<std::string>();
  clip.T1 = j.at("T1").get<std::size_t>();
  clip.T2 = j.at("T2").get<std::size_t>();
  clip.J = j.at("J").get<std::size_t>();
  for (const auto& t : j.at("tracks")) {
    PersonTrack tr;
    tr.person_id = t.at("person_id").get<int>();
    for (const auto& b : t.at("boxes")) {
      if (b.size() != 4) throw std::invalid_argument("box must have 4 values");
      tr.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                          b[3].get<double>()});
    }
    for (const auto& p : t.at("poses")) {
      Pose pose;
      for (const auto& jt : p) {
        if (jt.size() != 3) throw std::invalid_argument("joint must be [x, y, v]");
        pose.joints.push_back({jt[0].get<double>(), jt[1].get<double>(), jt[2].get<double>() != 0});
      }
      tr.poses.push_back(std::move(pose));
    }
    clip.tracks.push_back(std::move(tr));
  }
  if (j.contains("labels")) clip.labels = j.at("labels").get<std::vector<int>>();
  if (j.contains("true_groups")) clip.true_groups = j.at("true_groups").get<std::vector<int>>();
  return clip;
}

struct LoadResult {
  std::vector<SceneClip> clips;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

inline LoadResult load_clips(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open clip file " + path.string());
  LoadResult result;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    SceneClip clip;
    try {
      clip = clip_from_json(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw ClipFormatError(lineno, e.what());
    }
    if (auto why = clip_violation(clip)) {
      ++result.skipped;
      result.warnings.push_back("line " + std::to_string(lineno) + " (" + clip.clip_id +
                                "): " + *why);
      continue;
    }
    result.clips.push_back(std::move(clip));
  }
  return result;
}

inline void write_clips(const std::vector<SceneClip>& clips, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write clip file " + path.string());
  for (const auto& c : clips) out << clip_to_json(c).dump() << '\n';
  if (!out) throw std::runtime_error("short write on clip file " + path.string());
}

// Drops tracks with any frame below min_joints visible joints, then clips
// left with fewer than max(min_targets, 2) tracks.
inline std::vector<SceneClip> filter_clips(const std::vector<SceneClip>& clips,
                                           std::size_t min_joints, std::size_t min_targets) {
  if (min_targets < 1) throw std::invalid_argument("min_targets must be at least 1");
  std::vector<SceneClip> out;
  for (const auto& clip : clips) {
    SceneClip kept = clip;
    kept.tracks.clear();
    std::vector<int> labels, groups;
    for (std::size_t i = 0; i < clip.tracks.size(); ++i) {
      const auto& tr = clip.tracks[i];
      const bool ok = std::all_of(tr.poses.begin(), tr.poses.end(), [&](const Pose& p) {
        return p.visible_count() >= min_joints;
      });
      if (!ok) continue;
      kept.tracks.push_back(tr);
      if (clip.labels) labels.push_back((*clip.labels)[i]);
      if (clip.true_groups) groups.push_back((*clip.true_groups)[i]);
    }
    if (kept.tracks.size() < std::max<std::size_t>(min_targets, 2)) continue;
    if (clip.labels) kept.labels = labels;
    if (clip.true_groups) kept.true_groups = groups;
    out.push_back(std::move(kept));
  }
  return out;
}

// ------------------------------------------------------------------- posemap

inline int default_posemap_radius(int resolution) {
  return std::max(1, static_cast<int>(std::lround(2.0 * resolution / 64.0)));
}

// White disks (255) of the given radius on black, one per visible joint.
inline Image rasterize_posemap(const Pose& pose, int height, int width, int radius) {
  if (height < 8 || width < 8) throw std::invalid_argument("posemap must be at least 8x8");
  if (radius < 1) throw std::invalid_argument("posemap radius must be at least 1");
  Image img(width, height, 1);
  for (const auto& j : pose.joints) {
    if (!j.visible) continue;
    const int cx = static_cast<int>(std::floor(j.x * (width - 1) + 0.5));
    const int cy = static_cast<int>(std::floor(j.y * (height - 1) + 0.5));
    for (int y = std::max(0, cy - radius); y <= std::min(height - 1, cy + radius); ++y)
      for (int x = std::max(0, cx - radius); x <= std::min(width - 1, cx + radius); ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius) img.at(x, y) = 255;
  }
  return img;
}

// ----------------------------------------------------------------- synthesis

struct SynthConfig {
  std::size_t persons = 6;
  std::size_t T1 = 6;
  std::size_t T2 = 5;
  std::size_t joints = kDefaultJoints;
  std::size_t groups = 2;
  double noise = 0.01;
  std::size_t classes = 4;
  double invisible_prob = 0.0;
};

inline void validate(const SynthConfig& cfg) {
  if (cfg.persons < 2) throw std::invalid_argument("synth: need at least 2 persons");
  if (cfg.groups < 1 || cfg.groups > cfg.persons - 1)
    throw std::invalid_argument("synth: groups must lie in [1, persons-1]");
  if (cfg.joints < 2) throw std::invalid_argument("synth: need at least 2 joints");
  if (cfg.T1 < 1 || cfg.T2 < 1) throw std::invalid_argument("synth: T1 and T2 must be >= 1");
  if (cfg.noise < 0 || cfg.invisible_prob < 0 || cfg.invisible_prob > 1)
    throw std::invalid_argument("synth: noise and invisible_prob out of range");
  if (cfg.classes < 1) throw std::invalid_argument("synth: classes must be >= 1");
}

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"persons", c.persons}, {"T1", c.T1},       {"T2", c.T2},
          {"joints", c.joints},   {"groups", c.groups}, {"noise", c.noise},
          {"classes", c.classes}, {"invisible_prob", c.invisible_prob}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig c = {}) {
  if (j.contains("persons")) c.persons = j["persons"].get<std::size_t>();
  if (j.contains("T1")) c.T1 = j["T1"].get<std::size_t>();
  if (j.contains("T2")) c.T2 = j["T2"].get<std::size_t>();
  if (j.contains("joints")) c.joints = j["joints"].get<std::size_t>();
  if (j.contains("groups")) c.groups = j["groups"].get<std::size_t>();
  if (j.contains("noise")) c.noise = j["noise"].get<double>();
  if (j.contains("classes")) c.classes = j["classes"].get<std::size_t>();
  if (j.contains("invisible_prob")) c.invisible_prob = j["invisible_prob"].get<double>();
  return c;
}

namespace detail {

inline std::vector<Joint> template_pose(std::size_t joints) {
  if (joints == kDefaultJoints)
    return {{0.50, 0.10}, {0.50, 0.20}, {0.38, 0.22}, {0.33, 0.38}, {0.30, 0.52},
            {0.62, 0.22}, {0.67, 0.38}, {0.70, 0.52}, {0.42, 0.55}, {0.41, 0.72},
            {0.40, 0.86}, {0.58, 0.55}, {0.59, 0.72}, {0.60, 0.86}};
  std::vector<Joint> t;
  for (std::size_t j = 0; j < joints; ++j)
    t.push_back({0.5 + 0.15 * std::sin(static_cast<double>(j)),
                 0.1 + 0.7 * static_cast<double>(j) / static_cast<double>(joints - 1)});
  return t;
}

// Per-joint limb response to the group oscillation: (arm weight, leg weight, side sign).
struct LimbResponse {
  double arm = 0.0, leg = 0.0, side = 1.0;
};

inline std::vector<LimbResponse> limb_responses(std::size_t joints) {
  if (joints == kDefaultJoints)
    return {{0, 0, 1},   {0, 0, 1},   {0, 0, 1},   {0.5, 0, 1}, {1, 0, 1},
            {0, 0, -1},  {0.5, 0, -1}, {1, 0, -1}, {0, 0, 1},   {0, 0.5, 1},
            {0, 1, 1},   {0, 0, -1},  {0, 0.5, -1}, {0, 1, -1}};
  std::vector<LimbResponse> r;
  for (std::size_t j = 0; j < joints; ++j)
    r.push_back({static_cast<double>(j) / static_cast<double>(joints - 1), 0.0, 1.0});
  return r;
}

}  // namespace detail

// Multi-person scene in which persons of a true group share a velocity and a
// phase-locked limb oscillation. Each group also draws an action class that
// selects which limbs move (0: near-still, 1: arms, 2: legs, 3: both).
inline SceneClip synth_scene(const SynthConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng(seed);
  struct GroupMotion {
    double vx, vy, omega, phase, amp;
    int label;
  };
  std::vector<GroupMotion> motion;
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    GroupMotion m{};
    m.vx = rng.uniform(-0.01, 0.01);
    m.vy = rng.uniform(-0.005, 0.005);
    m.omega = rng.uniform(0.5, 1.0);
    m.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    m.amp = rng.uniform(0.04, 0.08);
    m.label = static_cast<int>(rng.below(cfg.classes));
    motion.push_back(m);
  }
  std::vector<int> membership(cfg.persons);
  for (std::size_t i = 0; i < cfg.persons; ++i)
    membership[i] = i < cfg.groups ? static_cast<int>(i) : static_cast<int>(rng.below(cfg.groups));
  rng.shuffle(membership);

  const auto templ = detail::template_pose(cfg.joints);
  const auto limbs = detail::limb_responses(cfg.joints);
  const std::size_t frames = cfg.T1 + cfg.T2;

  SceneClip clip;
  clip.clip_id = "synth-" + std::to_string(seed);
  clip.T1 = cfg.T1;
  clip.T2 = cfg.T2;
  clip.J = cfg.joints;
  std::vector<int> labels;
  for (std::size_t i = 0; i < cfg.persons; ++i) {
    const GroupMotion& m = motion[static_cast<std::size_t>(membership[i])];
    const double arm_gain = m.label == 1 || m.label == 3 ? 1.0 : (m.label == 0 ? 0.15 : 0.0);
    const double leg_gain = m.label == 2 || m.label == 3 ? 1.0 : (m.label == 0 ? 0.15 : 0.0);
    PersonTrack tr;
    tr.person_id = static_cast<int>(i);
    const double cx0 = rng.uniform(0.15, 0.85), cy0 = rng.uniform(0.15, 0.85);
    const double bw = rng.uniform(0.06, 0.10), bh = rng.uniform(0.15, 0.25);
    std::vector<Joint> base = templ;
    for (auto& j : base) {
      j.x += rng.uniform(-0.02, 0.02);
      j.y += rng.uniform(-0.02, 0.02);
    }
    for (std::size_t t = 0; t < frames; ++t) {
      const double a = m.omega * static_cast<double>(t) + m.phase;
      Pose pose;
      for (std::size_t j = 0; j < cfg.joints; ++j) {
        const auto& lr = limbs[j];
        const double w = arm_gain * lr.arm;
        const double wl = leg_gain * lr.leg;
        double x = base[j].x + m.amp * lr.side * (w * std::sin(a) + wl * std::sin(a + std::numbers::pi));
        double y = base[j].y + 0.5 * m.amp * (w * std::cos(a) + wl * std::cos(a + std::numbers::pi));
        if (cfg.noise > 0) {
          x += rng.normal(0.0, cfg.noise);
          y += rng.normal(0.0, cfg.noise);
        }
        const bool visible = cfg.invisible_prob <= 0 || rng.uniform() >= cfg.invisible_prob;
        pose.joints.push_back({std::clamp(x, 0.0, 1.0), std::clamp(y, 0.0, 1.0), visible});
      }
      tr.poses.push_back(std::move(pose));
      Box b{cx0 + m.vx * static_cast<double>(t), cy0 + m.vy * static_cast<double>(t), bw, bh};
      if (cfg.noise > 0) {
        b.cx += rng.normal(0.0, 0.25 * cfg.noise);
        b.cy += rng.normal(0.0, 0.25 * cfg.noise);
      }
      b.cx = std::clamp(b.cx, 0.0, 1.0);
      b.cy = std::clamp(b.cy, 0.0, 1.0);
      tr.boxes.push_back(b);
    }
    clip.tracks.push_back(std::move(tr));
    labels.push_back(m.label);
  }
  clip.labels = labels;
  clip.true_groups = membership;
  return clip;
}

}  // namespace vidcast
