#pragma once

// Adaptive appearance renderer: a filter bank computed from a reference
// image is convolved with the posemap encoder's features before decoding.

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidcast/checkpoint.hpp"
#include "vidcast/conv.hpp"
#include "vidcast/nn.hpp"

namespace vidcast::render {

using ad::Var;

struct RenderArch {
  std::string name;
  std::size_t ed_layers = 8;
  std::size_t fcn_layers = 5;
  std::size_t n_filters = 10;
  std::size_t kernel = 5;
};

inline const std::vector<RenderArch>& render_variants() {
  static const std::vector<RenderArch> v{
      {"8-5-10", 8, 5, 10, 5}, {"8-3-56", 8, 3, 56, 5}, {"8-3-10", 8, 3, 10, 5}, {"5-5-10", 5, 5, 10, 5}};
  return v;
}

inline RenderArch render_arch(const std::string& name) {
  for (const auto& a : render_variants())
    if (a.name == name) return a;
  throw std::invalid_argument("unknown render architecture '" + name +
                              "' (expected 8-5-10, 8-3-56, 8-3-10 or 5-5-10)");
}

struct RenderConfig {
  RenderArch arch = render_arch("8-5-10");
  std::size_t resolution = 64;
  std::size_t base_channels = 8;
  std::size_t max_channels = 64;
  std::size_t fcn_channels = 8;
  std::size_t disc_channels = 8;
  double leaky_slope = 0.2;
  // Encoder-to-decoder skips at every level except the innermost, which
  // would bypass the injected filter.
  bool skips = false;
  std::uint64_t init_seed = 0;

  // Stride-2 layers used at this resolution. The full depth maps 256 pixels
  // down to 1; smaller canvases drop layers in proportion.
  std::size_t encoder_depth() const {
    const double lg = std::log2(static_cast<double>(resolution));
    const auto d = static_cast<std::size_t>(std::floor(
        static_cast<double>(arch.ed_layers) * (lg - 1.0) / 7.0 + 1e-9));
    return std::max<std::size_t>(1, d);
  }
  std::size_t encoder_channels(std::size_t layer) const {
    return std::min(max_channels, base_channels << std::min<std::size_t>(layer, 16));
  }
  std::size_t enc_out_channels() const { return encoder_channels(encoder_depth() - 1); }
  std::size_t enc_out_size() const { return resolution >> encoder_depth(); }
};

inline void validate(const RenderConfig& c) {
  bool known = false;
  for (const auto& a : render_variants())
    known = known || (a.ed_layers == c.arch.ed_layers && a.fcn_layers == c.arch.fcn_layers &&
                      a.n_filters == c.arch.n_filters && a.kernel == c.arch.kernel);
  if (!known) throw std::invalid_argument("render architecture is not one of the named variants");
  if (c.resolution < 16 || (c.resolution & (c.resolution - 1)) != 0)
    throw std::invalid_argument("render resolution must be a power of two >= 16");
  if (c.resolution >> c.encoder_depth() < 1)
    throw std::invalid_argument("encoder too deep for resolution");
  if (c.base_channels < 1 || c.fcn_channels < 1 || c.disc_channels < 1)
    throw std::invalid_argument("channel counts must be positive");
}

inline nlohmann::json to_json(const RenderConfig& c) {
  return {{"arch", c.arch.name},       {"resolution", c.resolution},
          {"base_channels", c.base_channels}, {"max_channels", c.max_channels},
          {"fcn_channels", c.fcn_channels},   {"disc_channels", c.disc_channels},
          {"leaky_slope", c.leaky_slope},     {"skips", c.skips},
          {"init_seed", c.init_seed}};
}

inline RenderConfig render_config_from_json(const nlohmann::json& j, RenderConfig c = {}) {
  if (j.contains("arch")) c.arch = render_arch(j["arch"].get<std::string>());
  if (j.contains("resolution")) c.resolution = j["resolution"].get<std::size_t>();
  if (j.contains("base_channels")) c.base_channels = j["base_channels"].get<std::size_t>();
  if (j.contains("max_channels")) c.max_channels = j["max_channels"].get<std::size_t>();
  if (j.contains("fcn_channels")) c.fcn_channels = j["fcn_channels"].get<std::size_t>();
  if (j.contains("disc_channels")) c.disc_channels = j["disc_channels"].get<std::size_t>();
  if (j.contains("leaky_slope")) c.leaky_slope = j["leaky_slope"].get<double>();
  if (j.contains("skips")) c.skips = j["skips"].get<bool>();
  if (j.contains("init_seed")) c.init_seed = j["init_seed"].get<std::uint64_t>();
  return c;
}

// Stack equally shaped (C,H,W) tensors into (B,C,H,W).
inline Tensor batch_of(const std::vector<const Tensor*>& items) {
  if (items.empty()) throw ShapeError("batch_of: empty batch");
  Shape s{items.size()};
  for (auto d : items[0]->shape()) s.push_back(d);
  Tensor out(s);
  const std::size_t n = items[0]->size();
  for (std::size_t b = 0; b < items.size(); ++b) {
    items[b]->require_same(*items[0], "batch_of");
    std::copy_n(items[b]->data(), n, out.data() + b * n);
  }
  return out;
}

inline Tensor batch_of(const Tensor& item) { return batch_of(std::vector<const Tensor*>{&item}); }

// Sample b of a batched tensor, without the batch axis.
inline Tensor sample_of(const Tensor& batch, std::size_t b) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  Tensor out(s);
  std::copy_n(batch.data() + b * out.size(), out.size(), out.data());
  return out;
}

namespace detail {

inline Tensor conv_init(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  return nn::uniform_init({out, in, k, k}, std::sqrt(6.0 / static_cast<double>(in * k * k)), rng);
}

inline Tensor ones(std::size_t n) {
  Tensor t({n});
  for (std::size_t i = 0; i < n; ++i) t[i] = 1.0;
  return t;
}

inline ad::BatchNormState bn_state(std::size_t ch) {
  ad::BatchNormState s;
  s.running_mean = Tensor({ch});
  s.running_var = ones(ch);
  return s;
}

}  // namespace detail

// Batch-norm layer bound to named parameters plus its running statistics.
struct BnLayer {
  std::string name;
  Var gamma, beta;
  ad::BatchNormState state;

  static BnLayer create(nn::ParameterSet& ps, const std::string& name, std::size_t ch) {
    BnLayer l;
    l.name = name;
    l.gamma = ps.add(name + ".gamma", detail::ones(ch));
    l.beta = ps.add(name + ".beta", Tensor({ch}));
    l.state = detail::bn_state(ch);
    return l;
  }
  Var operator()(const Var& x, bool training) { return ad::batch_norm(x, gamma, beta, state, training); }
};

inline void put_bn(Checkpoint& ck, const std::string& prefix, const std::vector<BnLayer>& layers) {
  for (const auto& l : layers) {
    ck.put(prefix + l.name + ".running_mean", l.state.running_mean);
    ck.put(prefix + l.name + ".running_var", l.state.running_var);
  }
}

inline void load_bn(const Checkpoint& ck, const std::string& prefix, std::vector<BnLayer>& layers) {
  for (auto& l : layers) {
    l.state.running_mean = ck.get(prefix + l.name + ".running_mean");
    l.state.running_var = ck.get(prefix + l.name + ".running_var");
  }
}

// Generator: posemap encoder, reference FCN producing the filter bank, and
// the decoder that consumes the filtered features.
class AdaRenderer {
 public:
  explicit AdaRenderer(RenderConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    Rng rng(mix_seed(cfg_.init_seed, 0xADA));
    const std::size_t depth = cfg_.encoder_depth(), k = cfg_.arch.kernel;
    std::size_t in = 1;
    for (std::size_t l = 0; l < depth; ++l) {
      const std::size_t out = cfg_.encoder_channels(l);
      const std::string n = "enc" + std::to_string(l);
      params_.add(n + ".w", detail::conv_init(out, in, k, rng));
      if (l == 0)
        params_.add(n + ".b", Tensor({out}));
      else
        enc_bn_.push_back(BnLayer::create(params_, n + ".bn", out));
      in = out;
    }
    std::size_t fin = 3;
    for (std::size_t l = 0; l < cfg_.arch.fcn_layers; ++l) {
      const std::size_t out = std::min<std::size_t>(64, cfg_.fcn_channels << std::min<std::size_t>(l, 3));
      params_.add("fcn" + std::to_string(l) + ".w", detail::conv_init(out, fin, 3, rng));
      params_.add("fcn" + std::to_string(l) + ".b", Tensor({out}));
      fin = out;
    }
    const std::size_t cenc = cfg_.enc_out_channels();
    const std::size_t bank = cfg_.arch.n_filters * cenc * k * k;
    // Bank = base + W * pooled(reference). The base starts as an ordinary
    // conv initialization; the reference-dependent part starts small.
    const double bound = std::sqrt(6.0 / static_cast<double>(cenc * k * k + cfg_.arch.n_filters));
    params_.add("bank.w", nn::uniform_init({bank, fin}, 0.5 * bound, rng));
    params_.add("bank.b", nn::uniform_init({bank}, bound, rng));
    for (std::size_t l = 0; l < depth; ++l) {
      std::size_t cin = l == 0 ? cfg_.arch.n_filters : cfg_.encoder_channels(depth - 1 - l);
      if (cfg_.skips && l > 0) cin += cfg_.encoder_channels(depth - 1 - l);
      const std::size_t cout = l + 1 < depth ? cfg_.encoder_channels(depth - 2 - l) : 3;
      const std::string n = "dec" + std::to_string(l);
      params_.add(n + ".w", detail::conv_init(cin, cout, k, rng));
      if (l + 1 < depth)
        dec_bn_.push_back(BnLayer::create(params_, n + ".bn", cout));
      else
        params_.add(n + ".b", Tensor({cout}));
    }
  }

  AdaRenderer(const AdaRenderer&) = delete;
  AdaRenderer& operator=(const AdaRenderer&) = delete;

  const RenderConfig& config() const { return cfg_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

  Shape bank_shape(std::size_t batch) const {
    const std::size_t k = cfg_.arch.kernel;
    return {batch, cfg_.arch.n_filters, cfg_.enc_out_channels(), k, k};
  }

  // reference: (B,3,R,R) -> bank (B, n_filters, C_enc, k, k)
  Var compute_filters(const Var& reference) const {
    const std::size_t r = cfg_.resolution;
    if (reference.value().rank() != 4 || reference.dim(1) != 3 || reference.dim(2) != r ||
        reference.dim(3) != r)
      throw ShapeError("compute_filters: reference must be (B,3," + std::to_string(r) + "," +
                       std::to_string(r) + "), got " + shape_str(reference.shape()));
    Var h = reference;
    for (std::size_t l = 0; l < cfg_.arch.fcn_layers; ++l) {
      const std::string n = "fcn" + std::to_string(l);
      const std::size_t stride = h.dim(2) >= 2 ? 2 : 1;
      h = ad::relu(ad::add_channel_bias(ad::conv2d(h, params_.get(n + ".w"), stride, 1),
                                        params_.get(n + ".b")));
    }
    Var pooled = ad::global_avg_pool(h);
    Var flat = ad::linear(pooled, params_.get("bank.w"), params_.get("bank.b"));
    return ad::reshape(flat, bank_shape(reference.dim(0)));
  }

  Var encode(const Var& posemap, bool training) { return encode(posemap, training, nullptr); }

  // levels, when given, receives every encoder activation (finest first).
  Var encode(const Var& posemap, bool training, std::vector<Var>* levels) {
    const std::size_t r = cfg_.resolution;
    if (posemap.value().rank() != 4 || posemap.dim(1) != 1 || posemap.dim(2) != r ||
        posemap.dim(3) != r)
      throw ShapeError("encode: posemap must be (B,1," + std::to_string(r) + "," +
                       std::to_string(r) + "), got " + shape_str(posemap.shape()));
    const std::size_t k = cfg_.arch.kernel;
    Var h = posemap;
    for (std::size_t l = 0; l < cfg_.encoder_depth(); ++l) {
      const std::string n = "enc" + std::to_string(l);
      h = ad::conv2d(h, params_.get(n + ".w"), 2, k / 2);
      h = l == 0 ? ad::add_channel_bias(h, params_.get(n + ".b")) : enc_bn_[l - 1](h, training);
      h = ad::leaky_relu(h, cfg_.leaky_slope);
      if (levels) levels->push_back(h);
    }
    return h;
  }

  // Stride-1 same-padding convolution of every sample with its own bank.
  Var inject(const Var& features, const Var& bank) const {
    if (bank.value().rank() != 5 || bank.dim(0) != features.dim(0) ||
        bank.dim(1) != cfg_.arch.n_filters || bank.dim(2) != features.dim(1))
      throw ShapeError("inject: bank " + shape_str(bank.shape()) + " does not match features " +
                       shape_str(features.shape()));
    return ad::conv2d_per_sample(features, bank, 1, cfg_.arch.kernel / 2);
  }

  Var decode(const Var& filtered, bool training, const std::vector<Var>& levels = {}) {
    const std::size_t depth = cfg_.encoder_depth(), k = cfg_.arch.kernel;
    if (cfg_.skips && levels.size() != depth) throw ShapeError("decode: skips need every encoder level");
    Var h = filtered;
    for (std::size_t l = 0; l < depth; ++l) {
      const std::string n = "dec" + std::to_string(l);
      if (cfg_.skips && l > 0) h = ad::concat_channels(h, levels[depth - 1 - l]);
      h = ad::conv_transpose2d(h, params_.get(n + ".w"), 2, k / 2, 1);
      if (l + 1 < depth)
        h = ad::relu(dec_bn_[l](h, training));
      else
        h = ad::sigmoid(ad::add_channel_bias(h, params_.get(n + ".b")));
    }
    return h;
  }

  Var render(const Var& posemap, const Var& bank, bool training = false) {
    if (!cfg_.skips) return decode(inject(encode(posemap, training), bank), training);
    std::vector<Var> levels;
    Var enc = encode(posemap, training, &levels);
    return decode(inject(enc, bank), training, levels);
  }

  Var forward(const Var& posemap, const Var& reference, bool training) {
    return render(posemap, compute_filters(reference), training);
  }

  // Frame-by-frame rendering with one bank computed from the reference.
  // posemaps: (1,R,R) each; reference: (3,R,R). Returns (3,R,R) frames.
  std::vector<Tensor> render_sequence(const std::vector<Tensor>& posemaps, const Tensor& reference) {
    const Var bank = compute_filters(Var::constant(batch_of(reference)));
    std::vector<Tensor> frames;
    frames.reserve(posemaps.size());
    for (const auto& pm : posemaps)
      frames.push_back(sample_of(render(Var::constant(batch_of(pm)), bank, false).value(), 0));
    return frames;
  }

  void save(Checkpoint& ck, const std::string& prefix = "gen.") const {
    ck.meta["render"] = to_json(cfg_);
    ck.put_parameters(params_, prefix);
    put_bn(ck, prefix, enc_bn_);
    put_bn(ck, prefix, dec_bn_);
  }
  void load_state(const Checkpoint& ck, const std::string& prefix = "gen.") {
    ck.load_parameters(params_, prefix);
    load_bn(ck, prefix, enc_bn_);
    load_bn(ck, prefix, dec_bn_);
  }

 private:
  RenderConfig cfg_;
  nn::ParameterSet params_;
  std::vector<BnLayer> enc_bn_, dec_bn_;
};

// Patch discriminator over concat(posemap, image) -> logit map.
class PatchDiscriminator {
 public:
  explicit PatchDiscriminator(const RenderConfig& cfg) : slope_(cfg.leaky_slope) {
    Rng rng(mix_seed(cfg.init_seed, 0xD15C));
    std::size_t in = 4, ch = cfg.disc_channels;
    layers_ = std::min<std::size_t>(3, cfg.encoder_depth());
    for (std::size_t l = 0; l < layers_; ++l) {
      const std::size_t out = ch << l;
      const std::string n = "d" + std::to_string(l);
      params_.add(n + ".w", detail::conv_init(out, in, 5, rng));
      if (l == 0)
        params_.add(n + ".b", Tensor({out}));
      else
        bn_.push_back(BnLayer::create(params_, n + ".bn", out));
      in = out;
    }
    params_.add("dout.w", detail::conv_init(1, in, 5, rng));
    params_.add("dout.b", Tensor({1}));
  }

  nn::ParameterSet& parameters() { return params_; }

  Var operator()(const Var& posemap, const Var& image, bool training) {
    Var h = ad::concat_channels(posemap, image);
    for (std::size_t l = 0; l < layers_; ++l) {
      const std::string n = "d" + std::to_string(l);
      h = ad::conv2d(h, params_.get(n + ".w"), 2, 2);
      h = l == 0 ? ad::add_channel_bias(h, params_.get(n + ".b")) : bn_[l - 1](h, training);
      h = ad::leaky_relu(h, slope_);
    }
    return ad::add_channel_bias(ad::conv2d(h, params_.get("dout.w"), 1, 2), params_.get("dout.b"));
  }

  void save(Checkpoint& ck, const std::string& prefix = "disc.") const {
    ck.put_parameters(params_, prefix);
    put_bn(ck, prefix, bn_);
  }
  void load_state(const Checkpoint& ck, const std::string& prefix = "disc.") {
    ck.load_parameters(params_, prefix);
    load_bn(ck, prefix, bn_);
  }

 private:
  double slope_;
  std::size_t layers_ = 0;
  nn::ParameterSet params_;
  std::vector<BnLayer> bn_;
};

// --------------------------------------------------------- perceptual features

// Fixed-weight feature extractor with five blocks of two 3x3 conv+ReLU
// layers. Layers are named relu{block}_{1,2}; blocks after the first start
// with 2x2 average pooling (skipped once a side reaches 1).
class PerceptualExtractor {
 public:
  static std::vector<std::size_t> default_channels() { return {8, 16, 32, 32, 32}; }

  explicit PerceptualExtractor(std::uint64_t seed = 19,
                               std::vector<std::size_t> channels = default_channels())
      : channels_(std::move(channels)) {
    if (channels_.size() != 5) throw std::invalid_argument("extractor needs 5 block widths");
    Rng rng(mix_seed(seed, 0xFEA7));
    std::size_t in = 3;
    for (std::size_t b = 0; b < 5; ++b)
      for (int k = 1; k <= 2; ++k) {
        const std::string n = layer_name(b + 1, k);
        const std::size_t out = channels_[b];
        // He-style scale keeps activations from vanishing through ten layers.
        weights_[n] = nn::uniform_init({out, in, 3, 3}, std::sqrt(6.0 / static_cast<double>(in * 9)), rng);
        biases_[n] = nn::uniform_init({out}, 0.05, rng);
        in = out;
      }
  }

  static PerceptualExtractor from_checkpoint(const Checkpoint& ck) {
    auto ch = ck.meta.at("extractor_channels").get<std::vector<std::size_t>>();
    PerceptualExtractor ex(0, ch);
    for (auto& [n, w] : ex.weights_) {
      const Tensor& t = ck.get("extractor." + n + ".w");
      if (t.shape() != w.shape())
        throw CheckpointError("extractor layer " + n + " has shape " + shape_str(t.shape()));
      w = t;
      ex.biases_[n] = ck.get("extractor." + n + ".b");
    }
    return ex;
  }

  void save(Checkpoint& ck) const {
    ck.meta["extractor_channels"] = channels_;
    for (const auto& [n, w] : weights_) {
      ck.put("extractor." + n + ".w", w);
      ck.put("extractor." + n + ".b", biases_.at(n));
    }
  }

  static std::string layer_name(std::size_t block, int k) {
    return "relu" + std::to_string(block) + "_" + std::to_string(k);
  }

  static std::vector<std::string> all_layers() {
    std::vector<std::string> out;
    for (std::size_t b = 1; b <= 5; ++b)
      for (int k = 1; k <= 2; ++k) out.push_back(layer_name(b, k));
    return out;
  }

  // (C,H,W) of a layer's activation for an input of the given size.
  Shape feature_shape(const std::string& layer, std::size_t h, std::size_t w) const {
    const std::size_t block = parse_block(layer);
    for (std::size_t b = 2; b <= block; ++b)
      if (h >= 2 && w >= 2) {
        h /= 2;
        w /= 2;
      }
    return {channels_[block - 1], h, w};
  }

  // Activations (B,C,H,W) of the requested layers. Gradients flow to the
  // input only; the extractor weights are constants.
  std::map<std::string, Var> features(const Var& image, const std::set<std::string>& layers) const {
    if (image.value().rank() != 4 || image.dim(1) != 3)
      throw ShapeError("features: expected (B,3,H,W), got " + shape_str(image.shape()));
    std::size_t last = 0;
    for (const auto& l : layers) last = std::max(last, parse_block(l) * 2 + (l.back() == '2'));
    std::map<std::string, Var> out;
    Var h = image;
    for (std::size_t b = 1; b <= 5; ++b) {
      if (b > 1 && h.dim(2) >= 2 && h.dim(3) >= 2) h = ad::avg_pool2(h);
      for (int k = 1; k <= 2; ++k) {
        if (b * 2 + (k == 2) > last) return out;
        const std::string n = layer_name(b, k);
        h = ad::relu(ad::add_channel_bias(ad::conv2d(h, Var::constant(weights_.at(n)), 1, 1),
                                          Var::constant(biases_.at(n))));
        if (layers.count(n)) out.emplace(n, h);
      }
    }
    return out;
  }

  const std::vector<std::size_t>& channels() const { return channels_; }

 private:
  static std::size_t parse_block(const std::string& layer) {
    if (layer.size() != 7 || layer.rfind("relu", 0) != 0 || layer[5] != '_' || layer[4] < '1' ||
        layer[4] > '5' || (layer[6] != '1' && layer[6] != '2'))
      throw std::invalid_argument("unknown extractor layer '" + layer + "'");
    return static_cast<std::size_t>(layer[4] - '0');
  }

  std::vector<std::size_t> channels_;
  std::map<std::string, Tensor> weights_, biases_;
};

// --------------------------------------------------------------------- losses

struct RenderLossWeights {
  double alpha = 5.0;
  double beta = 0.1;
  double gamma = 1.0;
  std::vector<std::string> content_layers{"relu4_2"};
  std::vector<std::string> style_layers{"relu1_2", "relu2_2", "relu3_2", "relu4_2", "relu5_2"};
};

inline void validate(const RenderLossWeights& w) {
  if (!(w.alpha >= 0) || !(w.beta >= 0) || !(w.gamma >= 0))
    throw std::invalid_argument("loss weights must be >= 0");
}

struct TransferLoss {
  Var total;
  double mse = 0.0;
  double content = 0.0;
  double style = 0.0;
};

// Unweighted components as graph nodes, averaged over the batch.
struct TransferTerms {
  Var mse, content, style;
};

inline TransferTerms transfer_terms(const Var& gen, const Tensor& goal, const Tensor& reference,
                                    const RenderLossWeights& w, const PerceptualExtractor& ex) {
  gen.value().require_same(goal, "transfer_loss goal");
  gen.value().require_same(reference, "transfer_loss reference");
  const double inv_b = 1.0 / static_cast<double>(gen.dim(0));
  const Var goal_v = Var::constant(goal), ref_v = Var::constant(reference);
  Var mse = ad::scale(ad::squared_distance(gen, goal_v), inv_b);

  std::set<std::string> all(w.content_layers.begin(), w.content_layers.end());
  all.insert(w.style_layers.begin(), w.style_layers.end());
  const auto fg = ex.features(gen, all);
  const auto fgoal = ex.features(goal_v, {w.content_layers.begin(), w.content_layers.end()});
  const auto fref = ex.features(ref_v, {w.style_layers.begin(), w.style_layers.end()});

  std::vector<Var> c_terms, s_terms;
  for (const auto& l : w.content_layers)
    c_terms.push_back(ad::squared_distance(fg.at(l), Var::constant(fgoal.at(l).value())));
  for (const auto& l : w.style_layers)
    s_terms.push_back(ad::squared_distance(ad::gram(fg.at(l)),
                                           Var::constant(ad::gram(fref.at(l)).value())));
  Var content = c_terms.empty() ? Var::constant(Tensor::scalar(0)) : ad::scale(ad::add_all(c_terms), inv_b);
  Var style = s_terms.empty() ? Var::constant(Tensor::scalar(0)) : ad::scale(ad::add_all(s_terms), inv_b);
  return {mse, content, style};
}

// alpha*||gen-goal||^2 + beta*sum_l ||F_l(gen)-F_l(goal)||^2
//   + gamma*sum_l ||Gram_l(gen)-Gram_l(reference)||^2
// Images are (B,3,H,W) in [0,1].
inline TransferLoss transfer_loss(const Var& gen, const Tensor& goal, const Tensor& reference,
                                  const RenderLossWeights& w, const PerceptualExtractor& ex) {
  validate(w);
  const auto t = transfer_terms(gen, goal, reference, w, ex);
  TransferLoss out;
  out.mse = t.mse.item();
  out.content = t.content.item();
  out.style = t.style.item();
  out.total = ad::add_all({ad::scale(t.mse, w.alpha), ad::scale(t.content, w.beta),
                           ad::scale(t.style, w.gamma)});
  return out;
}

// --------------------------------------------------------------- GAN training

// One paired training example; tensors are (C,R,R) in [0,1].
struct RenderTriple {
  Tensor posemap;    // 1 channel
  Tensor reference;  // 3 channels
  Tensor goal;       // 3 channels
};

struct GanConfig {
  std::size_t iterations = 200;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double adv_weight = 1.0;
  std::uint64_t seed = 0;
  std::size_t calibration_triples = 32;
  bool calibrate_gamma = true;
  double collapse_threshold = 1e-4;
  std::size_t collapse_window = 100;
  RenderLossWeights weights;
};

inline nlohmann::json to_json(const GanConfig& c) {
  return {{"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"adv_weight", c.adv_weight},
          {"seed", c.seed},
          {"calibration_triples", c.calibration_triples},
          {"calibrate_gamma", c.calibrate_gamma},
          {"alpha", c.weights.alpha},
          {"beta", c.weights.beta},
          {"gamma", c.weights.gamma}};
}

inline GanConfig gan_config_from_json(const nlohmann::json& j, GanConfig c = {}) {
  if (j.contains("iterations")) c.iterations = j["iterations"].get<std::size_t>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("lr")) c.lr = j["lr"].get<double>();
  if (j.contains("adv_weight")) c.adv_weight = j["adv_weight"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("calibration_triples"))
    c.calibration_triples = j["calibration_triples"].get<std::size_t>();
  if (j.contains("calibrate_gamma")) c.calibrate_gamma = j["calibrate_gamma"].get<bool>();
  if (j.contains("alpha")) c.weights.alpha = j["alpha"].get<double>();
  if (j.contains("beta")) c.weights.beta = j["beta"].get<double>();
  if (j.contains("gamma")) c.weights.gamma = j["gamma"].get<double>();
  return c;
}

struct Batch {
  Tensor posemap, reference, goal;
};

inline Batch make_batch(const std::vector<RenderTriple>& data, const std::vector<std::size_t>& idx) {
  std::vector<const Tensor*> p, r, g;
  for (auto i : idx) {
    p.push_back(&data.at(i).posemap);
    r.push_back(&data.at(i).reference);
    g.push_back(&data.at(i).goal);
  }
  return {batch_of(p), batch_of(r), batch_of(g)};
}

// Sets gamma so the mean weighted style term matches the mean weighted
// content term over the first triples, using the generator's current output.
inline double calibrate_gamma(AdaRenderer& gen, const std::vector<RenderTriple>& data,
                              std::size_t count, const RenderLossWeights& w,
                              const PerceptualExtractor& ex) {
  double content = 0.0, style = 0.0;
  const std::size_t n = std::min(count, data.size());
  for (std::size_t i = 0; i < n; ++i) {
    Batch b = make_batch(data, {i});
    Var out = gen.forward(Var::constant(b.posemap), Var::constant(b.reference), false);
    auto t = transfer_terms(out, b.goal, b.reference, w, ex);
    content += t.content.item();
    style += t.style.item();
  }
  if (!(style > 0)) return w.gamma;
  return w.beta * content / style;
}

struct GanLog {
  std::size_t iteration;
  double g_loss;      // generator objective of the second G step
  double transfer;    // transfer loss of the second G step
  double d_loss;
};

class GanTrainer {
 public:
  GanTrainer(AdaRenderer& gen, PatchDiscriminator& disc, const PerceptualExtractor& ex, GanConfig cfg)
      : gen_(gen), disc_(disc), ex_(ex), cfg_(std::move(cfg)),
        g_opt_(gen.parameters().all(), {cfg_.lr, 0.5, 0.999, 1e-8}),
        d_opt_(disc.parameters().all(), {cfg_.lr, 0.5, 0.999, 1e-8}) {
    validate(cfg_.weights);
    if (cfg_.batch_size < 1) throw std::invalid_argument("gan: batch_size must be >= 1");
  }

  const GanConfig& config() const { return cfg_; }
  const std::vector<char>& schedule() const { return schedule_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  std::size_t iteration() const { return iteration_; }
  RenderLossWeights& weights() { return cfg_.weights; }

  void calibrate(const std::vector<RenderTriple>& data) {
    if (cfg_.calibrate_gamma)
      cfg_.weights.gamma = calibrate_gamma(gen_, data, cfg_.calibration_triples, cfg_.weights, ex_);
  }

  std::vector<std::size_t> batch_indices(std::size_t iteration, std::size_t sub, std::size_t n) const {
    Rng rng(mix_seed(cfg_.seed, 3 * iteration + sub));
    std::vector<std::size_t> idx(cfg_.batch_size);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n));
    return idx;
  }

  // Evaluation-mode transfer loss on a fixed batch (no parameter updates).
  double eval_transfer(const std::vector<RenderTriple>& data, const std::vector<std::size_t>& idx) {
    Batch b = make_batch(data, idx);
    Var out = gen_.forward(Var::constant(b.posemap), Var::constant(b.reference), false);
    return transfer_loss(out, b.goal, b.reference, cfg_.weights, ex_).total.item();
  }

  GanLog step(const std::vector<RenderTriple>& data) {
    if (data.empty()) throw std::invalid_argument("gan: empty training set");
    GanLog log{iteration_, 0, 0, 0};
    Batch last;
    for (std::size_t sub = 0; sub < 2; ++sub) {
      last = make_batch(data, batch_indices(iteration_, sub, data.size()));
      g_opt_.zero_grad();
      d_opt_.zero_grad();
      const Var pm = Var::constant(last.posemap);
      Var fake = gen_.forward(pm, Var::constant(last.reference), true);
      TransferLoss tl = transfer_loss(fake, last.goal, last.reference, cfg_.weights, ex_);
      Var g_loss = tl.total;
      if (cfg_.adv_weight > 0)
        g_loss = ad::add(g_loss, ad::scale(ad::bce_with_logits(disc_(pm, fake, true), 1.0),
                                           cfg_.adv_weight));
      if (!std::isfinite(g_loss.item()))
        throw std::runtime_error("non-finite generator loss at iteration " + std::to_string(iteration_));
      ad::backward(g_loss);
      g_opt_.step();
      schedule_.push_back('G');
      log.g_loss = g_loss.item();
      log.transfer = tl.total.item();
    }
    {
      last = make_batch(data, batch_indices(iteration_, 2, data.size()));
      g_opt_.zero_grad();
      d_opt_.zero_grad();
      const Var pm = Var::constant(last.posemap);
      Var fake = ad::stop_gradient(gen_.forward(pm, Var::constant(last.reference), true));
      Var real = Var::constant(last.goal);
      Var d_loss = ad::scale(ad::add(ad::bce_with_logits(disc_(pm, real, true), 1.0),
                                     ad::bce_with_logits(disc_(pm, fake, true), 0.0)),
                             0.5);
      ad::backward(d_loss);
      d_opt_.step();
      schedule_.push_back('D');
      log.d_loss = d_loss.item();
      if (log.d_loss < cfg_.collapse_threshold) {
        if (++collapse_run_ == cfg_.collapse_window)
          warnings_.push_back("discriminator loss below " + std::to_string(cfg_.collapse_threshold) +
                              " for " + std::to_string(cfg_.collapse_window) +
                              " consecutive iterations (ending at " + std::to_string(iteration_) + ")");
      } else {
        collapse_run_ = 0;
      }
    }
    ++iteration_;
    return log;
  }

  std::vector<GanLog> run(const std::vector<RenderTriple>& data,
                          const std::function<void(const GanLog&)>& on_step = {}) {
    std::vector<GanLog> logs;
    while (iteration_ < cfg_.iterations) {
      logs.push_back(step(data));
      if (on_step) on_step(logs.back());
    }
    return logs;
  }

  void save(Checkpoint& ck) {
    gen_.save(ck);
    disc_.save(ck);
    ck.meta["gan"] = to_json(cfg_);
    ck.meta["iteration"] = iteration_;
    ck.put_optimizer(g_opt_, "adam_g");
    ck.put_optimizer(d_opt_, "adam_d");
  }

 private:
  AdaRenderer& gen_;
  PatchDiscriminator& disc_;
  const PerceptualExtractor& ex_;
  GanConfig cfg_;
  nn::Adam g_opt_, d_opt_;
  std::vector<char> schedule_;
  std::vector<std::string> warnings_;
  std::size_t iteration_ = 0;
  std::size_t collapse_run_ = 0;
};

}  // namespace vidcast::render
