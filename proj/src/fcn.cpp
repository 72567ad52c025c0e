#include "seqseg/fcn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "seqseg/errors.hpp"

namespace seqseg {

// ---- config ------------------------------------------------------------------

void FcnConfig::validate() const {
  if (num_classes < 1) throw ConfigError("fcn: num_classes must be >= 1");
  if (in_channels < 1) throw ConfigError("fcn: in_channels must be >= 1");
  if (stem_channels < 1) throw ConfigError("fcn: stem_channels must be >= 1");
  if (stem_kernel < 1 || stem_kernel % 2 == 0)
    throw ConfigError("fcn: stem_kernel must be odd");
  if (stages.size() < 2) throw ConfigError("fcn: need at least 2 stages");
  for (const auto& s : stages) {
    if (s.blocks < 0 || s.channels < 1)
      throw ConfigError("fcn: stage needs blocks >= 0 and channels >= 1");
  }
  if (skip_taps.empty()) throw ConfigError("fcn: need at least one skip tap");
  for (std::size_t i = 0; i < skip_taps.size(); ++i) {
    const int t = skip_taps[i];
    if (t < 0 || t >= static_cast<int>(stages.size()) - 1)
      throw ConfigError("fcn: skip tap " + std::to_string(t) +
                        " must name a stage before the last");
    if (i > 0 && t <= skip_taps[i - 1])
      throw ConfigError("fcn: skip taps must be distinct and increasing");
  }
  if (input_h < 1 || input_w < 1) throw ConfigError("fcn: bad input size");
  const int ds = downsampling();
  if (input_h % ds != 0 || input_w % ds != 0)
    throw ConfigError("fcn: input " + std::to_string(input_h) + "x" +
                      std::to_string(input_w) + " not divisible by " +
                      std::to_string(ds));
  // Every merge step must be a supported upsampling factor.
  auto check_factor = [](int f) {
    if (f != 2 && f != 4 && f != 8)
      throw ConfigError("fcn: merge needs upsampling factor 2, 4 or 8, got " +
                        std::to_string(f));
  };
  int prev = static_cast<int>(stages.size()) - 1;
  for (auto it = skip_taps.rbegin(); it != skip_taps.rend(); ++it) {
    check_factor(1 << (prev - *it));
    prev = *it;
  }
  check_factor(2 << prev);
}

int FcnConfig::downsampling() const {
  return 2 << (static_cast<int>(stages.size()) - 1);
}

FcnConfig FcnConfig::desk() { return FcnConfig{}; }

FcnConfig FcnConfig::fcn45() {
  FcnConfig c;
  c.num_classes = 5;
  c.stem_channels = 64;
  c.stages = {{4, 64}, {6, 128}, {6, 128}, {6, 128}};
  c.skip_taps = {1, 2};
  c.input_h = 240;
  c.input_w = 320;
  return c;
}

// ---- parameters ----------------------------------------------------------------

namespace {

KernelBank he_kernel(int out_c, int in_c, int k, double gain,
                     std::mt19937_64& rng, bool with_bias = true) {
  KernelBank bank(out_c, in_c, k, k, with_bias);
  const double fan_in = static_cast<double>(in_c) * k * k;
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
  for (double& w : bank.weights.values()) w = dist(rng);
  return bank;
}

// BN's shift makes a conv bias redundant, so these convs carry none.
ConvBn make_conv_bn(int out_c, int in_c, int k, std::mt19937_64& rng) {
  return {he_kernel(out_c, in_c, k, 2.0, rng, false), BatchNormParams(out_c)};
}

void append_conv_bn(std::vector<ParamView>& out, const std::string& prefix,
                    ConvBn& layer) {
  append_views(out, prefix + ".conv", layer.conv);
  append_view(out, prefix + ".bn.gamma", layer.bn.gamma);
  append_view(out, prefix + ".bn.beta", layer.bn.beta);
  append_view(out, prefix + ".bn.mean", layer.bn.running_mean, false);
  append_view(out, prefix + ".bn.var", layer.bn.running_var, false);
}

}  // namespace

FcnParams build_fcn(const FcnConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  FcnParams p;
  p.config = config;
  p.stem = make_conv_bn(config.stem_channels, config.in_channels,
                        config.stem_kernel, rng);
  int channels = config.stem_channels;
  for (const auto& spec : config.stages) {
    FcnStage stage;
    if (spec.channels != channels)
      stage.transition = make_conv_bn(spec.channels, channels, 3, rng);
    channels = spec.channels;
    for (int b = 0; b < spec.blocks; ++b) {
      stage.blocks.push_back({make_conv_bn(channels, channels, 3, rng),
                              make_conv_bn(channels, channels, 3, rng)});
    }
    p.stages.push_back(std::move(stage));
  }
  p.low_head = he_kernel(config.num_classes, channels, 1, 1.0, rng);
  for (int tap : config.skip_taps) {
    p.skip_heads.push_back(
        he_kernel(config.num_classes, config.stages[tap].channels, 1, 1.0, rng));
  }
  return p;
}

std::vector<ParamView> FcnParams::views() {
  std::vector<ParamView> out;
  append_conv_bn(out, "fcn.stem", stem);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string prefix = "fcn.stage" + std::to_string(s);
    if (stages[s].transition)
      append_conv_bn(out, prefix + ".transition", *stages[s].transition);
    for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
      const std::string bp = prefix + ".block" + std::to_string(b);
      append_conv_bn(out, bp + ".first", stages[s].blocks[b].first);
      append_conv_bn(out, bp + ".second", stages[s].blocks[b].second);
    }
  }
  append_views(out, "fcn.head.low", low_head);
  for (std::size_t i = 0; i < skip_heads.size(); ++i)
    append_views(out, "fcn.head.skip" + std::to_string(i), skip_heads[i]);
  return out;
}

FcnParams FcnParams::zeros_like() const {
  FcnParams z = *this;
  for (auto& v : z.views()) std::fill(v.values.begin(), v.values.end(), 0.0);
  return z;
}

std::size_t FcnParams::trainable_count() {
  std::size_t n = 0;
  for (const auto& v : views())
    if (v.trainable) n += v.values.size();
  return n;
}

// ---- forward -----------------------------------------------------------------

namespace {

using LayerCache = FcnTape::LayerCache;

Tensor4 conv_bn_relu(const ConvBn& layer, const Tensor4& x, int stride,
                     Phase phase, LayerCache* cache) {
  const Tensor4 conv = conv2d(x, layer.conv, stride);
  BatchNormCache bn_cache;
  Tensor4 pre = batchnorm(conv, layer.bn, phase, &bn_cache);
  Tensor4 out = pointwise(pre, Activation::relu);
  if (cache) {
    cache->input = x;
    cache->bn = std::move(bn_cache);
    cache->pre_relu = std::move(pre);
    cache->output = out;
  }
  return out;
}

Tensor4 residual_block(const ResidualBlock& block, const Tensor4& x,
                       Phase phase, FcnTape::BlockCache* cache) {
  const Tensor4 y =
      conv_bn_relu(block.first, x, 1, phase, cache ? &cache->first : nullptr);
  const Tensor4 conv = conv2d(y, block.second.conv, 1);
  BatchNormCache bn_cache;
  Tensor4 pre = batchnorm(conv, block.second.bn, phase, &bn_cache);
  pre += x;
  Tensor4 out = pointwise(pre, Activation::relu);
  if (cache) {
    cache->second.input = y;
    cache->second.bn = std::move(bn_cache);
    cache->second.pre_relu = std::move(pre);
    cache->second.output = out;
  }
  return out;
}

Tensor4 conv_bn_relu_backward(const ConvBn& layer, const LayerCache& cache,
                              const Tensor4& d_out, ConvBn& grads, int stride,
                              bool need_input_grad, Tensor4* d_shortcut) {
  const Tensor4 d_pre = pointwise_backward(cache.pre_relu, cache.output, d_out,
                                           Activation::relu);
  if (d_shortcut) *d_shortcut = d_pre;
  const Tensor4 d_conv = batchnorm_backward(layer.bn, cache.bn, d_pre, grads.bn);
  return conv2d_backward(cache.input, layer.conv, d_conv, grads.conv, stride,
                         Padding::same, need_input_grad);
}

}  // namespace

LogitsBundle fcn_forward(const FcnParams& params, const Tensor4& image,
                         Phase phase, FcnTape* tape) {
  const FcnConfig& cfg = params.config;
  SEQSEG_REQUIRE(image.c() == cfg.in_channels && image.h() == cfg.input_h &&
                     image.w() == cfg.input_w,
                 "fcn_forward: image " + image.shape().str() +
                     " does not match config " +
                     std::to_string(cfg.in_channels) + "x" +
                     std::to_string(cfg.input_h) + "x" +
                     std::to_string(cfg.input_w));
  if (tape) {
    tape->image = image;
    tape->stages.assign(params.stages.size(), {});
  }
  Tensor4 x = conv_bn_relu(params.stem, image, 2, phase,
                           tape ? &tape->stem : nullptr);
  std::vector<Tensor4> stage_out;
  stage_out.reserve(params.stages.size());
  for (std::size_t s = 0; s < params.stages.size(); ++s) {
    FcnTape::StageCache* sc = tape ? &tape->stages[s] : nullptr;
    if (s > 0) {
      PoolResult pool = maxpool2(x);
      x = pool.out;
      if (sc) sc->pool = std::move(pool);
    }
    const FcnStage& stage = params.stages[s];
    if (stage.transition) {
      if (sc) sc->transition.emplace();
      x = conv_bn_relu(*stage.transition, x, 1, phase,
                       sc ? &*sc->transition : nullptr);
    }
    if (sc) sc->blocks.resize(stage.blocks.size());
    for (std::size_t b = 0; b < stage.blocks.size(); ++b)
      x = residual_block(stage.blocks[b], x, phase, sc ? &sc->blocks[b] : nullptr);
    if (sc) sc->output = x;
    stage_out.push_back(x);
  }

  LogitsBundle bundle;
  bundle.logits_low = conv2d(stage_out.back(), params.low_head);
  for (std::size_t i = 0; i < cfg.skip_taps.size(); ++i)
    bundle.skip_logits.push_back(
        conv2d(stage_out[cfg.skip_taps[i]], params.skip_heads[i]));
  bundle.logits_full = merge_logits(bundle.logits_low, bundle.skip_logits,
                                    cfg.input_h, cfg.input_w);
  return bundle;
}

// ---- merge -------------------------------------------------------------------

namespace {

int ratio(int big, int small) {
  SEQSEG_REQUIRE(small > 0 && big % small == 0,
                 "merge: resolutions are not integer multiples");
  return big / small;
}

}  // namespace

Tensor4 merge_logits(const Tensor4& low, const std::vector<Tensor4>& skips,
                     int full_h, int full_w) {
  Tensor4 m = low;
  for (auto it = skips.rbegin(); it != skips.rend(); ++it) {
    SEQSEG_REQUIRE(it->c() == m.c() && it->n() == m.n(),
                   "merge: skip logits channel/batch mismatch");
    const int f = ratio(it->h(), m.h());
    SEQSEG_REQUIRE(ratio(it->w(), m.w()) == f, "merge: anisotropic factor");
    m = bilinear_upsample(m, f);
    m += *it;
  }
  const int f = ratio(full_h, m.h());
  SEQSEG_REQUIRE(ratio(full_w, m.w()) == f, "merge: anisotropic factor");
  return bilinear_upsample(m, f);
}

MergeGrads merge_logits_backward(const Tensor4& d_full, const Shape4& low_shape,
                                 const std::vector<Shape4>& skip_shapes) {
  // Running-map shapes after each merge step, lowest first.
  std::vector<Shape4> running{low_shape};
  for (auto it = skip_shapes.rbegin(); it != skip_shapes.rend(); ++it)
    running.push_back(*it);

  MergeGrads g;
  g.d_skips.resize(skip_shapes.size());
  Tensor4 d = bilinear_upsample_backward(
      d_full, ratio(d_full.h(), running.back().h), running.back());
  // Skip 0 (highest resolution) was added last, so it is unwound first.
  for (std::size_t k = 0; k < skip_shapes.size(); ++k) {
    g.d_skips[k] = d;
    const Shape4& below = running[skip_shapes.size() - k - 1];
    d = bilinear_upsample_backward(d, ratio(skip_shapes[k].h, below.h), below);
  }
  g.d_low = std::move(d);
  return g;
}

LogitsBundle replace_low_logits(const LogitsBundle& bundle,
                                const Tensor4& new_low) {
  SEQSEG_REQUIRE(new_low.shape() == bundle.logits_low.shape(),
                 "replace_low_logits: expected " +
                     bundle.logits_low.shape().str() + ", got " +
                     new_low.shape().str());
  LogitsBundle out;
  out.logits_low = new_low;
  out.skip_logits = bundle.skip_logits;
  out.logits_full = merge_logits(new_low, bundle.skip_logits,
                                 bundle.logits_full.h(), bundle.logits_full.w());
  return out;
}

// ---- backward ----------------------------------------------------------------

Tensor4 fcn_backward(const FcnParams& params, const FcnTape& tape,
                     const MergeGrads& d_heads, FcnParams& grads,
                     bool need_input_grad) {
  const FcnConfig& cfg = params.config;
  SEQSEG_REQUIRE(tape.stages.size() == params.stages.size(),
                 "fcn_backward: tape does not match params");
  std::vector<Tensor4> d_stage(params.stages.size());
  d_stage.back() = conv2d_backward(tape.stages.back().output, params.low_head,
                                   d_heads.d_low, grads.low_head);
  for (std::size_t i = 0; i < cfg.skip_taps.size(); ++i) {
    const int tap = cfg.skip_taps[i];
    Tensor4 d = conv2d_backward(tape.stages[tap].output, params.skip_heads[i],
                                d_heads.d_skips[i], grads.skip_heads[i]);
    if (d_stage[tap].empty())
      d_stage[tap] = std::move(d);
    else
      d_stage[tap] += d;
  }

  Tensor4 d_x;
  for (std::size_t s = params.stages.size(); s-- > 0;) {
    const FcnStage& stage = params.stages[s];
    const FcnTape::StageCache& sc = tape.stages[s];
    FcnStage& gstage = grads.stages[s];
    if (d_x.empty()) {
      d_x = std::move(d_stage[s]);
    } else if (!d_stage[s].empty()) {
      d_x += d_stage[s];
    }
    for (std::size_t b = stage.blocks.size(); b-- > 0;) {
      const auto& block = stage.blocks[b];
      const auto& bc = sc.blocks[b];
      Tensor4 d_shortcut;
      const Tensor4 d_y =
          conv_bn_relu_backward(block.second, bc.second, d_x,
                                gstage.blocks[b].second, 1, true, &d_shortcut);
      d_x = conv_bn_relu_backward(block.first, bc.first, d_y,
                                  gstage.blocks[b].first, 1, true, nullptr);
      d_x += d_shortcut;
    }
    if (stage.transition) {
      d_x = conv_bn_relu_backward(*stage.transition, *sc.transition, d_x,
                                  *gstage.transition, 1, true, nullptr);
    }
    if (sc.pool) d_x = maxpool2_backward(*sc.pool, d_x);
  }
  return conv_bn_relu_backward(params.stem, tape.stem, d_x, grads.stem, 2,
                               need_input_grad, nullptr);
}

void apply_running_stats(FcnParams& params, const FcnTape& tape) {
  update_running_stats(params.stem.bn, tape.stem.bn);
  for (std::size_t s = 0; s < params.stages.size(); ++s) {
    auto& stage = params.stages[s];
    const auto& sc = tape.stages[s];
    if (stage.transition) update_running_stats(stage.transition->bn, sc.transition->bn);
    for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
      update_running_stats(stage.blocks[b].first.bn, sc.blocks[b].first.bn);
      update_running_stats(stage.blocks[b].second.bn, sc.blocks[b].second.bn);
    }
  }
}

}  // namespace seqseg
