#include "seqseg/recurrent.hpp"

#include <cmath>
#include <random>

#include "seqseg/errors.hpp"

namespace seqseg {

// ---- config --------------------------------------------------------------------

void RnnConfig::validate() const {
  if (layers < 1) throw ConfigError("rnn: layers must be >= 1");
  if (unroll < 1) throw ConfigError("rnn: unroll must be >= 1");
  if (hidden < 1) throw ConfigError("rnn: hidden must be >= 1");
  if (kernel_h < 1 || kernel_w < 1 || kernel_h % 2 == 0 || kernel_w % 2 == 0)
    throw ConfigError("rnn: filter sizes must be odd");
  if (input_channels < 1 || output_channels < 1)
    throw ConfigError("rnn: channel counts must be >= 1");
  if (cell == CellKind::convlstm && peephole == PeepholeMode::per_element &&
      (state_h < 1 || state_w < 1))
    throw ConfigError("rnn: per-element peepholes need state_h/state_w");
}

RnnConfig RnnConfig::desk(CellKind cell, int num_classes) {
  RnnConfig c;
  c.cell = cell;
  c.input_channels = num_classes;
  c.output_channels = num_classes;
  return c;
}

RnnConfig RnnConfig::full_scale(CellKind cell, int num_classes) {
  RnnConfig c = desk(cell, num_classes);
  c.kernel_h = 5;
  c.kernel_w = 5;
  c.hidden = 15;
  return c;
}

std::string to_string(CellKind kind) {
  return kind == CellKind::simple ? "simple" : "convlstm";
}

CellKind parse_cell_kind(const std::string& s) {
  if (s == "simple") return CellKind::simple;
  if (s == "convlstm") return CellKind::convlstm;
  throw ConfigError("unknown cell kind '" + s + "' (expected simple|convlstm)");
}

// ---- parameters ----------------------------------------------------------------

namespace {

void fill_normal(Tensor4& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
}

double fan_in_std(const KernelBank& k, double gain) {
  return std::sqrt(gain / (static_cast<double>(k.in_channels()) *
                           k.kernel_h() * k.kernel_w()));
}

Tensor4 peephole_tensor(const RnnConfig& c) {
  if (c.peephole == PeepholeMode::per_element)
    return Tensor4(Shape4{1, c.hidden, c.state_h, c.state_w});
  return Tensor4(Shape4{1, c.hidden, 1, 1});
}

inline double peep(const Tensor4& p, int c, std::size_t pixel) {
  return p.h() == 1 && p.w() == 1 ? p.data()[c] : p.plane(0, c)[pixel];
}

inline double& peep_grad(Tensor4& p, int c, std::size_t pixel) {
  return p.h() == 1 && p.w() == 1 ? p.data()[c] : p.plane(0, c)[pixel];
}

}  // namespace

HeadParams build_head(const RnnConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  HeadParams p;
  p.config = config;
  const int H = config.hidden;
  for (int l = 0; l < config.layers; ++l) {
    const int in_c = l == 0 ? config.input_channels : H;
    if (config.cell == CellKind::convlstm) {
      ConvLstmLayer layer;
      layer.input_kernel =
          KernelBank(4 * H, in_c, config.kernel_h, config.kernel_w, true);
      layer.recurrent_kernel =
          KernelBank(4 * H, H, config.kernel_h, config.kernel_w, false);
      fill_normal(layer.input_kernel.weights,
                  fan_in_std(layer.input_kernel, 1.0), rng);
      fill_normal(layer.recurrent_kernel.weights,
                  fan_in_std(layer.recurrent_kernel, 1.0), rng);
      for (int c = 0; c < H; ++c) layer.input_kernel.bias[H + c] = config.forget_bias;
      layer.peep_i = peephole_tensor(config);
      layer.peep_f = peephole_tensor(config);
      layer.peep_o = peephole_tensor(config);
      p.lstm.push_back(std::move(layer));
    } else {
      SimpleRnnLayer layer;
      layer.input_kernel = KernelBank(H, in_c, config.kernel_h, config.kernel_w, true);
      layer.recurrent_kernel =
          KernelBank(H, H, config.kernel_h, config.kernel_w, false);
      fill_normal(layer.input_kernel.weights,
                  fan_in_std(layer.input_kernel, 2.0), rng);
      fill_normal(layer.recurrent_kernel.weights,
                  fan_in_std(layer.recurrent_kernel, 0.5), rng);
      p.simple.push_back(std::move(layer));
    }
  }
  p.readout = KernelBank(config.output_channels, H, 1, 1, true);
  fill_normal(p.readout.weights, fan_in_std(p.readout, 1.0), rng);
  return p;
}

std::vector<ParamView> HeadParams::views() {
  std::vector<ParamView> out;
  for (std::size_t l = 0; l < lstm.size(); ++l) {
    const std::string prefix = "rnn.layer" + std::to_string(l);
    append_views(out, prefix + ".input", lstm[l].input_kernel);
    append_views(out, prefix + ".recurrent", lstm[l].recurrent_kernel);
    append_view(out, prefix + ".peep_i", lstm[l].peep_i);
    append_view(out, prefix + ".peep_f", lstm[l].peep_f);
    append_view(out, prefix + ".peep_o", lstm[l].peep_o);
  }
  for (std::size_t l = 0; l < simple.size(); ++l) {
    const std::string prefix = "rnn.layer" + std::to_string(l);
    append_views(out, prefix + ".input", simple[l].input_kernel);
    append_views(out, prefix + ".recurrent", simple[l].recurrent_kernel);
  }
  append_views(out, "rnn.readout", readout);
  return out;
}

HeadParams HeadParams::zeros_like() const {
  HeadParams z = *this;
  for (auto& v : z.views()) std::fill(v.values.begin(), v.values.end(), 0.0);
  return z;
}

// ---- simple cell ---------------------------------------------------------------

Tensor4 simple_rnn_step(const SimpleRnnLayer& layer, const Tensor4& x,
                        const Tensor4& prev_o, SimpleStepCache* cache) {
  Tensor4 pre = conv2d(x, layer.input_kernel);
  const Tensor4 rec = conv2d(prev_o, layer.recurrent_kernel);
  SEQSEG_REQUIRE(pre.shape() == rec.shape(),
                 "simple_rnn_step: input and state dims differ");
  pre += rec;
  Tensor4 out = pointwise(pre, Activation::relu);
  if (cache) {
    cache->x = x;
    cache->prev_o = prev_o;
    cache->pre = std::move(pre);
    cache->out = out;
  }
  return out;
}

SimpleStepGrads simple_rnn_step_backward(const SimpleRnnLayer& layer,
                                         const SimpleStepCache& cache,
                                         const Tensor4& d_out,
                                         SimpleRnnLayer& grads) {
  const Tensor4 d_pre =
      pointwise_backward(cache.pre, cache.out, d_out, Activation::relu);
  SimpleStepGrads g;
  g.d_x = conv2d_backward(cache.x, layer.input_kernel, d_pre, grads.input_kernel);
  g.d_prev_o = conv2d_backward(cache.prev_o, layer.recurrent_kernel, d_pre,
                               grads.recurrent_kernel);
  return g;
}

// ---- ConvLSTM cell ---------------------------------------------------------------

CellState convlstm_step(const ConvLstmLayer& layer, const Tensor4& x,
                        const CellState& prev, OutputGatePeek peek,
                        LstmStepCache* cache) {
  const int H = layer.recurrent_kernel.in_channels();
  SEQSEG_REQUIRE(prev.s.shape() == prev.o.shape() && prev.s.c() == H,
                 "convlstm_step: state does not match layer width");
  SEQSEG_REQUIRE(x.n() == prev.s.n() && x.h() == prev.s.h() && x.w() == prev.s.w(),
                 "convlstm_step: input " + x.shape().str() + " vs state " +
                     prev.s.shape().str());
  const Tensor4 xa = conv2d(x, layer.input_kernel);
  const Tensor4 oa = conv2d(prev.o, layer.recurrent_kernel);

  const Shape4 hs = prev.s.shape();
  Tensor4 gi(hs), gf(hs), gg(hs), go(hs), s(hs), ts(hs), o(hs);
  const std::size_t plane = hs.plane();
  for (int n = 0; n < hs.n; ++n) {
    for (int c = 0; c < H; ++c) {
      const double* xi = xa.plane(n, c);
      const double* xf = xa.plane(n, H + c);
      const double* xg = xa.plane(n, 2 * H + c);
      const double* xo = xa.plane(n, 3 * H + c);
      const double* ri = oa.plane(n, c);
      const double* rf = oa.plane(n, H + c);
      const double* rg = oa.plane(n, 2 * H + c);
      const double* ro = oa.plane(n, 3 * H + c);
      const double* sp = prev.s.plane(n, c);
      for (std::size_t p = 0; p < plane; ++p) {
        const double i = sigmoid(xi[p] + ri[p] + peep(layer.peep_i, c, p) * sp[p]);
        const double f = sigmoid(xf[p] + rf[p] + peep(layer.peep_f, c, p) * sp[p]);
        const double g = std::tanh(xg[p] + rg[p]);
        const double sn = f * sp[p] + i * g;
        const double peek_s = peek == OutputGatePeek::new_state ? sn : sp[p];
        const double og = sigmoid(xo[p] + ro[p] + peep(layer.peep_o, c, p) * peek_s);
        const double t = std::tanh(sn);
        gi.plane(n, c)[p] = i;
        gf.plane(n, c)[p] = f;
        gg.plane(n, c)[p] = g;
        go.plane(n, c)[p] = og;
        s.plane(n, c)[p] = sn;
        ts.plane(n, c)[p] = t;
        o.plane(n, c)[p] = og * t;
      }
    }
  }
  if (cache) {
    cache->x = x;
    cache->prev = prev;
    cache->i = std::move(gi);
    cache->f = std::move(gf);
    cache->g = std::move(gg);
    cache->og = std::move(go);
    cache->s = s;
    cache->tanh_s = std::move(ts);
  }
  return {std::move(s), std::move(o)};
}

LstmStepGrads convlstm_step_backward(const ConvLstmLayer& layer,
                                     const LstmStepCache& cache,
                                     const CellState& d_next,
                                     OutputGatePeek peek, ConvLstmLayer& grads) {
  const int H = layer.recurrent_kernel.in_channels();
  const Shape4 hs = cache.s.shape();
  SEQSEG_REQUIRE(d_next.s.shape() == hs && d_next.o.shape() == hs,
                 "convlstm_step_backward: gradient shape mismatch");
  Tensor4 d_gates(Shape4{hs.n, 4 * H, hs.h, hs.w});
  LstmStepGrads out;
  out.d_prev.s = Tensor4(hs);
  const std::size_t plane = hs.plane();
  for (int n = 0; n < hs.n; ++n) {
    for (int c = 0; c < H; ++c) {
      const double* i = cache.i.plane(n, c);
      const double* f = cache.f.plane(n, c);
      const double* g = cache.g.plane(n, c);
      const double* og = cache.og.plane(n, c);
      const double* s = cache.s.plane(n, c);
      const double* ts = cache.tanh_s.plane(n, c);
      const double* sp = cache.prev.s.plane(n, c);
      const double* ds_in = d_next.s.plane(n, c);
      const double* do_in = d_next.o.plane(n, c);
      double* dai = d_gates.plane(n, c);
      double* daf = d_gates.plane(n, H + c);
      double* dag = d_gates.plane(n, 2 * H + c);
      double* dao = d_gates.plane(n, 3 * H + c);
      double* dsp = out.d_prev.s.plane(n, c);
      for (std::size_t p = 0; p < plane; ++p) {
        const double pi = peep(layer.peep_i, c, p);
        const double pf = peep(layer.peep_f, c, p);
        const double po = peep(layer.peep_o, c, p);
        const double d_og = do_in[p] * ts[p];
        const double a_o = d_og * og[p] * (1.0 - og[p]);
        double ds = ds_in[p] + do_in[p] * og[p] * (1.0 - ts[p] * ts[p]);
        double d_sp_extra = 0.0;
        if (peek == OutputGatePeek::new_state) {
          ds += a_o * po;
          peep_grad(grads.peep_o, c, p) += a_o * s[p];
        } else {
          d_sp_extra = a_o * po;
          peep_grad(grads.peep_o, c, p) += a_o * sp[p];
        }
        const double a_f = ds * sp[p] * f[p] * (1.0 - f[p]);
        const double a_i = ds * g[p] * i[p] * (1.0 - i[p]);
        const double a_g = ds * i[p] * (1.0 - g[p] * g[p]);
        peep_grad(grads.peep_i, c, p) += a_i * sp[p];
        peep_grad(grads.peep_f, c, p) += a_f * sp[p];
        dsp[p] = ds * f[p] + a_f * pf + a_i * pi + d_sp_extra;
        dai[p] = a_i;
        daf[p] = a_f;
        dag[p] = a_g;
        dao[p] = a_o;
      }
    }
  }
  out.d_x = conv2d_backward(cache.x, layer.input_kernel, d_gates,
                            grads.input_kernel);
  out.d_prev.o = conv2d_backward(cache.prev.o, layer.recurrent_kernel, d_gates,
                                 grads.recurrent_kernel);
  return out;
}

// ---- head ------------------------------------------------------------------------

HeadState init_state(const RnnConfig& config, int h, int w) {
  HeadState state;
  for (int l = 0; l < config.layers; ++l) {
    const Shape4 s{1, config.hidden, h, w};
    state.push_back({Tensor4(s), Tensor4(s)});
  }
  return state;
}

void check_state(const RnnConfig& config, const HeadState& state, int h, int w) {
  SEQSEG_REQUIRE(static_cast<int>(state.size()) == config.layers,
                 "head state has " + std::to_string(state.size()) +
                     " layers, config expects " + std::to_string(config.layers));
  const Shape4 expect{1, config.hidden, h, w};
  for (const auto& cs : state) {
    SEQSEG_REQUIRE(cs.s.shape() == expect && cs.o.shape() == expect,
                   "head state dims " + cs.o.shape().str() +
                       " do not match expected " + expect.str());
  }
}

Tensor4 head_step(const HeadParams& params, const Tensor4& low_logits,
                  HeadState& state, HeadFrameCache* cache) {
  const RnnConfig& cfg = params.config;
  SEQSEG_REQUIRE(low_logits.c() == cfg.input_channels,
                 "head_step: expected " + std::to_string(cfg.input_channels) +
                     " input channels, got " + std::to_string(low_logits.c()));
  check_state(cfg, state, low_logits.h(), low_logits.w());
  if (cache) {
    cache->simple.assign(cfg.cell == CellKind::simple ? cfg.layers : 0, {});
    cache->lstm.assign(cfg.cell == CellKind::convlstm ? cfg.layers : 0, {});
  }
  const Tensor4* x = &low_logits;
  for (int l = 0; l < cfg.layers; ++l) {
    if (cfg.cell == CellKind::convlstm) {
      state[l] = convlstm_step(params.lstm[l], *x, state[l], cfg.output_peek,
                               cache ? &cache->lstm[l] : nullptr);
    } else {
      state[l].o = simple_rnn_step(params.simple[l], *x, state[l].o,
                                   cache ? &cache->simple[l] : nullptr);
    }
    x = &state[l].o;
  }
  if (cache) cache->top = *x;
  return conv2d(*x, params.readout);
}

HeadRun head_forward(const HeadParams& params,
                     std::span<const Tensor4> low_logits_sequence,
                     HeadState state) {
  HeadRun run;
  for (const auto& frame : low_logits_sequence)
    run.outputs.push_back(head_step(params, frame, state));
  run.final_state = std::move(state);
  return run;
}

void head_step_backward(const HeadParams& params, const HeadFrameCache& cache,
                        const Tensor4& d_out, HeadState& d_state,
                        HeadParams& grads, Tensor4* d_input) {
  const RnnConfig& cfg = params.config;
  Tensor4 d_above =
      conv2d_backward(cache.top, params.readout, d_out, grads.readout);
  for (int l = cfg.layers - 1; l >= 0; --l) {
    CellState& ds = d_state[l];
    if (cfg.cell == CellKind::convlstm) {
      CellState d_next{ds.s, ds.o + d_above};
      LstmStepGrads g = convlstm_step_backward(
          params.lstm[l], cache.lstm[l], d_next, cfg.output_peek, grads.lstm[l]);
      ds = std::move(g.d_prev);
      d_above = std::move(g.d_x);
    } else {
      SimpleStepGrads g = simple_rnn_step_backward(
          params.simple[l], cache.simple[l], ds.o + d_above, grads.simple[l]);
      ds.o = std::move(g.d_prev_o);
      d_above = std::move(g.d_x);
    }
  }
  if (d_input) *d_input = std::move(d_above);
}

BpttResult bptt_step(const HeadParams& params,
                     std::span<const Tensor4> window, const HeadState& carried,
                     const FrameLossFn& loss) {
  if (window.empty()) throw ContractViolation("bptt_step: empty window");
  SEQSEG_REQUIRE(static_cast<int>(window.size()) <= params.config.unroll,
                 "bptt_step: window of " + std::to_string(window.size()) +
                     " frames exceeds unroll " +
                     std::to_string(params.config.unroll));
  BpttResult r;
  r.grads = params.zeros_like();
  HeadState state = carried;
  std::vector<HeadFrameCache> caches(window.size());
  std::vector<Tensor4> d_outs(window.size());
  for (std::size_t t = 0; t < window.size(); ++t) {
    Tensor4 out = head_step(params, window[t], state, &caches[t]);
    d_outs[t] = Tensor4::zeros_like(out);
    r.loss += loss(t, out, d_outs[t]);
    r.outputs.push_back(std::move(out));
  }
  HeadState d_state;
  for (const auto& cs : carried)
    d_state.push_back({Tensor4::zeros_like(cs.s), Tensor4::zeros_like(cs.o)});
  for (std::size_t t = window.size(); t-- > 0;)
    head_step_backward(params, caches[t], d_outs[t], d_state, r.grads);
  r.carried = std::move(state);
  r.d_initial = std::move(d_state);
  return r;
}

}  // namespace seqseg
