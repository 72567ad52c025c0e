#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "seqseg/recurrent.hpp"
#include "test_util.hpp"

namespace seqseg::testing {

/// Plain nested-loop ConvLSTM step written straight from the unit equations:
/// same-padded convolutions, per-channel or per-element peepholes, output gate
/// reading either the new or the previous cell state.
inline CellState scalar_convlstm_step(const ConvLstmLayer& L, const Tensor4& x,
                                      const CellState& prev, OutputGatePeek peek) {
  const int H = L.recurrent_kernel.in_channels();
  const int h = x.h(), w = x.w();
  const int kh = L.input_kernel.kernel_h(), kw = L.input_kernel.kernel_w();
  auto conv_at = [&](const KernelBank& k, const Tensor4& in, int n, int oc, int y, int xx) {
    double acc = k.bias.empty() ? 0.0 : k.bias[oc];
    for (int ic = 0; ic < in.c(); ++ic)
      for (int dy = 0; dy < kh; ++dy)
        for (int dx = 0; dx < kw; ++dx) {
          const int sy = y + dy - kh / 2, sx = xx + dx - kw / 2;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
          acc += k.weights(oc, ic, dy, dx) * in(n, ic, sy, sx);
        }
    return acc;
  };
  auto peep = [](const Tensor4& p, int c, int y, int xx) {
    return p.h() == 1 && p.w() == 1 ? p(0, c, 0, 0) : p(0, c, y, xx);
  };
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  CellState next{Tensor4(prev.s.shape()), Tensor4(prev.s.shape())};
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < H; ++c)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double s = prev.s(n, c, y, xx);
          auto gate_in = [&](int gate) {
            return conv_at(L.input_kernel, x, n, gate * H + c, y, xx) +
                   conv_at(L.recurrent_kernel, prev.o, n, gate * H + c, y, xx);
          };
          const double f = sig(gate_in(1) + peep(L.peep_f, c, y, xx) * s);
          const double i = sig(gate_in(0) + peep(L.peep_i, c, y, xx) * s);
          const double g = std::tanh(gate_in(2));
          const double s_new = f * s + i * g;
          const double peeked = peek == OutputGatePeek::new_state ? s_new : s;
          const double og = sig(gate_in(3) + peep(L.peep_o, c, y, xx) * peeked);
          next.s(n, c, y, xx) = s_new;
          next.o(n, c, y, xx) = og * std::tanh(s_new);
        }
  return next;
}

inline void randomize_head(HeadParams& p, std::mt19937_64& rng, double scale) {
  for (auto& v : p.views()) randomize(v.values, rng, scale);
}

/// Untruncated BPTT gradient computed loss-term by loss-term: for every frame
/// t the loss at t is backpropagated on its own from t down to frame 0, and
/// the per-term parameter gradients are summed at the end.
inline HeadParams untruncated_grads(const HeadParams& params,
                                    const std::vector<Tensor4>& frames,
                                    const std::vector<Tensor4>& probes) {
  HeadState state = init_state(params.config, frames[0].h(), frames[0].w());
  std::vector<HeadFrameCache> caches(frames.size());
  for (std::size_t t = 0; t < frames.size(); ++t)
    head_step(params, frames[t], state, &caches[t]);

  HeadParams total = params.zeros_like();
  for (std::size_t t = 0; t < frames.size(); ++t) {
    HeadParams term = params.zeros_like();
    HeadState d_state = init_state(params.config, frames[0].h(), frames[0].w());
    for (std::size_t k = t + 1; k-- > 0;) {
      const Tensor4 d_out = k == t ? probes[t] : Tensor4::zeros_like(probes[t]);
      head_step_backward(params, caches[k], d_out, d_state, term);
    }
    auto tv = term.views();
    auto sv = total.views();
    for (std::size_t i = 0; i < tv.size(); ++i)
      for (std::size_t j = 0; j < tv[i].values.size(); ++j)
        sv[i].values[j] += tv[i].values[j];
  }
  return total;
}

/// Single ConvLSTM layer, 2 channels on a 4x4 map, with every weight zero,
/// the forget gate biased to +20 and the input gate to -20.
inline ConvLstmLayer carousel_layer() {
  RnnConfig c = RnnConfig::desk(CellKind::convlstm, 2);
  c.layers = 1;
  c.hidden = 2;
  HeadParams p = build_head(c, 0);
  ConvLstmLayer L = p.lstm[0];
  for (auto* t : {&L.input_kernel.weights, &L.recurrent_kernel.weights,
                  &L.peep_i, &L.peep_f, &L.peep_o})
    t->fill(0.0);
  std::fill(L.input_kernel.bias.begin(), L.input_kernel.bias.end(), 0.0);
  for (int ch = 0; ch < 2; ++ch) {
    L.input_kernel.bias[ch] = -20.0;
    L.input_kernel.bias[2 + ch] = 20.0;
  }
  return L;
}

struct CarouselResult {
  double drift = 0.0;        // ||s_T - s_0||
  double probe_error = 0.0;  // max over probes of ||J^T r - r||
};

inline CarouselResult run_carousel(int steps, std::uint64_t seed, int probes = 5) {
  const ConvLstmLayer L = carousel_layer();
  ConvLstmLayer grads = L;
  std::mt19937_64 rng(seed);
  const Shape4 hs{1, 2, 4, 4};
  const Tensor4 s0 = random_tensor(hs, rng);
  const Tensor4 x = random_tensor(hs, rng);
  CellState state{s0, Tensor4(hs)};
  std::vector<LstmStepCache> caches(steps);
  for (int t = 0; t < steps; ++t)
    state = convlstm_step(L, x, state, OutputGatePeek::new_state, &caches[t]);
  Tensor4 diff = state.s;
  diff += Tensor4(s0) *= -1.0;
  CarouselResult r;
  r.drift = l2_norm(diff.values());
  for (int k = 0; k < probes; ++k) {
    const Tensor4 probe = random_tensor(hs, rng);
    CellState d{probe, Tensor4(hs)};
    for (int t = steps; t-- > 0;)
      d = convlstm_step_backward(L, caches[t], d, OutputGatePeek::new_state, grads)
              .d_prev;
    Tensor4 e = d.s;
    e += Tensor4(probe) *= -1.0;
    r.probe_error = std::max(r.probe_error, l2_norm(e.values()));
  }
  return r;
}

/// ||d(r . out_T)/d x_1|| / ||d(r . out_1)/d x_1|| for a one-layer head fed
/// x_1 at the first step and zeros afterwards.
struct VanishingResult {
  double simple_ratio = 0.0;
  double lstm_ratio = 0.0;
  double simple_recurrent_bound = 0.0;  // upper bound on the recurrent operator norm
};

inline VanishingResult run_vanishing(int steps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int C = 3, H = 4;
  const Shape4 xs{1, C, 6, 6}, hs{1, H, 6, 6};
  const Tensor4 x1 = random_tensor(xs, rng);
  const Tensor4 zero_x(xs);
  const Tensor4 probe = random_tensor(hs, rng);
  VanishingResult r;

  {
    RnnConfig c = RnnConfig::desk(CellKind::simple, C);
    c.layers = 1;
    c.hidden = H;
    HeadParams p = build_head(c, seed);
    SimpleRnnLayer L = p.simple[0];
    randomize(L.input_kernel.weights.values(), rng, 0.5);
    for (double& b : L.input_kernel.bias) b = 1.0;
    // Scale W so the sum over taps of per-tap Frobenius norms is 0.5; that
    // bounds every singular value of the zero-padded convolution by 0.5.
    randomize(L.recurrent_kernel.weights.values(), rng, 1.0);
    auto& W = L.recurrent_kernel.weights;
    double bound = 0.0;
    for (int dy = 0; dy < W.h(); ++dy)
      for (int dx = 0; dx < W.w(); ++dx) {
        double f = 0.0;
        for (int o = 0; o < W.n(); ++o)
          for (int i = 0; i < W.c(); ++i) f += W(o, i, dy, dx) * W(o, i, dy, dx);
        bound += std::sqrt(f);
      }
    W *= 0.5 / bound;
    r.simple_recurrent_bound = 0.5;

    auto grad_norm = [&](int T) {
      SimpleRnnLayer g = L;
      std::vector<SimpleStepCache> caches(T);
      Tensor4 o(hs);
      for (int t = 0; t < T; ++t)
        o = simple_rnn_step(L, t == 0 ? x1 : zero_x, o, &caches[t]);
      Tensor4 d_o = probe;
      Tensor4 d_x;
      for (int t = T; t-- > 0;) {
        SimpleStepGrads sg = simple_rnn_step_backward(L, caches[t], d_o, g);
        d_o = std::move(sg.d_prev_o);
        d_x = std::move(sg.d_x);
      }
      return l2_norm(d_x.values());
    };
    r.simple_ratio = grad_norm(steps) / grad_norm(1);
  }

  {
    RnnConfig c = RnnConfig::desk(CellKind::convlstm, C);
    c.layers = 1;
    c.hidden = H;
    c.forget_bias = 4.0;
    HeadParams p = build_head(c, seed + 1);
    const ConvLstmLayer& L = p.lstm[0];
    auto grad_norm = [&](int T) {
      ConvLstmLayer g = L;
      std::vector<LstmStepCache> caches(T);
      CellState st{Tensor4(hs), Tensor4(hs)};
      for (int t = 0; t < T; ++t)
        st = convlstm_step(L, t == 0 ? x1 : zero_x, st, OutputGatePeek::new_state,
                           &caches[t]);
      CellState d{Tensor4(hs), probe};
      Tensor4 d_x;
      for (int t = T; t-- > 0;) {
        LstmStepGrads lg =
            convlstm_step_backward(L, caches[t], d, OutputGatePeek::new_state, g);
        d = std::move(lg.d_prev);
        d_x = std::move(lg.d_x);
      }
      return l2_norm(d_x.values());
    };
    r.lstm_ratio = grad_norm(steps) / grad_norm(1);
  }
  return r;
}

inline RnnConfig small_config(CellKind cell) {
  RnnConfig c = RnnConfig::desk(cell, 3);
  c.layers = 2;
  c.hidden = 3;
  return c;
}

inline std::vector<Tensor4> random_frames(std::size_t n, Shape4 s, std::mt19937_64& rng) {
  std::vector<Tensor4> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_tensor(s, rng));
  return out;
}

inline double max_param_diff(HeadParams a, HeadParams b) {
  auto av = a.views();
  auto bv = b.views();
  double m = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i)
    for (std::size_t j = 0; j < av[i].values.size(); ++j)
      m = std::max(m, std::abs(av[i].values[j] - bv[i].values[j]));
  return m;
}

inline FrameLossFn probe_loss(const std::vector<Tensor4>& probes, std::size_t offset = 0) {
  return [&probes, offset](std::size_t t, const Tensor4& out, Tensor4& d_out) {
    d_out = probes[offset + t];
    return dot(out, probes[offset + t]);
  };
}


}  // namespace seqseg::testing
