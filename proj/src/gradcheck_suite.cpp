#include "seqseg/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <random>
#include <span>

#include "seqseg/dataset.hpp"
#include "seqseg/fcn.hpp"
#include "seqseg/gradcheck.hpp"
#include "seqseg/ops.hpp"
#include "seqseg/recurrent.hpp"
#include "seqseg/training.hpp"

namespace seqseg {

namespace {

const std::vector<std::string> kOps = {
    "conv2d",         "maxpool2",        "bilinear_upsample", "batchnorm_train",
    "batchnorm_infer", "relu",           "sigmoid",           "tanh",
    "softmax",        "cross_entropy",   "merge_logits",      "simple_rnn_step",
    "convlstm_step",  "model_fcn",       "model_fcn_simple",  "model_fcn_convlstm",
};

class Suite {
 public:
  explicit Suite(const GradcheckOptions& o) : opt_(o), rng_(o.seed) {}

  void check(const std::string& op, const std::function<double()>& loss,
             std::span<double> point, std::span<const double> analytic,
             double eps = 1e-6, std::size_t max_coords = 0) {
    std::vector<double> a(analytic.begin(), analytic.end());
    if (op == opt_.fault_op)
      for (double& v : a) v *= 1.01;
    FiniteDiffOptions fd;
    fd.eps = eps;
    fd.max_coords = max_coords;
    fd.seed = rng_();
    fd.scale_floor = 1e-3;
    const FiniteDiffReport r = finite_diff_check(loss, point, a, fd);
    GradcheckEntry& e = entry(op);
    e.worst_rel_error = std::max(e.worst_rel_error, r.max_rel_error);
    e.checked += r.checked;
  }

  /// Directional checks for whole models; see directional_diff_check.
  void check_directional(const std::string& op, const std::function<double()>& loss,
                         std::span<double> point, std::span<const double> analytic,
                         double eps) {
    std::vector<double> a(analytic.begin(), analytic.end());
    if (op == opt_.fault_op)
      for (double& v : a) v *= 1.01;
    FiniteDiffOptions fd;
    fd.eps = eps;
    fd.seed = rng_();
    const FiniteDiffReport r = directional_diff_check(loss, point, a, 3, fd);
    GradcheckEntry& e = entry(op);
    e.worst_rel_error = std::max(e.worst_rel_error, r.max_rel_error);
    e.checked += r.checked;
  }

  Tensor4 random(Shape4 s, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor4 t(s);
    for (double& v : t.values()) v = d(rng_);
    return t;
  }

  void fill(std::span<double> v, double scale) {
    std::uniform_real_distribution<double> d(-scale, scale);
    for (double& x : v) x = d(rng_);
  }

  LabelMap labels(int h, int w, int classes) {
    std::uniform_int_distribution<int> d(0, classes);
    LabelMap m(h, w);
    for (auto& id : m.ids) {
      const int v = d(rng_);
      id = static_cast<std::uint8_t>(v == classes ? kIgnoreLabel : v);
    }
    return m;
  }

  std::mt19937_64& rng() { return rng_; }

  std::vector<GradcheckEntry> finish() {
    for (auto& e : entries_) e.passed = e.checked > 0 && e.worst_rel_error < opt_.threshold;
    return entries_;
  }

  GradcheckEntry& entry(const std::string& op) {
    for (auto& e : entries_)
      if (e.op == op) return e;
    entries_.push_back({op, 0.0, 0, false});
    return entries_.back();
  }

 private:
  GradcheckOptions opt_;
  std::mt19937_64 rng_;
  std::vector<GradcheckEntry> entries_;
};

void check_conv(Suite& s) {
  struct Case { int stride; Padding pad; int kh, kw; };
  for (const Case c : {Case{1, Padding::same, 3, 3}, Case{2, Padding::same, 7, 7},
                       Case{1, Padding::valid, 3, 5}, Case{2, Padding::valid, 1, 1}}) {
    Tensor4 x = s.random({2, 3, 9, 8});
    KernelBank k(4, 3, c.kh, c.kw);
    s.fill(k.weights.values(), 0.5);
    s.fill(k.bias, 0.5);
    const Tensor4 probe = s.random(conv2d_output_shape(x.shape(), k, c.stride, c.pad));
    KernelBank g = k.zeros_like();
    const Tensor4 dx = conv2d_backward(x, k, probe, g, c.stride, c.pad);
    auto loss = [&] { return dot(conv2d(x, k, c.stride, c.pad), probe); };
    s.check("conv2d", loss, x.values(), dx.values());
    s.check("conv2d", loss, k.weights.values(), g.weights.values());
    s.check("conv2d", loss, k.bias, g.bias);
  }
}

void check_pool(Suite& s) {
  // Distinct values on a coarse grid so no perturbation changes the argmax.
  Tensor4 x({2, 3, 7, 8});
  std::vector<double> vals(x.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.01 * static_cast<double>(i);
  std::shuffle(vals.begin(), vals.end(), s.rng());
  std::copy(vals.begin(), vals.end(), x.values().begin());
  const PoolResult pr = maxpool2(x);
  const Tensor4 probe = s.random(pr.out.shape());
  const Tensor4 dx = maxpool2_backward(pr, probe);
  auto loss = [&] { return dot(maxpool2(x).out, probe); };
  s.check("maxpool2", loss, x.values(), dx.values());
}

void check_upsample(Suite& s) {
  for (int factor : {2, 4, 8}) {
    Tensor4 x = s.random({1, 2, 3, 4});
    const Tensor4 probe = s.random({1, 2, 3 * factor, 4 * factor});
    const Tensor4 dx = bilinear_upsample_backward(probe, factor, x.shape());
    auto loss = [&] { return dot(bilinear_upsample(x, factor), probe); };
    s.check("bilinear_upsample", loss, x.values(), dx.values());
  }
}

void check_batchnorm(Suite& s) {
  for (Phase phase : {Phase::train, Phase::infer}) {
    const std::string op = phase == Phase::train ? "batchnorm_train" : "batchnorm_infer";
    Tensor4 x = s.random({3, 4, 5, 5}, -2.0, 2.0);
    BatchNormParams p(4);
    s.fill(p.gamma, 1.5);
    s.fill(p.beta, 0.5);
    s.fill(p.running_mean, 0.3);
    for (double& v : p.running_var) v = 0.5 + std::uniform_real_distribution<double>(0, 1)(s.rng());
    const Tensor4 probe = s.random(x.shape());
    BatchNormCache cache;
    batchnorm(x, p, phase, &cache);
    BatchNormParams g(4);
    std::fill(g.gamma.begin(), g.gamma.end(), 0.0);
    const Tensor4 dx = batchnorm_backward(p, cache, probe, g);
    auto loss = [&] { return dot(batchnorm(x, p, phase), probe); };
    s.check(op, loss, x.values(), dx.values());
    s.check(op, loss, p.gamma, g.gamma);
    s.check(op, loss, p.beta, g.beta);
  }
}

void check_pointwise(Suite& s) {
  const std::pair<Activation, const char*> acts[] = {
      {Activation::relu, "relu"}, {Activation::sigmoid, "sigmoid"}, {Activation::tanh, "tanh"}};
  for (const auto& [f, name] : acts) {
    Tensor4 x = s.random({2, 3, 4, 5}, -3.0, 3.0);
    for (double& v : x.values())
      if (std::abs(v) < 0.05) v += 0.1;  // keep relu away from its kink
    const Tensor4 probe = s.random(x.shape());
    const Tensor4 y = pointwise(x, f);
    const Tensor4 dx = pointwise_backward(x, y, probe, f);
    auto loss = [&] { return dot(pointwise(x, f), probe); };
    s.check(name, loss, x.values(), dx.values());
  }
}

void check_softmax(Suite& s) {
  Tensor4 x = s.random({2, 5, 3, 4}, -3.0, 3.0);
  const Tensor4 probe = s.random(x.shape());
  const Tensor4 dx = softmax_channels_backward(softmax_channels(x), probe);
  auto loss = [&] { return dot(softmax_channels(x), probe); };
  s.check("softmax", loss, x.values(), dx.values());
}

void check_cross_entropy(Suite& s) {
  Tensor4 x = s.random({2, 4, 5, 6}, -3.0, 3.0);
  const std::vector<LabelMap> labels = {s.labels(5, 6, 4), s.labels(5, 6, 4)};
  const std::vector<double> w = {0.5, 1.7, 1.0, 3.2};
  const LossResult r = weighted_cross_entropy(x, labels, w);
  auto loss = [&] { return weighted_cross_entropy(x, labels, w).loss; };
  s.check("cross_entropy", loss, x.values(), r.d_logits.values());
}

void check_merge(Suite& s) {
  Tensor4 low = s.random({1, 4, 2, 3});
  std::vector<Tensor4> skips = {s.random({1, 4, 8, 12}), s.random({1, 4, 4, 6})};
  const Tensor4 probe = s.random({1, 4, 16, 24});
  const MergeGrads g =
      merge_logits_backward(probe, low.shape(), {skips[0].shape(), skips[1].shape()});
  auto loss = [&] { return dot(merge_logits(low, skips, 16, 24), probe); };
  s.check("merge_logits", loss, low.values(), g.d_low.values());
  for (std::size_t i = 0; i < skips.size(); ++i)
    s.check("merge_logits", loss, skips[i].values(), g.d_skips[i].values());
}

void randomize_head(Suite& s, HeadParams& h, double scale) {
  for (auto& v : h.views()) s.fill(v.values, scale);
}

void check_simple_step(Suite& s) {
  RnnConfig c = RnnConfig::desk(CellKind::simple);
  c.layers = 1;
  HeadParams h = build_head(c, 0);
  randomize_head(s, h, 0.4);
  Tensor4 x = s.random({1, 4, 5, 6});
  Tensor4 prev = s.random({1, c.hidden, 5, 6}, 0.0, 1.0);
  const Tensor4 probe = s.random({1, c.hidden, 5, 6});
  SimpleStepCache cache;
  simple_rnn_step(h.simple[0], x, prev, &cache);
  HeadParams g = h.zeros_like();
  const SimpleStepGrads sg = simple_rnn_step_backward(h.simple[0], cache, probe, g.simple[0]);
  auto loss = [&] { return dot(simple_rnn_step(h.simple[0], x, prev), probe); };
  s.check("simple_rnn_step", loss, x.values(), sg.d_x.values());
  s.check("simple_rnn_step", loss, prev.values(), sg.d_prev_o.values());
  auto hv = h.views();
  auto gv = g.views();
  for (std::size_t i = 0; i < hv.size(); ++i)
    s.check("simple_rnn_step", loss, hv[i].values, gv[i].values);
}

void check_lstm_step(Suite& s) {
  for (PeepholeMode mode : {PeepholeMode::per_channel, PeepholeMode::per_element}) {
    for (OutputGatePeek peek : {OutputGatePeek::new_state, OutputGatePeek::old_state}) {
      RnnConfig c = RnnConfig::desk(CellKind::convlstm);
      c.layers = 1;
      c.peephole = mode;
      c.state_h = 4;
      c.state_w = 5;
      c.output_peek = peek;
      HeadParams h = build_head(c, 0);
      randomize_head(s, h, 0.5);
      Tensor4 x = s.random({1, 4, 4, 5});
      CellState prev{s.random({1, c.hidden, 4, 5}), s.random({1, c.hidden, 4, 5})};
      const Tensor4 probe_s = s.random(prev.s.shape());
      const Tensor4 probe_o = s.random(prev.o.shape());
      LstmStepCache cache;
      convlstm_step(h.lstm[0], x, prev, peek, &cache);
      HeadParams g = h.zeros_like();
      const LstmStepGrads lg =
          convlstm_step_backward(h.lstm[0], cache, CellState{probe_s, probe_o}, peek, g.lstm[0]);
      auto loss = [&] {
        const CellState n = convlstm_step(h.lstm[0], x, prev, peek);
        return dot(n.s, probe_s) + dot(n.o, probe_o);
      };
      s.check("convlstm_step", loss, x.values(), lg.d_x.values());
      s.check("convlstm_step", loss, prev.s.values(), lg.d_prev.s.values());
      s.check("convlstm_step", loss, prev.o.values(), lg.d_prev.o.values());
      auto hv = h.views();
      auto gv = g.views();
      for (std::size_t i = 0; i < hv.size(); ++i)
        s.check("convlstm_step", loss, hv[i].values, gv[i].values);
    }
  }
}

FcnConfig tiny_fcn(int h, int w) {
  FcnConfig c = FcnConfig::desk();
  c.input_h = h;
  c.input_w = w;
  return c;
}

void randomize_fcn_offsets(Suite& s, FcnParams& p) {
  for (auto& v : p.views())
    if (v.name.ends_with(".b") || v.name.ends_with(".beta")) s.fill(v.values, 0.1);
}

void check_model_fcn(Suite& s) {
  FcnParams p = build_fcn(tiny_fcn(16, 16), s.rng()());
  randomize_fcn_offsets(s, p);
  Tensor4 image = s.random({1, 3, 16, 16}, 0.0, 1.0);
  const std::vector<LabelMap> labels = {s.labels(16, 16, 4)};
  const std::vector<double> w = {1.0, 2.0, 0.7, 1.5};
  FcnTape tape;
  const LogitsBundle b = fcn_forward(p, image, Phase::train, &tape);
  const LossResult lr = weighted_cross_entropy(b.logits_full, labels, w);
  std::vector<Shape4> skip_shapes;
  for (const auto& t : b.skip_logits) skip_shapes.push_back(t.shape());
  const MergeGrads mg = merge_logits_backward(lr.d_logits, b.logits_low.shape(), skip_shapes);
  FcnParams g = p.zeros_like();
  const Tensor4 d_image = fcn_backward(p, tape, mg, g, true);
  auto loss = [&] {
    return weighted_cross_entropy(fcn_forward(p, image, Phase::train).logits_full, labels, w)
        .loss;
  };
  // A small step keeps the whole-network perturbation clear of ReLU and
  // max-pool kinks.
  s.check_directional("model_fcn", loss, image.values(), d_image.values(), 1e-6);
  auto pv = p.views();
  auto gv = g.views();
  for (std::size_t i = 0; i < pv.size(); ++i)
    if (pv[i].trainable) s.check_directional("model_fcn", loss, pv[i].values, gv[i].values, 1e-6);
}

void check_model_head(Suite& s, CellKind cell, const std::string& op) {
  const FcnParams fcn = build_fcn(tiny_fcn(16, 16), s.rng()());
  std::vector<LogitsBundle> bundles;
  std::vector<LabelMap> labels;
  for (int t = 0; t < 3; ++t) {
    bundles.push_back(fcn_forward(fcn, s.random({1, 3, 16, 16}, 0.0, 1.0), Phase::infer));
    labels.push_back(s.labels(16, 16, 4));
  }
  const std::vector<double> w = {1.0, 2.0, 0.7, 1.5};
  for (HeadMerge merge : {HeadMerge::replace, HeadMerge::add}) {
    RnnConfig c = RnnConfig::desk(cell);
    c.merge = merge;
    HeadParams h = build_head(c, s.rng()());
    randomize_head(s, h, 0.5);
    const HeadState zero = init_state(c, fcn.config.low_h(), fcn.config.low_w());
    const BpttResult r = rnn_window(h, bundles, labels, w, zero);
    auto loss = [&] { return rnn_window(h, bundles, labels, w, zero).loss; };
    HeadParams g = r.grads;
    auto hv = h.views();
    auto gv = g.views();
    for (std::size_t i = 0; i < hv.size(); ++i)
      s.check_directional(op, loss, hv[i].values, gv[i].values, 1e-5);
  }
}

}  // namespace

std::vector<std::string> gradcheck_op_names() { return kOps; }

std::vector<GradcheckEntry> run_gradcheck_suite(const GradcheckOptions& options) {
  Suite s(options);
  for (const auto& op : kOps) s.entry(op);
  check_conv(s);
  check_pool(s);
  check_upsample(s);
  check_batchnorm(s);
  check_pointwise(s);
  check_softmax(s);
  check_cross_entropy(s);
  check_merge(s);
  check_simple_step(s);
  check_lstm_step(s);
  check_model_fcn(s);
  check_model_head(s, CellKind::simple, "model_fcn_simple");
  check_model_head(s, CellKind::convlstm, "model_fcn_convlstm");
  return s.finish();
}

}  // namespace seqseg
