#include "seqseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "seqseg/errors.hpp"
#include "seqseg/parallel.hpp"

namespace seqseg {

// ---- losses -------------------------------------------------------------------

std::vector<double> median_frequency_weights(std::span<const std::int64_t> counts) {
  std::int64_t total = 0;
  for (std::int64_t c : counts) {
    if (c < 0) throw DataError("class histogram has a negative count");
    total += c;
  }
  if (total == 0) throw DataError("class histogram is all zero");
  std::vector<double> freq;
  for (std::int64_t c : counts)
    if (c > 0) freq.push_back(static_cast<double>(c) / static_cast<double>(total));
  std::vector<double> sorted = freq;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[(sorted.size() - 1) / 2];
  std::vector<double> w(counts.size(), 0.0);
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) continue;
    const double f = static_cast<double>(counts[k]) / static_cast<double>(total);
    w[k] = median / f;
  }
  return w;
}

LossResult weighted_cross_entropy(const Tensor4& logits, std::span<const LabelMap> labels,
                                  std::span<const double> class_weights) {
  const Shape4 s = logits.shape();
  SEQSEG_REQUIRE(static_cast<int>(labels.size()) == s.n,
                 "weighted_cross_entropy: " + std::to_string(labels.size()) +
                     " label maps for batch " + std::to_string(s.n));
  SEQSEG_REQUIRE(static_cast<int>(class_weights.size()) == s.c,
                 "weighted_cross_entropy: weight count does not match classes");
  for (const auto& l : labels)
    SEQSEG_REQUIRE(l.h == s.h && l.w == s.w,
                   "weighted_cross_entropy: label map size differs from logits " +
                       s.str());
  require_finite(logits, "weighted_cross_entropy logits");

  LossResult r;
  r.d_logits = Tensor4(s);
  std::size_t valid = 0;
  for (const auto& l : labels)
    for (std::uint8_t id : l.ids) {
      if (id == kIgnoreLabel) continue;
      if (id >= s.c)
        throw DataError("label id " + std::to_string(id) + " outside [0, " +
                        std::to_string(s.c) + ")");
      ++valid;
    }
  if (valid == 0) return r;
  const double inv_n = 1.0 / static_cast<double>(valid);
  const std::size_t plane = s.plane();
  std::vector<double> p(s.c);
  for (int n = 0; n < s.n; ++n) {
    const auto& ids = labels[n].ids;
    for (std::size_t i = 0; i < plane; ++i) {
      const std::uint8_t y = ids[i];
      if (y == kIgnoreLabel) continue;
      double mx = logits.plane(n, 0)[i];
      for (int c = 1; c < s.c; ++c) mx = std::max(mx, logits.plane(n, c)[i]);
      double sum = 0.0;
      for (int c = 0; c < s.c; ++c) {
        p[c] = std::exp(logits.plane(n, c)[i] - mx);
        sum += p[c];
      }
      const double w = class_weights[y];
      r.loss += w * (std::log(sum) + mx - logits.plane(n, y)[i]);
      for (int c = 0; c < s.c; ++c)
        r.d_logits.plane(n, c)[i] = w * inv_n * (p[c] / sum - (c == y ? 1.0 : 0.0));
    }
  }
  r.loss *= inv_n;
  return r;
}

// ---- optimizers ---------------------------------------------------------------

Optimizer::Optimizer(OptimizerKind kind, AdamOptions adam) : kind_(kind), adam_(adam) {}

void Optimizer::step(const std::vector<ParamView>& params,
                     const std::vector<ParamView>& grads, double lr, double weight_decay) {
  SEQSEG_REQUIRE(params.size() == grads.size(), "optimizer: param/grad lists differ");
  if (m_.empty() && kind_ == OptimizerKind::adam) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].values.size(), 0.0);
      v_[i].assign(params[i].values.size(), 0.0);
    }
  }
  SEQSEG_REQUIRE(kind_ == OptimizerKind::sgd || m_.size() == params.size(),
                 "optimizer: parameter list changed between steps");
  ++steps_;
  const double bc1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamView& p = params[i];
    if (!p.trainable) continue;
    SEQSEG_REQUIRE(p.name == grads[i].name && p.values.size() == grads[i].values.size(),
                   "optimizer: gradient for " + p.name + " does not line up");
    const double lambda = p.decay ? weight_decay : 0.0;
    for (std::size_t j = 0; j < p.values.size(); ++j) {
      const double g = grads[i].values[j] + lambda * p.values[j];
      if (kind_ == OptimizerKind::sgd) {
        p.values[j] -= lr * g;
        continue;
      }
      double& m = m_[i][j];
      double& v = v_[i][j];
      m = adam_.beta1 * m + (1.0 - adam_.beta1) * g;
      v = adam_.beta2 * v + (1.0 - adam_.beta2) * g * g;
      p.values[j] -= lr * (m / bc1) / (std::sqrt(v / bc2) + adam_.eps);
    }
  }
}

double clip_global_norm(const std::vector<ParamView>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    if (g.trainable)
      for (double v : g.values) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& g : grads)
      if (g.trainable)
        for (double& v : g.values) v *= scale;
  }
  return norm;
}

// ---- frame sampling -----------------------------------------------------------

std::vector<std::size_t> block_sample_frames(std::size_t count, std::size_t block_size,
                                             std::uint64_t seed) {
  if (block_size == 0) throw ConfigError("block size must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  std::vector<char> hit;
  for (std::size_t start = 0; start < count; start += block_size) {
    const std::size_t m = std::min(block_size, count - start);
    hit.assign(m, 0);
    std::uniform_int_distribution<std::size_t> dist(0, m - 1);
    for (std::size_t k = 0; k < m; ++k) hit[dist(rng)] = 1;
    for (std::size_t k = 0; k < m; ++k)
      if (hit[k]) out.push_back(start + k);
  }
  return out;
}

// ---- plans ----------------------------------------------------------------------

void TrainPlan::validate() const {
  if (phases.empty()) throw ConfigError("train plan needs at least one lr phase");
  for (const auto& p : phases) {
    if (p.epochs < 1) throw ConfigError("lr phase epochs must be >= 1");
    if (!(p.lr >= 0.0) || !std::isfinite(p.lr))
      throw ConfigError("learning rate must be finite and >= 0");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (block_size < 1) throw ConfigError("block_size must be >= 1");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError("adam eps must be > 0");
}

int TrainPlan::total_epochs() const {
  int n = 0;
  for (const auto& p : phases) n += p.epochs;
  return n;
}

TrainPlan TrainPlan::fcn_default() { return TrainPlan{}; }

TrainPlan TrainPlan::rnn_default(CellKind cell) {
  TrainPlan p;
  p.stage = TrainStage::rnn;
  p.batch_size = 1;
  p.augment = false;
  p.clip_norm = cell == CellKind::simple ? 5.0 : 0.0;
  return p;
}

std::string to_string(TrainStage s) { return s == TrainStage::fcn ? "fcn" : "rnn"; }
std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

// ---- loss log -------------------------------------------------------------------

void write_loss_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << "epoch,phase_lr,mean_loss,wall_seconds\n";
  char buf[160];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.3f\n", e.epoch, e.lr, e.mean_loss,
                  e.wall_seconds);
    f << buf;
  }
  if (!f) throw IoError("write failed for " + path.string());
}

std::vector<EpochLog> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(f, line);
  if (line != "epoch,phase_lr,mean_loss,wall_seconds")
    throw DataError("unexpected loss log header in " + path.string());
  std::vector<EpochLog> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    EpochLog e;
    char c1, c2, c3;
    std::istringstream in(line);
    if (!(in >> e.epoch >> c1 >> e.lr >> c2 >> e.mean_loss >> c3 >> e.wall_seconds))
      throw DataError("malformed loss log row in " + path.string() + ": " + line);
    out.push_back(e);
  }
  return out;
}

// ---- training loops ---------------------------------------------------------------

std::vector<double> dataset_class_weights(const VideoDataset& data) {
  const auto hist = data.class_histogram();
  return median_frequency_weights(hist);
}

namespace {

struct FrameRef {
  std::size_t seq;
  std::size_t frame;
};

std::vector<FrameRef> flatten(const VideoDataset& data) {
  std::vector<FrameRef> refs;
  for (std::size_t s = 0; s < data.sequences.size(); ++s)
    for (std::size_t f = 0; f < data.sequences[s].frames.size(); ++f)
      refs.push_back({s, f});
  return refs;
}

std::uint64_t epoch_seed(std::uint64_t seed, int epoch, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(salt)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return static_cast<std::uint64_t>(words[0]) << 32 | words[1];
}

double lr_for_epoch(const TrainPlan& plan, int epoch) {
  int e = 0;
  for (const auto& p : plan.phases) {
    e += p.epochs;
    if (epoch < e) return p.lr;
  }
  return plan.phases.back().lr;
}

void check_fcn_data(const FcnParams& fcn, const VideoDataset& data) {
  if (data.num_classes != fcn.config.num_classes)
    throw CompatibilityError("dataset has " + std::to_string(data.num_classes) +
                             " classes, model expects " +
                             std::to_string(fcn.config.num_classes));
  if (data.height != fcn.config.input_h || data.width != fcn.config.input_w)
    throw CompatibilityError(
        "dataset frames are " + std::to_string(data.height) + "x" +
        std::to_string(data.width) + ", model expects " +
        std::to_string(fcn.config.input_h) + "x" + std::to_string(fcn.config.input_w));
  if (data.frame_count() == 0) throw DataError("training split has no frames");
}

using Clock = std::chrono::steady_clock;

}  // namespace

std::vector<EpochLog> train_fcn(FcnParams& fcn, const VideoDataset& data,
                                const TrainPlan& plan, const EpochCallback& on_epoch) {
  plan.validate();
  if (plan.stage != TrainStage::fcn) throw ConfigError("train_fcn needs an fcn-stage plan");
  check_fcn_data(fcn, data);
  const std::vector<double> weights = dataset_class_weights(data);
  const std::vector<FrameRef> refs = flatten(data);
  const int H = data.height, W = data.width;
  Optimizer opt(plan.optimizer, plan.adam);
  std::vector<EpochLog> log;
  std::vector<std::size_t> picked;

  for (int epoch = 0; epoch < plan.total_epochs(); ++epoch) {
    const auto t0 = Clock::now();
    const double lr = lr_for_epoch(plan, epoch);
    if (epoch == 0 || plan.resample_each_epoch)
      picked = block_sample_frames(refs.size(), plan.block_size,
                                   epoch_seed(plan.seed, epoch, 1));
    std::vector<std::size_t> order = picked;
    std::mt19937_64 rng(epoch_seed(plan.seed, epoch, 2));
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_real_distribution<double> jitter(0.9, 1.1);
    std::bernoulli_distribution flip(0.5);

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += plan.batch_size) {
      const std::size_t b = std::min<std::size_t>(plan.batch_size, order.size() - start);
      Tensor4 images(Shape4{static_cast<int>(b), 3, H, W});
      std::vector<LabelMap> labels(b);
      for (std::size_t k = 0; k < b; ++k) {
        const FrameRef r = refs[order[start + k]];
        const Frame& f = data.sequences[r.seq].frames[r.frame];
        const bool mirror = plan.augment && flip(rng);
        const double gain = plan.augment ? jitter(rng) : 1.0;
        labels[k] = f.label;
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
              images(static_cast<int>(k), c, y, x) =
                  gain * f.image(0, c, y, mirror ? W - 1 - x : x);
        if (mirror)
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) labels[k].at(y, x) = f.label.at(y, W - 1 - x);
      }
      FcnTape tape;
      const LogitsBundle out = fcn_forward(fcn, images, Phase::train, &tape);
      const LossResult loss = weighted_cross_entropy(out.logits_full, labels, weights);
      std::vector<Shape4> skip_shapes;
      for (const auto& s : out.skip_logits) skip_shapes.push_back(s.shape());
      const MergeGrads mg =
          merge_logits_backward(loss.d_logits, out.logits_low.shape(), skip_shapes);
      FcnParams grads = fcn.zeros_like();
      fcn_backward(fcn, tape, mg, grads);
      apply_running_stats(fcn, tape);
      opt.step(fcn.views(), grads.views(), lr, plan.weight_decay);
      if (!std::isfinite(loss.loss)) throw NumericError("training loss became non-finite");
      loss_sum += loss.loss;
      ++batches;
    }
    EpochLog e;
    e.epoch = epoch;
    e.lr = lr;
    e.mean_loss = batches ? loss_sum / batches : 0.0;
    if (plan.log_wall_time)
      e.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return log;
}

std::vector<std::vector<LogitsBundle>> precompute_logits(const FcnParams& fcn,
                                                         const VideoDataset& data) {
  std::vector<std::vector<LogitsBundle>> out(data.sequences.size());
  for (std::size_t s = 0; s < data.sequences.size(); ++s)
    out[s].resize(data.sequences[s].frames.size());
  const std::vector<FrameRef> refs = flatten(data);
  parallel_for(refs.size(), [&](std::size_t i) {
    const FrameRef r = refs[i];
    LogitsBundle b =
        fcn_forward(fcn, data.sequences[r.seq].frames[r.frame].image, Phase::infer);
    b.logits_full = Tensor4();
    out[r.seq][r.frame] = std::move(b);
  });
  return out;
}

Tensor4 composite_logits(const LogitsBundle& fcn_out, const Tensor4& head_out,
                         HeadMerge merge, int full_h, int full_w) {
  SEQSEG_REQUIRE(head_out.shape() == fcn_out.logits_low.shape(),
                 "head output " + head_out.shape().str() + " does not match low logits " +
                     fcn_out.logits_low.shape().str());
  if (merge == HeadMerge::replace)
    return merge_logits(head_out, fcn_out.skip_logits, full_h, full_w);
  return merge_logits(head_out + fcn_out.logits_low, fcn_out.skip_logits, full_h, full_w);
}

BpttResult rnn_window(const HeadParams& head, std::span<const LogitsBundle> bundles,
                      std::span<const LabelMap> labels,
                      std::span<const double> class_weights, const HeadState& carried) {
  SEQSEG_REQUIRE(bundles.size() == labels.size(), "rnn_window: bundles/labels differ");
  std::vector<Tensor4> lows;
  for (const auto& b : bundles) lows.push_back(b.logits_low);
  auto loss = [&](std::size_t t, const Tensor4& out, Tensor4& d_out) {
    const LogitsBundle& b = bundles[t];
    const Tensor4 full =
        composite_logits(b, out, head.config.merge, labels[t].h, labels[t].w);
    const LossResult lr =
        weighted_cross_entropy(full, std::span<const LabelMap>(&labels[t], 1), class_weights);
    std::vector<Shape4> skip_shapes;
    for (const auto& s : b.skip_logits) skip_shapes.push_back(s.shape());
    d_out = merge_logits_backward(lr.d_logits, out.shape(), skip_shapes).d_low;
    return lr.loss;
  };
  return bptt_step(head, lows, carried, loss);
}

std::vector<EpochLog> train_rnn(HeadParams& head, const FcnParams& fcn,
                                const VideoDataset& data, const TrainPlan& plan,
                                const EpochCallback& on_epoch) {
  plan.validate();
  if (plan.stage != TrainStage::rnn) throw ConfigError("train_rnn needs an rnn-stage plan");
  check_fcn_data(fcn, data);
  if (head.config.input_channels != fcn.config.num_classes ||
      head.config.output_channels != fcn.config.num_classes)
    throw CompatibilityError("recurrent head channels do not match the FCN class count");
  const std::vector<double> weights = dataset_class_weights(data);
  const auto bundles = precompute_logits(fcn, data);
  const std::vector<FrameRef> refs = flatten(data);
  const int low_h = fcn.config.low_h(), low_w = fcn.config.low_w();
  const std::size_t unroll = static_cast<std::size_t>(head.config.unroll);
  Optimizer opt(plan.optimizer, plan.adam);
  std::vector<EpochLog> log;
  std::vector<std::size_t> picked;

  for (int epoch = 0; epoch < plan.total_epochs(); ++epoch) {
    const auto t0 = Clock::now();
    const double lr = lr_for_epoch(plan, epoch);
    if (epoch == 0 || plan.resample_each_epoch)
      picked = block_sample_frames(refs.size(), plan.block_size,
                                   epoch_seed(plan.seed, epoch, 1));
    std::vector<std::vector<std::size_t>> per_seq(data.sequences.size());
    for (std::size_t g : picked) per_seq[refs[g].seq].push_back(refs[g].frame);
    std::vector<std::size_t> seq_order(data.sequences.size());
    std::iota(seq_order.begin(), seq_order.end(), 0);
    std::mt19937_64 rng(epoch_seed(plan.seed, epoch, 2));
    std::shuffle(seq_order.begin(), seq_order.end(), rng);

    double loss_sum = 0.0;
    std::size_t frames = 0;
    for (std::size_t s : seq_order) {
      const auto& idx = per_seq[s];
      HeadState state = init_state(head.config, low_h, low_w);
      for (std::size_t start = 0; start < idx.size(); start += unroll) {
        const std::size_t len = std::min(unroll, idx.size() - start);
        std::vector<LogitsBundle> win;
        std::vector<LabelMap> labels;
        for (std::size_t k = 0; k < len; ++k) {
          win.push_back(bundles[s][idx[start + k]]);
          labels.push_back(data.sequences[s].frames[idx[start + k]].label);
        }
        BpttResult r = rnn_window(head, win, labels, weights, state);
        if (!std::isfinite(r.loss)) throw NumericError("training loss became non-finite");
        const auto gv = r.grads.views();
        if (plan.clip_norm > 0.0) clip_global_norm(gv, plan.clip_norm);
        opt.step(head.views(), gv, lr, plan.weight_decay);
        state = std::move(r.carried);
        loss_sum += r.loss;
        frames += len;
      }
    }
    EpochLog e;
    e.epoch = epoch;
    e.lr = lr;
    e.mean_loss = frames ? loss_sum / static_cast<double>(frames) : 0.0;
    if (plan.log_wall_time)
      e.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return log;
}

}  // namespace seqseg
