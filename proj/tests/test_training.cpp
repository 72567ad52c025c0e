#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "data_util.hpp"
#include "doctest.h"
#include "seqseg/errors.hpp"
#include "seqseg/training.hpp"
#include "test_util.hpp"

using namespace seqseg;
using seqseg::testing::random_tensor;
using seqseg::testing::render_dataset;
using seqseg::testing::small_fcn;

namespace fs = std::filesystem;

namespace {

LabelMap random_labels(int h, int w, int k, std::mt19937_64& rng, bool with_ignore) {
  std::uniform_int_distribution<int> d(0, with_ignore ? k : k - 1);
  LabelMap m(h, w);
  for (auto& id : m.ids) {
    const int v = d(rng);
    id = static_cast<std::uint8_t>(v == k ? kIgnoreLabel : v);
  }
  return m;
}

// Textbook per-pixel loop, independent of the vectorised implementation.
double ce_oracle(const Tensor4& logits, const std::vector<LabelMap>& labels,
                 const std::vector<double>& w) {
  double total = 0.0;
  long valid = 0;
  for (int n = 0; n < logits.n(); ++n)
    for (int y = 0; y < logits.h(); ++y)
      for (int x = 0; x < logits.w(); ++x) {
        const int t = labels[n].at(y, x);
        if (t == kIgnoreLabel) continue;
        double z = 0.0;
        for (int c = 0; c < logits.c(); ++c) z += std::exp(logits(n, c, y, x));
        total += -w[t] * std::log(std::exp(logits(n, t, y, x)) / z);
        ++valid;
      }
  return total / static_cast<double>(valid);
}

std::vector<double> flat_params(FcnParams& p) {
  std::vector<double> out;
  for (const auto& v : p.views()) out.insert(out.end(), v.values.begin(), v.values.end());
  return out;
}

std::vector<double> flat_params(HeadParams& p) {
  std::vector<double> out;
  for (const auto& v : p.views()) out.insert(out.end(), v.values.begin(), v.values.end());
  return out;
}

std::vector<double> trainable_params(FcnParams& p) {
  std::vector<double> out;
  for (const auto& v : p.views())
    if (v.trainable) out.insert(out.end(), v.values.begin(), v.values.end());
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("seqseg_training_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("median frequency weights") {
  SUBCASE("worked example") {
    const std::vector<std::int64_t> c{50, 30, 20};
    const auto w = median_frequency_weights(c);
    CHECK(w[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(w[1] == 1.0);
    CHECK(w[2] == doctest::Approx(1.5).epsilon(1e-12));
  }
  SUBCASE("uniform counts give unit weights") {
    const std::vector<std::int64_t> c{7, 7, 7, 7};
    for (double v : median_frequency_weights(c)) CHECK(v == 1.0);
  }
  SUBCASE("absent class gets zero and drops out of the median") {
    const std::vector<std::int64_t> c{50, 0, 30, 20};
    const auto w = median_frequency_weights(c);
    CHECK(w[1] == 0.0);
    CHECK(w[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(w[2] == 1.0);
    CHECK(w[3] == doctest::Approx(1.5).epsilon(1e-12));
  }
  SUBCASE("even count uses the lower median") {
    const std::vector<std::int64_t> c{40, 30, 20, 10};
    const auto w = median_frequency_weights(c);
    CHECK(w[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(w[2] == 1.0);
    CHECK(w[3] == doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("median class weight is exactly one on random histograms") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::int64_t> d(1, 1000000);
    for (int t = 0; t < 50; ++t) {
      std::vector<std::int64_t> c(5);
      for (auto& v : c) v = d(rng);
      const auto w = median_frequency_weights(c);
      int ones = 0;
      for (double v : w) {
        CHECK(v > 0.0);
        ones += v == 1.0;
      }
      CHECK(ones >= 1);
    }
  }
  SUBCASE("errors") {
    const std::vector<std::int64_t> zero{0, 0, 0};
    CHECK_THROWS_AS(median_frequency_weights(zero), DataError);
    const std::vector<std::int64_t> neg{3, -1};
    CHECK_THROWS_AS(median_frequency_weights(neg), DataError);
  }
}

TEST_CASE("weighted cross-entropy") {
  std::mt19937_64 rng(8);
  SUBCASE("confident correct logits give near-zero loss") {
    LabelMap l = random_labels(5, 6, 4, rng, false);
    Tensor4 z({1, 4, 5, 6});
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 6; ++x) z(0, l.at(y, x), y, x) = 20.0;
    const std::vector<double> w(4, 1.0);
    CHECK(weighted_cross_entropy(z, {&l, 1}, w).loss < 1e-3);
  }
  SUBCASE("uniform logits give ln K") {
    LabelMap l = random_labels(3, 4, 5, rng, true);
    Tensor4 z({1, 5, 3, 4});
    const std::vector<double> w(5, 1.0);
    CHECK(weighted_cross_entropy(z, {&l, 1}, w).loss ==
          doctest::Approx(std::log(5.0)).epsilon(1e-14));
  }
  SUBCASE("matches the scalar oracle and finite differences") {
    for (int t = 0; t < 10; ++t) {
      Tensor4 z = random_tensor({2, 4, 5, 7}, rng, -4.0, 4.0);
      const std::vector<LabelMap> l = {random_labels(5, 7, 4, rng, true),
                                       random_labels(5, 7, 4, rng, true)};
      const std::vector<double> w = {0.4, 1.0, 2.5, 0.0};
      const LossResult r = weighted_cross_entropy(z, l, w);
      CHECK(std::abs(r.loss - ce_oracle(z, l, w)) < 1e-10);
      auto loss = [&] { return weighted_cross_entropy(z, l, w).loss; };
      CHECK(finite_diff_check(loss, z.values(), r.d_logits.values()).max_rel_error < 1e-4);
    }
  }
  SUBCASE("ignored pixels carry no loss or gradient") {
    Tensor4 z = random_tensor({1, 3, 2, 2}, rng);
    LabelMap l(2, 2, kIgnoreLabel);
    l.at(0, 0) = 1;
    const std::vector<double> w(3, 1.0);
    const LossResult r = weighted_cross_entropy(z, {&l, 1}, w);
    for (int c = 0; c < 3; ++c) {
      CHECK(r.d_logits(0, c, 1, 1) == 0.0);
      CHECK(r.d_logits(0, c, 0, 1) == 0.0);
    }
    LabelMap all(2, 2, kIgnoreLabel);
    CHECK(weighted_cross_entropy(z, {&all, 1}, w).loss == 0.0);
  }
  SUBCASE("errors") {
    Tensor4 z({1, 3, 2, 2});
    LabelMap bad(2, 2, 3);
    const std::vector<double> w(3, 1.0);
    CHECK_THROWS_AS(weighted_cross_entropy(z, {&bad, 1}, w), DataError);
    LabelMap small(1, 2, 0);
    CHECK_THROWS_AS(weighted_cross_entropy(z, {&small, 1}, w), ContractViolation);
  }
}

TEST_CASE("adam") {
  std::vector<double> theta{0.5, -1.25, 2.0};
  std::vector<double> g{0.3, -0.7, 0.0};
  std::vector<ParamView> pv{{"k.w", {1, 1, 1, 3}, theta, true, true}};
  std::vector<ParamView> gv{{"k.w", {1, 1, 1, 3}, g, true, true}};

  SUBCASE("zero gradient and no decay leave parameters alone") {
    std::vector<double> zero(3, 0.0);
    std::vector<ParamView> zv{{"k.w", {1, 1, 1, 3}, zero, true, true}};
    const auto before = theta;
    Optimizer opt;
    for (int i = 0; i < 5; ++i) opt.step(pv, zv, 1e-3, 0.0);
    CHECK(theta == before);
  }
  SUBCASE("single step matches the bias-corrected formula") {
    const auto before = theta;
    const double lr = 1e-2, lambda = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Optimizer opt;
    opt.step(pv, gv, lr, lambda);
    for (int j = 0; j < 3; ++j) {
      const double gj = g[j] + lambda * before[j];
      const double m = (1 - b1) * gj, v = (1 - b2) * gj * gj;
      const double mh = m / (1 - b1), vh = v / (1 - b2);
      CHECK(std::abs(theta[j] - (before[j] - lr * mh / (std::sqrt(vh) + eps))) < 1e-12);
    }
    CHECK(opt.steps() == 1);
  }
  SUBCASE("decay only touches views flagged for it") {
    std::vector<double> zero(3, 0.0);
    std::vector<ParamView> nv{{"k.b", {1, 1, 1, 3}, theta, true, false}};
    std::vector<ParamView> zv{{"k.b", {1, 1, 1, 3}, zero, true, false}};
    const auto before = theta;
    Optimizer opt;
    opt.step(nv, zv, 1e-2, 0.5);
    CHECK(theta == before);
  }
  SUBCASE("constant gradient drives the step towards lr") {
    std::vector<double> p{0.0};
    std::vector<double> cg{0.37};
    std::vector<ParamView> a{{"x.w", {1, 1, 1, 1}, p, true, false}};
    std::vector<ParamView> b{{"x.w", {1, 1, 1, 1}, cg, true, false}};
    Optimizer opt;
    double last = 0.0;
    for (int i = 0; i < 3000; ++i) {
      last = p[0];
      opt.step(a, b, 1e-3, 0.0);
    }
    CHECK(std::abs(p[0] - last) == doctest::Approx(1e-3).epsilon(1e-3));
  }
  SUBCASE("sgd") {
    const auto before = theta;
    Optimizer opt(OptimizerKind::sgd);
    opt.step(pv, gv, 0.1, 0.0);
    for (int j = 0; j < 3; ++j) CHECK(theta[j] == doctest::Approx(before[j] - 0.1 * g[j]));
  }
  SUBCASE("gradient clipping") {
    std::vector<double> big{3.0, 4.0};
    std::vector<ParamView> bv{{"k.w", {1, 1, 1, 2}, big, true, true}};
    CHECK(clip_global_norm(bv, 1.0) == doctest::Approx(5.0));
    CHECK(big[0] == doctest::Approx(0.6));
    CHECK(big[1] == doctest::Approx(0.8));
    CHECK(clip_global_norm(bv, 10.0) == doctest::Approx(1.0));
    CHECK(big[1] == doctest::Approx(0.8));
  }
}

TEST_CASE("block frame sampling") {
  SUBCASE("block size one keeps every frame") {
    const auto s = block_sample_frames(37, 1, 3);
    CHECK(s.size() == 37u);
  }
  SUBCASE("retention fraction near 1 - (1 - 1/B)^B") {
    const double expect = 1.0 - std::pow(1.0 - 1.0 / 1000.0, 1000.0);
    CHECK(expect == doctest::Approx(0.632).epsilon(1e-3));
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const double f = static_cast<double>(block_sample_frames(10000, 1000, seed).size()) / 1e4;
      CHECK(f >= 0.60);
      CHECK(f <= 0.67);
    }
  }
  SUBCASE("deterministic, sorted and duplicate free") {
    const auto a = block_sample_frames(2500, 1000, 11);
    CHECK(a == block_sample_frames(2500, 1000, 11));
    CHECK(a != block_sample_frames(2500, 1000, 12));
    for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i - 1] < a[i]);
    CHECK(a.back() < 2500u);
    // The partial final block [2000, 2500) also contributes.
    CHECK(std::count_if(a.begin(), a.end(), [](std::size_t i) { return i >= 2000; }) > 250);
  }
  SUBCASE("edge cases") {
    CHECK(block_sample_frames(0, 1000, 1).empty());
    CHECK(block_sample_frames(1, 1000, 1) == std::vector<std::size_t>{0});
    CHECK_THROWS_AS(block_sample_frames(10, 0, 1), ConfigError);
  }
}

TEST_CASE("train plan validation and defaults") {
  TrainPlan p = TrainPlan::fcn_default();
  CHECK(p.total_epochs() == 10);
  CHECK(p.phases == std::vector<LrPhase>{{6, 1e-4}, {3, 1e-5}, {1, 1e-6}});
  CHECK(p.batch_size == 4);
  CHECK(p.weight_decay == 1e-4);
  CHECK_NOTHROW(p.validate());
  const TrainPlan simple = TrainPlan::rnn_default(CellKind::simple);
  CHECK(simple.stage == TrainStage::rnn);
  CHECK(simple.batch_size == 1);
  CHECK(simple.clip_norm == 5.0);
  CHECK(TrainPlan::rnn_default(CellKind::convlstm).clip_norm == 0.0);

  p.phases = {{1, 0.0}};
  CHECK_NOTHROW(p.validate());
  p.phases = {{1, -1e-4}};
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.phases = {};
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = TrainPlan::fcn_default();
  p.weight_decay = -1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = TrainPlan::fcn_default();
  p.phases = {{0, 1e-4}};
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("loss log csv round trip") {
  const fs::path d = temp_dir("csv");
  std::vector<EpochLog> log = {{0, 1e-4, 0.123456789012345678, 0.0},
                               {1, 1e-5, 1.0 / 3.0, 0.0}};
  write_loss_csv(d / "a.csv", log);
  CHECK(read_loss_csv(d / "a.csv") == log);
  CHECK(slurp(d / "a.csv").rfind("epoch,phase_lr,mean_loss,wall_seconds\n", 0) == 0);
  CHECK_THROWS_AS(read_loss_csv(d / "missing.csv"), IoError);
  CHECK_THROWS_AS(write_loss_csv(d / "no" / "dir.csv", log), IoError);
}

TEST_CASE("fcn training stage") {
  const VideoDataset data = render_dataset(2, 5, 16, 24, 3);
  TrainPlan plan = TrainPlan::fcn_default();
  plan.phases = {{2, 1e-3}};
  plan.block_size = 4;

  SUBCASE("same seed gives bitwise-identical parameters and loss log") {
    FcnParams a = build_fcn(small_fcn(16, 24), 5);
    FcnParams b = build_fcn(small_fcn(16, 24), 5);
    const auto la = train_fcn(a, data, plan);
    const auto lb = train_fcn(b, data, plan);
    CHECK(la == lb);
    CHECK(flat_params(a) == flat_params(b));
    const fs::path d = temp_dir("det");
    write_loss_csv(d / "a.csv", la);
    write_loss_csv(d / "b.csv", lb);
    CHECK(slurp(d / "a.csv") == slurp(d / "b.csv"));
    for (const auto& e : la) CHECK(e.wall_seconds == 0.0);
  }
  SUBCASE("a different seed changes the run") {
    FcnParams a = build_fcn(small_fcn(16, 24), 5);
    FcnParams b = build_fcn(small_fcn(16, 24), 5);
    TrainPlan other = plan;
    other.seed = 2;
    CHECK(train_fcn(a, data, plan) != train_fcn(b, data, other));
  }
  SUBCASE("lr = 0 leaves parameters unchanged and the loss flat") {
    FcnParams p = build_fcn(small_fcn(16, 24), 5);
    const auto before = trainable_params(p);
    TrainPlan zero = plan;
    zero.phases = {{3, 0.0}};
    zero.batch_size = 1;
    zero.augment = false;
    zero.block_size = 1;
    zero.weight_decay = 0.0;
    const auto log = train_fcn(p, data, zero);
    CHECK(trainable_params(p) == before);
    for (const auto& e : log)
      CHECK(e.mean_loss == doctest::Approx(log[0].mean_loss).epsilon(1e-12));
  }
  SUBCASE("mismatches are rejected") {
    FcnConfig c = small_fcn(16, 24);
    c.num_classes = 5;
    FcnParams p = build_fcn(c, 5);
    CHECK_THROWS_AS(train_fcn(p, data, plan), CompatibilityError);
    FcnParams q = build_fcn(small_fcn(24, 32), 5);
    CHECK_THROWS_AS(train_fcn(q, data, plan), CompatibilityError);
    FcnParams r = build_fcn(small_fcn(16, 24), 5);
    TrainPlan wrong = plan;
    wrong.stage = TrainStage::rnn;
    CHECK_THROWS_AS(train_fcn(r, data, wrong), ConfigError);
  }
}

TEST_CASE("overfitting twenty frames cuts the loss by 90%") {
  const VideoDataset data = render_dataset(1, 20, 16, 24, 9);
  FcnParams p = build_fcn(small_fcn(16, 24), 1);
  TrainPlan plan = TrainPlan::fcn_default();
  plan.phases = {{40, 3e-3}};
  plan.block_size = 1;
  plan.augment = false;
  plan.weight_decay = 0.0;
  const auto log = train_fcn(p, data, plan);
  INFO("first " << log.front().mean_loss << " last " << log.back().mean_loss);
  CHECK(log.back().mean_loss < 0.1 * log.front().mean_loss);
}

TEST_CASE("recurrent training stage") {
  const VideoDataset data = render_dataset(2, 7, 16, 24, 4);
  const FcnParams fcn = build_fcn(small_fcn(16, 24), 2);
  RnnConfig rc = RnnConfig::desk(CellKind::convlstm);
  rc.unroll = 3;
  TrainPlan plan = TrainPlan::rnn_default(CellKind::convlstm);
  plan.phases = {{2, 1e-3}};
  plan.block_size = 5;

  SUBCASE("the FCN stays bitwise frozen and the head moves") {
    FcnParams copy = fcn;
    const auto before = flat_params(copy);
    HeadParams h = build_head(rc, 1);
    const auto h0 = flat_params(h);
    train_rnn(h, fcn, data, plan);
    FcnParams after = fcn;
    CHECK(flat_params(after) == before);
    CHECK(flat_params(h) != h0);
  }
  SUBCASE("deterministic for both cells") {
    for (CellKind cell : {CellKind::simple, CellKind::convlstm}) {
      RnnConfig c = rc;
      c.cell = cell;
      HeadParams a = build_head(c, 1), b = build_head(c, 1);
      const TrainPlan p = [&] {
        TrainPlan q = TrainPlan::rnn_default(cell);
        q.phases = plan.phases;
        q.block_size = plan.block_size;
        return q;
      }();
      CHECK(train_rnn(a, fcn, data, p) == train_rnn(b, fcn, data, p));
      CHECK(flat_params(a) == flat_params(b));
    }
  }
  SUBCASE("lr = 0 leaves the head unchanged") {
    HeadParams h = build_head(rc, 1);
    const auto h0 = flat_params(h);
    TrainPlan zero = plan;
    zero.phases = {{2, 0.0}};
    zero.weight_decay = 0.0;
    train_rnn(h, fcn, data, zero);
    CHECK(flat_params(h) == h0);
  }
  SUBCASE("precomputed logits give the same gradients as recomputing the FCN") {
    const auto bundles = precompute_logits(fcn, data);
    HeadParams h = build_head(rc, 7);
    const std::vector<double> w = dataset_class_weights(data);
    const auto& seq = data.sequences[0];
    std::vector<LogitsBundle> fresh;
    std::vector<LabelMap> labels;
    for (int t = 0; t < 3; ++t) {
      fresh.push_back(fcn_forward(fcn, seq.frames[t].image, Phase::infer));
      labels.push_back(seq.frames[t].label);
    }
    const std::vector<LogitsBundle> cached(bundles[0].begin(), bundles[0].begin() + 3);
    const HeadState zero = init_state(rc, fcn.config.low_h(), fcn.config.low_w());
    BpttResult a = rnn_window(h, cached, labels, w, zero);
    BpttResult b = rnn_window(h, fresh, labels, w, zero);
    CHECK(a.loss == b.loss);
    CHECK(flat_params(a.grads) == flat_params(b.grads));
  }
  SUBCASE("head/FCN mismatch is rejected") {
    RnnConfig c = rc;
    c.input_channels = c.output_channels = 5;
    HeadParams h = build_head(c, 1);
    CHECK_THROWS_AS(train_rnn(h, fcn, data, plan), CompatibilityError);
    HeadParams g = build_head(rc, 1);
    CHECK_THROWS_AS(train_rnn(g, fcn, data, TrainPlan::fcn_default()), ConfigError);
  }
}

TEST_CASE("composite logits") {
  const FcnParams fcn = build_fcn(small_fcn(16, 24), 2);
  std::mt19937_64 rng(3);
  const LogitsBundle b = fcn_forward(fcn, random_tensor({1, 3, 16, 24}, rng, 0, 1), Phase::infer);
  const Tensor4 head = random_tensor(b.logits_low.shape(), rng);
  const Tensor4 rep = composite_logits(b, head, HeadMerge::replace, 16, 24);
  CHECK(rep == merge_logits(head, b.skip_logits, 16, 24));
  const Tensor4 add = composite_logits(b, head, HeadMerge::add, 16, 24);
  CHECK(add == merge_logits(head + b.logits_low, b.skip_logits, 16, 24));
  // Replacing with the FCN's own low logits reproduces the plain FCN output.
  CHECK(composite_logits(b, b.logits_low, HeadMerge::replace, 16, 24) == b.logits_full);
  CHECK_THROWS_AS(composite_logits(b, Tensor4({1, 4, 1, 1}), HeadMerge::add, 16, 24),
                  ContractViolation);
}
