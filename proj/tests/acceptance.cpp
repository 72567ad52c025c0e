// End-to-end acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance --workdir <dir> [--only 1,3,8]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "data_util.hpp"
#include "recurrent_oracles.hpp"
#include "render_oracle.hpp"
#include "seqseg/checkpoint.hpp"
#include "seqseg/eval.hpp"
#include "seqseg/gradcheck_suite.hpp"
#include "seqseg/run_config.hpp"
#include "seqseg/synthworld.hpp"
#include "seqseg/training.hpp"

using namespace seqseg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// ---- 1 ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto entries = run_gradcheck_suite({});
  const double secs = seconds_since(t0);
  bool ok = secs < 120.0;
  double worst = 0;
  std::string failed;
  for (const auto& e : entries) {
    ok &= e.passed;
    worst = std::max(worst, e.worst_rel_error);
    if (!e.passed) failed += " " + e.op;
  }
  return {ok, fmt("%.0f ops, worst rel error %.2e, %.1f s", double(entries.size()), worst, secs) +
                  (failed.empty() ? "" : "; failed:" + failed)};
}

// ---- 2 ---------------------------------------------------------------------------

Outcome convlstm_oracle() {
  using testing::random_tensor;
  double worst = 0;
  int instances = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    std::mt19937_64 rng(seed + 1000);
    RnnConfig c = testing::small_config(CellKind::convlstm);
    c.layers = 1;
    c.kernel_h = seed % 2 ? 3 : 5;
    c.kernel_w = seed % 3 ? 3 : 1;
    if (seed % 4 == 3) {
      c.peephole = PeepholeMode::per_element;
      c.state_h = 5;
      c.state_w = 6;
    }
    const OutputGatePeek peek = seed % 5 == 4 ? OutputGatePeek::old_state : OutputGatePeek::new_state;
    HeadParams p = build_head(c, seed);
    testing::randomize_head(p, rng, 0.8);
    const Tensor4 x = random_tensor({2, 3, 5, 6}, rng);
    const CellState prev{random_tensor({2, 3, 5, 6}, rng, -2.0, 2.0),
                         random_tensor({2, 3, 5, 6}, rng)};
    const CellState got = convlstm_step(p.lstm[0], x, prev, peek);
    const CellState want = testing::scalar_convlstm_step(p.lstm[0], x, prev, peek);
    worst = std::max({worst, max_abs_diff(got.s, want.s),
                      max_abs_diff(got.o, want.o)});
    ++instances;
  }
  return {instances >= 20 && worst < 1e-12,
          fmt("%.0f instances, max abs diff %.2e", instances, worst)};
}

// ---- 3, 4 --------------------------------------------------------------------------

Outcome carousel() {
  const auto r = testing::run_carousel(100, 7, 10);
  return {r.drift < 1e-6 && r.probe_error < 1e-6,
          fmt("state drift %.2e, probe gradient error %.2e over 100 steps", r.drift,
              r.probe_error)};
}

Outcome vanishing() {
  const auto r = testing::run_vanishing(50, 11);
  return {r.simple_ratio < 1e-6 && r.lstm_ratio > 1e-3,
          fmt("50-step ratios: simple %.2e, convlstm %.2e", r.simple_ratio, r.lstm_ratio)};
}

// ---- 5 ---------------------------------------------------------------------------

Outcome truncation() {
  double worst = 0;
  int cases = 0;
  for (CellKind kind : {CellKind::simple, CellKind::convlstm})
    for (std::size_t len = 1; len <= 5; ++len)
      for (std::uint64_t rep = 0; rep < 3; ++rep) {
        std::mt19937_64 rng(500 + 10 * len + rep);
        const RnnConfig c = testing::small_config(kind);
        HeadParams p = build_head(c, len + rep);
        testing::randomize_head(p, rng, 0.5);
        const auto frames = testing::random_frames(len, {1, 3, 4, 5}, rng);
        const auto probes = testing::random_frames(len, {1, 3, 4, 5}, rng);
        const BpttResult r =
            bptt_step(p, frames, init_state(c, 4, 5), testing::probe_loss(probes));
        const HeadParams full = testing::untruncated_grads(p, frames, probes);
        worst = std::max(worst, testing::max_param_diff(r.grads, full));
        ++cases;
      }
  return {worst < 1e-10, fmt("%.0f sequences of length 1..5, max gradient diff %.2e", cases, worst)};
}

// ---- 6 ---------------------------------------------------------------------------

Outcome block_sampling() {
  const double expected = 1.0 - std::pow(1.0 - 1.0 / 1000, 1000);
  const std::size_t frames = 10000;  // ten full blocks per seed
  double lo = 1, hi = 0, sum = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const double f = double(block_sample_frames(frames, 1000, seed).size()) / frames;
    lo = std::min(lo, f);
    hi = std::max(hi, f);
    sum += f;
  }
  return {lo >= 0.60 && hi <= 0.67,
          fmt("20 seeds: retention %.4f..%.4f, mean %.4f (expected %.4f)", lo, hi, sum / 20,
              expected)};
}

// ---- 7 ---------------------------------------------------------------------------

Outcome renderer_oracle() {
  std::mt19937_64 rng(77);
  const int h = 48, w = 64, frames = 50, per_frame = 200;
  int label_bad = 0, depth_bad = 0;
  double worst_rel = 0;
  for (int f = 0; f < frames; ++f) {
    const SceneSpec scene = build_scene(rng());
    const int len = 1 + static_cast<int>(rng() % 100);
    const CameraPose pose = random_walk_camera(scene, rng(), len).back();
    const RenderOutput r = render(scene, pose, h, w);
    for (int k = 0; k < per_frame; ++k) {
      const int y = static_cast<int>(rng() % h), x = static_cast<int>(rng() % w);
      const Vec3 dir = testing::oracle_direction(pose, h, w, y, x);
      const auto hit = testing::oracle_trace(scene, pose.position, dir);
      const std::uint8_t label = r.label.at(y, x);
      label_bad += std::find(hit.labels.begin(), hit.labels.end(), label) == hit.labels.end();
      const double d = r.depth[static_cast<std::size_t>(y) * w + x];
      if (std::isinf(hit.t) || std::isinf(d)) {
        depth_bad += std::isinf(hit.t) != std::isinf(d);
        continue;
      }
      const double rel = std::abs(d - hit.t) / hit.t;
      worst_rel = std::max(worst_rel, rel);
      depth_bad += rel > 1e-6;
    }
  }
  return {label_bad == 0 && depth_bad == 0,
          fmt("%.0f pixels over %.0f frames: %.0f label, %.0f depth mismatches", frames * per_frame,
              frames, label_bad, depth_bad) +
              fmt(", worst depth rel %.2e", worst_rel)};
}

// ---- 8 ---------------------------------------------------------------------------

Outcome headline(const fs::path& work, const std::vector<std::uint64_t>& seeds) {
  const auto t0 = Clock::now();
  int good = 0;
  std::string detail;
  for (std::uint64_t seed : seeds) {
    RunConfig c;
    c.set_seed(seed);
    const fs::path root = work / ("headline_" + std::to_string(seed));
    fs::remove_all(root);
    generate_dataset(c.synth, root);
    const VideoDataset train = load_split(root, "train");
    const VideoDataset test = load_split(root, "test");

    SegModel fcn;
    fcn.fcn = build_fcn(c.fcn, c.seed);
    const auto fcn_log = train_fcn(fcn.fcn, train, c.fcn_plan);
    std::vector<EvalResult> results{evaluate_model(fcn, ModelVariant::fcn, test)};
    for (CellKind cell : {CellKind::simple, CellKind::convlstm}) {
      SegModel m;
      m.fcn = fcn.fcn;
      RnnConfig rc = c.rnn;
      rc.cell = cell;
      m.head = build_head(rc, c.seed);
      train_rnn(*m.head, m.fcn, train, c.rnn_plan_for(cell));
      results.push_back(evaluate_model(
          m, cell == CellKind::simple ? ModelVariant::fcn_simple : ModelVariant::fcn_convlstm,
          test));
    }
    emit_report(results, root / "report");
    const double a = 100 * results[0].accuracy, s = 100 * results[1].accuracy,
                 l = 100 * results[2].accuracy;
    const bool ok = l - a >= 5.0 && s >= a;
    good += ok;
    std::printf("    seed %llu: fcn %.2f%%  fcn+simple %.2f%%  fcn+convlstm %.2f%%  "
                "(fcn loss %.3f -> %.3f) %s\n",
                static_cast<unsigned long long>(seed), a, s, l, fcn_log.front().mean_loss,
                fcn_log.back().mean_loss, ok ? "ok" : "miss");
    std::fflush(stdout);
    fs::remove_all(root / "train");
    fs::remove_all(root / "test");
  }
  const double minutes = seconds_since(t0) / 60;
  return {good >= 2, fmt("%.0f of %.0f seeds meet the ordering, %.1f min", good,
                         double(seeds.size()), minutes)};
}

// ---- 9 ---------------------------------------------------------------------------

Outcome overfit(const fs::path& work) {
  const VideoDataset data = testing::render_dataset(1, 20, 48, 64, 9);
  TrainPlan plan = TrainPlan::fcn_default();
  plan.phases = {{40, 3e-3}};
  plan.block_size = 1;
  plan.augment = false;
  plan.weight_decay = 0.0;
  std::string csv[2];
  double first = 0, last = 0;
  for (int run = 0; run < 2; ++run) {
    FcnParams p = build_fcn(FcnConfig::desk(), 1);
    const auto log = train_fcn(p, data, plan);
    first = log.front().mean_loss;
    last = log.back().mean_loss;
    const fs::path path = work / ("overfit_" + std::to_string(run) + ".csv");
    write_loss_csv(path, log);
    csv[run] = slurp(path);
  }
  const double drop = 1 - last / first;
  return {drop >= 0.9 && csv[0] == csv[1],
          fmt("loss %.4f -> %.4f (%.1f%% reduction)", first, last, 100 * drop) +
              (csv[0] == csv[1] ? ", loss CSV identical on rerun" : ", loss CSV differs on rerun")};
}

// ---- 10 --------------------------------------------------------------------------

Outcome round_trips(const fs::path& work) {
  std::string notes;
  bool ok = true;

  // checkpoint: save, load, save again
  SegModel m;
  m.fcn = build_fcn(FcnConfig::desk(), 3);
  std::mt19937_64 rng(3);
  for (auto& v : m.fcn.views())
    for (double& x : v.values) x += std::normal_distribution<double>(0, 0.1)(rng);
  m.head = build_head(RnnConfig::desk(CellKind::convlstm), 3);
  testing::randomize_head(*m.head, rng, 0.7);
  save_model(work / "a.ckpt", m);
  SegModel back = load_model(work / "a.ckpt");
  save_model(work / "b.ckpt", back);
  bool same = slurp(work / "a.ckpt") == slurp(work / "b.ckpt");
  auto va = m.fcn.views(), vb = back.fcn.views();
  for (std::size_t i = 0; i < va.size(); ++i)
    same &= std::equal(va[i].values.begin(), va[i].values.end(), vb[i].values.begin());
  auto ha = m.head->views(), hb = back.head->views();
  for (std::size_t i = 0; i < ha.size(); ++i)
    same &= std::equal(ha[i].values.begin(), ha[i].values.end(), hb[i].values.begin());
  ok &= same;
  notes += same ? "checkpoint bitwise" : "checkpoint differs";

  // dataset regeneration from the manifest
  SynthConfig sc;
  sc.train_sequences = 2;
  sc.test_sequences = 1;
  sc.frames_per_sequence = 8;
  sc.seed = 12;
  const fs::path d1 = work / "regen_a", d2 = work / "regen_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  generate_dataset(sc, d1);
  generate_dataset(read_manifest_config(d1 / "manifest.json"), d2);
  std::size_t files = 0, diff = 0;
  for (const auto& e : fs::recursive_directory_iterator(d1)) {
    if (!e.is_regular_file()) continue;
    ++files;
    diff += slurp(e.path()) != slurp(d2 / fs::relative(e.path(), d1));
  }
  ok &= diff == 0 && files > 0;
  notes += fmt(", %.0f of %.0f regenerated files identical", double(files - diff), double(files));

  // report CSV parse-back
  std::vector<EvalResult> results;
  for (int v = 0; v < 3; ++v) {
    EvalResult r;
    r.variant = to_string(static_cast<ModelVariant>(v));
    r.confusion = ConfusionMatrix(4);
    for (auto& c : r.confusion.counts) c = std::uniform_int_distribution<int>(0, 999)(rng);
    for (int j = 0; j < 4; ++j) r.confusion.at(3, j) = 0;  // an absent class
    r.accuracy = pixel_accuracy(r.confusion);
    r.recalls = per_class_accuracy(r.confusion);
    results.push_back(r);
  }
  emit_report(results, work / "report");
  const auto summary = read_summary_csv(work / "report" / "summary.csv");
  bool csv_ok = summary.size() == results.size();
  for (std::size_t i = 0; csv_ok && i < results.size(); ++i) {
    csv_ok &= summary[i].variant == results[i].variant &&
              summary[i].accuracy == results[i].accuracy &&
              summary[i].recalls == results[i].recalls;
    std::string name = results[i].variant;
    std::replace(name.begin(), name.end(), '+', '_');
    csv_ok &= read_confusion_csv(work / "report" / ("confusion_" + name + ".csv")) ==
              row_normalized(results[i].confusion);
  }
  ok &= csv_ok;
  notes += csv_ok ? ", report CSVs parse back equal" : ", report CSV mismatch";
  return {ok, notes};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  fs::path work = "acceptance_work";
  std::string only;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  app.add_option("--workdir", work, "scratch directory");
  app.add_option("--only", only, "comma-separated criterion numbers");
  app.add_option("--seeds", seeds, "seeds for the headline experiment");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  std::set<int> wanted;
  std::stringstream ss(only);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) wanted.insert(std::stoi(tok));

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"convlstm scalar oracle", convlstm_oracle},
      {"constant error carousel", carousel},
      {"vanishing gradient contrast", vanishing},
      {"truncated BPTT equivalence", truncation},
      {"block sampling retention", block_sampling},
      {"renderer oracle", renderer_oracle},
      {"headline ordering", [&] { return headline(work, seeds); }},
      {"overfit sanity", [&] { return overfit(work); }},
      {"format round trips", [&] { return round_trips(work); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d %s  %s: %s\n", n, o.pass ? "PASS" : "FAIL",
                criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
