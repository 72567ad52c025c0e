// Command-line entry point: data generation, both training stages,
// evaluation, gradient checking and per-sequence inference.
//
// Exit codes: 0 ok, 1 check failure, 2 config, 3 I/O or data, 4 compatibility.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "seqseg/checkpoint.hpp"
#include "seqseg/dataset.hpp"
#include "seqseg/errors.hpp"
#include "seqseg/eval.hpp"
#include "seqseg/gradcheck_suite.hpp"
#include "seqseg/image_io.hpp"
#include "seqseg/run_config.hpp"
#include "seqseg/synthworld.hpp"
#include "seqseg/training.hpp"

namespace fs = std::filesystem;
using namespace seqseg;

namespace {

struct Args {
  std::string config;
  std::string out;
  std::string data;
  std::string init;
  std::string ckpt;
  std::string variant;
  std::string report;
  std::string seq;
  std::string cell;
  std::string split = "test";
  std::string fault;
  std::optional<std::uint64_t> seed;
};

RunConfig config_from(const Args& a) {
  RunConfig c = a.config.empty() ? parse_run_config(nlohmann::json::object())
                                 : load_run_config(a.config);
  if (a.seed) c.set_seed(*a.seed);
  return c;
}

std::string pick(const std::string& flag, const std::string& fallback, const char* name) {
  const std::string v = flag.empty() ? fallback : flag;
  if (v.empty()) throw ConfigError(std::string("missing required option ") + name);
  return v;
}

fs::path loss_csv_path(const fs::path& ckpt) { return fs::path(ckpt.string() + ".loss.csv"); }

void print_epoch(const EpochLog& e, int total) {
  std::printf("epoch %d/%d lr=%g loss=%.6f\n", e.epoch + 1, total, e.lr, e.mean_loss);
  std::fflush(stdout);
}

int cmd_gen_data(const Args& a) {
  RunConfig c = config_from(a);
  const fs::path out = pick(a.out, c.paths.data, "--out");
  const GenerateSummary s = generate_dataset(c.synth, out);
  std::printf("wrote %zu frames to %s\n", s.frames, out.string().c_str());
  for (int k = 0; k < kNumBridgeClasses; ++k)
    std::printf("  %-22s train=%lld test=%lld\n", class_name(k),
                static_cast<long long>(s.train_histogram[k]),
                static_cast<long long>(s.test_histogram[k]));
  std::printf("manifest=%s\n", (out / "manifest.json").string().c_str());
  return 0;
}

int cmd_train_fcn(const Args& a) {
  RunConfig c = config_from(a);
  const fs::path data = pick(a.data, c.paths.data, "--data");
  const fs::path out = pick(a.out, c.paths.out, "--out");
  const VideoDataset train = load_split(data, "train");
  if (train.height != c.fcn.input_h || train.width != c.fcn.input_w) {
    c.fcn.input_h = train.height;
    c.fcn.input_w = train.width;
    c.fcn.validate();
  }
  SegModel model;
  model.fcn = build_fcn(c.fcn, c.seed);
  std::printf("training fcn: %zu frames, %zu parameters\n", train.frame_count(),
              model.fcn.trainable_count());
  const int total = c.fcn_plan.total_epochs();
  const auto log =
      train_fcn(model.fcn, train, c.fcn_plan, [&](const EpochLog& e) { print_epoch(e, total); });
  save_model(out, model);
  write_loss_csv(loss_csv_path(out), log);
  std::printf("checkpoint=%s\n", out.string().c_str());
  return 0;
}

int cmd_train_rnn(const Args& a) {
  if (a.init.empty())
    throw ConfigError("train-rnn requires --init <fcn checkpoint>");
  RunConfig c = config_from(a);
  const fs::path data = pick(a.data, c.paths.data, "--data");
  const fs::path out = pick(a.out, c.paths.out, "--out");
  const CellKind cell = a.cell.empty() ? c.rnn.cell : parse_cell_kind(a.cell);
  SegModel model = load_model(a.init);
  model.head.reset();
  const VideoDataset train = load_split(data, "train");
  RnnConfig rc = c.rnn;
  rc.cell = cell;
  rc.input_channels = rc.output_channels = model.fcn.config.num_classes;
  if (rc.peephole == PeepholeMode::per_element) {
    rc.state_h = model.fcn.config.low_h();
    rc.state_w = model.fcn.config.low_w();
  }
  rc.validate();
  model.head = build_head(rc, c.seed);
  const TrainPlan plan = c.rnn_plan_for(cell);
  std::printf("training %s head on a frozen fcn: %zu frames\n", to_string(cell).c_str(),
              train.frame_count());
  const int total = plan.total_epochs();
  const auto log = train_rnn(*model.head, model.fcn, train, plan,
                             [&](const EpochLog& e) { print_epoch(e, total); });
  save_model(out, model);
  write_loss_csv(loss_csv_path(out), log);
  std::printf("checkpoint=%s\n", out.string().c_str());
  return 0;
}

ModelVariant variant_for(const SegModel& m, const std::string& flag) {
  if (!flag.empty()) return parse_variant(flag);
  if (!m.head) return ModelVariant::fcn;
  return m.head->config.cell == CellKind::simple ? ModelVariant::fcn_simple
                                                  : ModelVariant::fcn_convlstm;
}

int cmd_eval(const Args& a) {
  const std::string ckpt = pick(a.ckpt, "", "--ckpt");
  const std::string data = pick(a.data, "", "--data");
  if (a.split != "train" && a.split != "test") throw ConfigError("--split must be train or test");
  const SegModel model = load_model(ckpt);
  const ModelVariant variant = variant_for(model, a.variant);
  const VideoDataset set = load_split(data, a.split);
  const EvalResult r = evaluate_model(model, variant, set);
  std::printf("variant=%s frames=%zu\n", r.variant.c_str(), set.frame_count());
  for (int k = 0; k < r.confusion.k; ++k) {
    if (r.recalls[k])
      std::printf("  recall %-22s %.4f\n", class_name(k), *r.recalls[k]);
    else
      std::printf("  recall %-22s NA\n", class_name(k));
  }
  if (!a.report.empty()) {
    for (const auto& p : emit_report({r}, a.report)) std::printf("wrote %s\n", p.string().c_str());
  }
  std::printf("pixel_accuracy=%.8f\n", r.accuracy);
  return 0;
}

int cmd_gradcheck(const Args& a) {
  GradcheckOptions o;
  if (a.seed) o.seed = *a.seed;
  o.fault_op = a.fault;
  bool ok = true;
  for (const auto& e : run_gradcheck_suite(o)) {
    std::printf("%-20s worst_rel_error=%.3e checks=%zu %s\n", e.op.c_str(), e.worst_rel_error,
                e.checked, e.passed ? "ok" : "FAIL");
    ok = ok && e.passed;
  }
  std::printf("gradcheck %s (threshold %.0e)\n", ok ? "passed" : "failed", o.threshold);
  return ok ? 0 : 1;
}

const char* kPalette[] = {"#262626", "#d7263d", "#1b998b", "#f4a259"};

std::string label_color(std::uint8_t id) {
  return id < 4 ? kPalette[id] : "#ffffff";
}

// One panel of a strip: each row is drawn as runs of equal colour.
void svg_panel(std::ostringstream& s, int h, int w, double x0, double scale,
               const std::function<std::string(int, int)>& color) {
  for (int y = 0; y < h; ++y) {
    int x = 0;
    while (x < w) {
      const std::string c = color(y, x);
      int end = x + 1;
      while (end < w && color(y, end) == c) ++end;
      s << "<rect x=\"" << x0 + x * scale << "\" y=\"" << 20 + y * scale << "\" width=\""
        << (end - x) * scale << "\" height=\"" << scale << "\" fill=\"" << c << "\"/>\n";
      x = end;
    }
  }
}

std::string strip_svg(const Frame& f, const LabelMap& pred, const std::string& variant) {
  const int h = f.image.h(), w = f.image.w();
  const double scale = 4, gap = 8, pw = w * scale;
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << 3 * pw + 2 * gap
    << "\" height=\"" << h * scale + 20 << "\">\n";
  const char* titles[] = {"input", "truth", variant.c_str()};
  for (int p = 0; p < 3; ++p)
    s << "<text x=\"" << p * (pw + gap) << "\" y=\"14\" font-size=\"12\">" << titles[p]
      << "</text>\n";
  svg_panel(s, h, w, 0, scale, [&](int y, int x) {
    char buf[8];
    auto byte = [&](int c) {
      return static_cast<int>(std::lround(std::clamp(f.image(0, c, y, x), 0.0, 1.0) * 255));
    };
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", byte(0), byte(1), byte(2));
    return std::string(buf);
  });
  svg_panel(s, h, w, pw + gap, scale, [&](int y, int x) { return label_color(f.label.at(y, x)); });
  svg_panel(s, h, w, 2 * (pw + gap), scale,
            [&](int y, int x) { return label_color(pred.at(y, x)); });
  s << "</svg>\n";
  return s.str();
}

int cmd_infer(const Args& a) {
  const std::string ckpt = pick(a.ckpt, "", "--ckpt");
  const fs::path seq_dir = pick(a.seq, "", "--seq");
  const fs::path out = pick(a.out, "", "--out");
  const SegModel model = load_model(ckpt);
  const ModelVariant variant = variant_for(model, a.variant);
  if (!fs::is_directory(seq_dir)) throw IoError("sequence directory not found: " + seq_dir.string());
  const Sequence seq = load_sequence(seq_dir);
  const auto preds = predict_sequence(model, variant, seq);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create " + out.string());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "pred_%04zu.pgm", i);
    write_pgm(out / name, GrayImage8{preds[i].h, preds[i].w, preds[i].ids});
    std::snprintf(name, sizeof name, "strip_%04zu.svg", i);
    std::ofstream f(out / name, std::ios::binary);
    if (!f) throw IoError("cannot write " + (out / name).string());
    f << strip_svg(seq.frames[i], preds[i], to_string(variant));
  }
  std::printf("wrote %zu predictions to %s\n", preds.size(), out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video semantic segmentation with recurrent heads on synthetic bridge scenes"};
  app.require_subcommand(1);
  Args a;

  auto seed_opt = [&](CLI::App* c) {
    c->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { a.seed = s; }, "seed for every stochastic stage");
  };

  auto* gen = app.add_subcommand("gen-data", "render the synthetic dataset");
  gen->add_option("--config", a.config, "JSON run config");
  gen->add_option("--out", a.out, "dataset root");
  seed_opt(gen);

  auto* tf = app.add_subcommand("train-fcn", "train the FCN on individual frames");
  tf->add_option("--config", a.config, "JSON run config");
  tf->add_option("--data", a.data, "dataset root");
  tf->add_option("--out", a.out, "output checkpoint");
  seed_opt(tf);

  auto* tr = app.add_subcommand("train-rnn", "train a recurrent head on a frozen FCN");
  tr->add_option("--config", a.config, "JSON run config");
  tr->add_option("--data", a.data, "dataset root");
  tr->add_option("--out", a.out, "output checkpoint");
  tr->add_option("--init", a.init, "FCN checkpoint to start from (required)");
  tr->add_option("--cell", a.cell, "simple or convlstm");
  seed_opt(tr);

  auto* ev = app.add_subcommand("eval", "pixel accuracy and confusion report");
  ev->add_option("--ckpt", a.ckpt, "checkpoint");
  ev->add_option("--data", a.data, "dataset root");
  ev->add_option("--variant", a.variant, "fcn, fcn+simple or fcn+convlstm");
  ev->add_option("--report", a.report, "report directory");
  ev->add_option("--split", a.split, "train or test (default test)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  seed_opt(gc);
  gc->add_option("--inject-fault", a.fault, "")->group("");

  auto* in = app.add_subcommand("infer", "predict one sequence");
  in->add_option("--ckpt", a.ckpt, "checkpoint");
  in->add_option("--seq", a.seq, "sequence directory");
  in->add_option("--out", a.out, "output directory");
  in->add_option("--variant", a.variant, "fcn, fcn+simple or fcn+convlstm");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(a);
    if (*tf) return cmd_train_fcn(a);
    if (*tr) return cmd_train_rnn(a);
    if (*ev) return cmd_eval(a);
    if (*gc) return cmd_gradcheck(a);
    if (*in) return cmd_infer(a);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const CompatibilityError& e) {
    std::cerr << "incompatible: " << e.what() << "\n";
    return 4;
  } catch (const ContractViolation& e) {
    std::cerr << "incompatible: " << e.what() << "\n";
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
