#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "seqseg/gradcheck_suite.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "seqseg_cli";

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  static int counter = 0;
  const fs::path log = kWork / ("log_" + std::to_string(counter++) + ".txt");
  const std::string cmd = std::string("\"") + SEQSEG_CLI_PATH + "\" " + args + " > \"" +
                          log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

std::string last_line(const std::string& s) {
  std::string t = s;
  while (!t.empty() && t.back() == '\n') t.pop_back();
  return t.substr(t.rfind('\n') + 1);
}

const char* kTinyConfig = R"({
  "seed": 3,
  "synth": {"train_sequences": 2, "test_sequences": 1, "frames_per_sequence": 6,
            "height": 16, "width": 24},
  "rnn": {"hidden": 4, "layers": 1},
  "train_fcn": {"phases": [[1, 0.001]], "batch_size": 4},
  "train_rnn": {"phases": [[1, 0.001]]}
})";

// Writes the config and a generated dataset once for the whole file.
struct Fixture {
  fs::path config, data;
  Fixture() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    config = kWork / "tiny.json";
    std::ofstream(config) << kTinyConfig;
    data = kWork / "data";
    const Run r = run("gen-data --config " + config.string() + " --out " + data.string());
    REQUIRE(r.code == 0);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST_CASE("gen-data") {
  const Fixture& f = fixture();
  CHECK(fs::exists(f.data / "test" / "seq_00000" / "frame_0005.ppm"));

  const fs::path again = kWork / "data_again";
  const Run r = run("gen-data --config " + f.config.string() + " --out " + again.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("manifest=") != std::string::npos);
  CHECK(slurp(again / "manifest.json") == slurp(f.data / "manifest.json"));

  const fs::path missing = kWork / "no" / "such" / "root";
  const Run bad = run("gen-data --config " + f.config.string() + " --out " + missing.string());
  CHECK(bad.code == 3);
  CHECK(bad.out.find((kWork / "no" / "such").string()) != std::string::npos);

  std::ofstream(kWork / "unknown.json") << R"({"synth": {"frames": 3}})";
  CHECK(run("gen-data --config " + (kWork / "unknown.json").string() + " --out " +
            (kWork / "u").string())
            .code == 2);
  std::ofstream(kWork / "broken.json") << "{";
  CHECK(run("gen-data --config " + (kWork / "broken.json").string() + " --out " +
            (kWork / "u").string())
            .code == 2);
  CHECK(run("gen-data --config " + (kWork / "absent.json").string() + " --out " +
            (kWork / "u").string())
            .code == 3);
  CHECK(run("no-such-command").code == 2);
}

TEST_CASE("train, eval and infer") {
  const Fixture& f = fixture();
  const std::string cfg = " --config " + f.config.string() + " --data " + f.data.string();
  const fs::path fcn = kWork / "fcn.bin";

  const Run t1 = run("train-fcn" + cfg + " --out " + fcn.string());
  REQUIRE(t1.code == 0);
  CHECK(t1.out.find("epoch 1/1") != std::string::npos);
  const std::string csv = slurp(fs::path(fcn.string() + ".loss.csv"));
  CHECK(run("train-fcn" + cfg + " --out " + fcn.string()).code == 0);
  CHECK(slurp(fs::path(fcn.string() + ".loss.csv")) == csv);

  const Run no_init = run("train-rnn" + cfg + " --out " + (kWork / "x.bin").string());
  CHECK(no_init.code == 2);
  CHECK(no_init.out.find("--init") != std::string::npos);
  CHECK(run("train-rnn" + cfg + " --out " + (kWork / "x.bin").string() + " --init " +
            (kWork / "absent.bin").string())
            .code == 3);

  const fs::path lstm = kWork / "lstm.bin";
  REQUIRE(run("train-rnn" + cfg + " --init " + fcn.string() + " --cell convlstm --out " +
              lstm.string())
              .code == 0);
  std::ofstream(kWork / "corrupt.bin") << "not a checkpoint";
  CHECK(run("train-rnn" + cfg + " --init " + (kWork / "corrupt.bin").string() +
            " --cell convlstm --out " + (kWork / "y.bin").string())
            .code == 4);

  SUBCASE("eval") {
    const fs::path report = kWork / "report";
    const Run e = run("eval --ckpt " + lstm.string() + " --data " + f.data.string() +
                      " --variant fcn+convlstm --report " + report.string());
    REQUIRE(e.code == 0);
    const std::string line = last_line(e.out);
    CHECK(line.rfind("pixel_accuracy=", 0) == 0);
    const double acc = std::stod(line.substr(15));
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    CHECK(fs::exists(report / "summary.csv"));
    CHECK(fs::exists(report / "confusion_fcn_convlstm.svg"));
    const Run again = run("eval --ckpt " + lstm.string() + " --data " + f.data.string() +
                          " --variant fcn+convlstm --report " + report.string());
    CHECK(last_line(again.out) == line);

    CHECK(run("eval --ckpt " + fcn.string() + " --data " + f.data.string() +
              " --variant fcn+simple --report " + report.string())
              .code == 4);
    CHECK(run("eval --ckpt " + fcn.string() + " --data " + f.data.string() +
              " --variant lstm --report " + report.string())
              .code == 2);
    CHECK(run("eval --ckpt " + fcn.string() + " --data " + (kWork / "nowhere").string() +
              " --variant fcn --report " + report.string())
              .code == 3);

    // a dataset at another resolution does not fit the checkpoint
    const fs::path wide_cfg = kWork / "wide.json";
    std::ofstream(wide_cfg) << R"({"synth": {"train_sequences": 0, "test_sequences": 1,
                                              "frames_per_sequence": 2, "height": 16, "width": 32}})";
    const fs::path wide = kWork / "wide";
    REQUIRE(run("gen-data --config " + wide_cfg.string() + " --out " + wide.string()).code == 0);
    CHECK(run("eval --ckpt " + fcn.string() + " --data " + wide.string() +
              " --variant fcn --report " + report.string())
              .code == 4);
  }
  SUBCASE("infer") {
    const fs::path seq = f.data / "test" / "seq_00000";
    const fs::path out = kWork / "infer";
    REQUIRE(run("infer --ckpt " + lstm.string() + " --seq " + seq.string() + " --out " +
                out.string() + " --variant fcn+convlstm")
                .code == 0);
    CHECK(fs::exists(out / "pred_0005.pgm"));
    CHECK(fs::exists(out / "strip_0005.svg"));
    const std::string pred = slurp(out / "pred_0003.pgm");
    const std::string strip = slurp(out / "strip_0003.svg");
    CHECK(run("infer --ckpt " + lstm.string() + " --seq " + seq.string() + " --out " +
              out.string() + " --variant fcn+convlstm")
              .code == 0);
    CHECK(slurp(out / "pred_0003.pgm") == pred);
    CHECK(slurp(out / "strip_0003.svg") == strip);
    CHECK(run("infer --ckpt " + lstm.string() + " --seq " + (kWork / "missing").string() +
              " --out " + out.string())
              .code == 3);
  }
}

TEST_CASE("gradcheck") {
  fs::create_directories(kWork);
  const Run ok = run("gradcheck --seed 1");
  CHECK(ok.code == 0);
  CHECK(last_line(ok.out).find("passed") != std::string::npos);
  for (const std::string& op : seqseg::gradcheck_op_names()) {
    std::size_t n = 0;
    for (std::size_t p = ok.out.find(op + " "); p != std::string::npos;
         p = ok.out.find(op + " ", p + 1))
      n += p == 0 || ok.out[p - 1] == '\n';
    CHECK_MESSAGE(n == 1, op);
  }
  const Run bad = run("gradcheck --seed 1 --inject-fault convlstm_step");
  CHECK(bad.code == 1);
  CHECK(bad.out.find("failed") != std::string::npos);
}
