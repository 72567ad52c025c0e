#include "seqseg/run_config.hpp"

#include <fstream>
#include <set>

#include "seqseg/errors.hpp"

namespace seqseg {

using nlohmann::json;

namespace {

void only_keys(const json& j, const std::string& where, std::set<std::string> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

template <typename E>
E enum_from(const json& j, const char* key, E fallback, const std::string& where,
            std::initializer_list<std::pair<const char*, E>> names) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_string()) throw ConfigError(where + "." + key + " must be a string");
  const std::string s = j.at(key).get<std::string>();
  for (const auto& [n, v] : names)
    if (s == n) return v;
  throw ConfigError("unknown value '" + s + "' for " + where + "." + key);
}

template <typename E>
std::string enum_name(E v, std::initializer_list<std::pair<const char*, E>> names) {
  for (const auto& [n, e] : names)
    if (e == v) return n;
  return "";
}

const std::initializer_list<std::pair<const char*, PeepholeMode>> kPeep = {
    {"per_channel", PeepholeMode::per_channel}, {"per_element", PeepholeMode::per_element}};
const std::initializer_list<std::pair<const char*, OutputGatePeek>> kPeek = {
    {"new_state", OutputGatePeek::new_state}, {"old_state", OutputGatePeek::old_state}};
const std::initializer_list<std::pair<const char*, HeadMerge>> kMerge = {
    {"replace", HeadMerge::replace}, {"add", HeadMerge::add}};
const std::initializer_list<std::pair<const char*, OptimizerKind>> kOpt = {
    {"adam", OptimizerKind::adam}, {"sgd", OptimizerKind::sgd}};
const std::initializer_list<std::pair<const char*, CellKind>> kCell = {
    {"simple", CellKind::simple}, {"convlstm", CellKind::convlstm}};

void parse_synth(const json& j, SynthConfig& c) {
  const std::string w = "synth";
  only_keys(j, w, {"train_sequences", "test_sequences", "frames_per_sequence", "height",
                   "width", "seed", "walk"});
  read(j, "train_sequences", c.train_sequences, w);
  read(j, "test_sequences", c.test_sequences, w);
  read(j, "frames_per_sequence", c.frames_per_sequence, w);
  read(j, "height", c.height, w);
  read(j, "width", c.width, w);
  read(j, "seed", c.seed, w);
  if (j.contains("walk")) {
    const json& k = j.at("walk");
    const std::string ww = "synth.walk";
    only_keys(k, ww, {"p_jump", "cycle_frames", "near_distance", "far_distance",
                      "position_noise", "angle_noise"});
    read(k, "p_jump", c.walk.p_jump, ww);
    read(k, "cycle_frames", c.walk.cycle_frames, ww);
    read(k, "near_distance", c.walk.near_distance, ww);
    read(k, "far_distance", c.walk.far_distance, ww);
    read(k, "position_noise", c.walk.position_noise, ww);
    read(k, "angle_noise", c.walk.angle_noise, ww);
  }
}

void parse_fcn(const json& j, FcnConfig& c) {
  const std::string w = "fcn";
  only_keys(j, w, {"num_classes", "stem_channels", "stem_kernel", "stages", "skip_taps",
                   "input_h", "input_w"});
  read(j, "num_classes", c.num_classes, w);
  read(j, "stem_channels", c.stem_channels, w);
  read(j, "stem_kernel", c.stem_kernel, w);
  read(j, "input_h", c.input_h, w);
  read(j, "input_w", c.input_w, w);
  read(j, "skip_taps", c.skip_taps, w);
  if (j.contains("stages")) {
    std::vector<std::array<int, 2>> stages;
    read(j, "stages", stages, w);
    c.stages.clear();
    for (const auto& s : stages) c.stages.push_back({s[0], s[1]});
  }
}

void parse_rnn(const json& j, RnnConfig& c) {
  const std::string w = "rnn";
  only_keys(j, w, {"cell", "layers", "kernel", "hidden", "unroll", "peephole", "output_peek",
                   "merge", "forget_bias"});
  c.cell = enum_from(j, "cell", c.cell, w, kCell);
  read(j, "layers", c.layers, w);
  read(j, "hidden", c.hidden, w);
  read(j, "unroll", c.unroll, w);
  read(j, "forget_bias", c.forget_bias, w);
  if (j.contains("kernel")) {
    std::array<int, 2> k{};
    read(j, "kernel", k, w);
    c.kernel_h = k[0];
    c.kernel_w = k[1];
  }
  c.peephole = enum_from(j, "peephole", c.peephole, w, kPeep);
  c.output_peek = enum_from(j, "output_peek", c.output_peek, w, kPeek);
  c.merge = enum_from(j, "merge", c.merge, w, kMerge);
}

void parse_plan(const json& j, TrainPlan& p, const std::string& w,
                std::optional<double>* clip_seen) {
  only_keys(j, w, {"phases", "batch_size", "weight_decay", "optimizer", "seed", "block_size",
                   "resample_each_epoch", "augment", "clip_norm", "log_wall_time", "adam"});
  if (j.contains("phases")) {
    std::vector<std::pair<int, double>> phases;
    read(j, "phases", phases, w);
    p.phases.clear();
    for (const auto& [e, lr] : phases) p.phases.push_back({e, lr});
  }
  read(j, "batch_size", p.batch_size, w);
  read(j, "weight_decay", p.weight_decay, w);
  p.optimizer = enum_from(j, "optimizer", p.optimizer, w, kOpt);
  read(j, "seed", p.seed, w);
  read(j, "block_size", p.block_size, w);
  read(j, "resample_each_epoch", p.resample_each_epoch, w);
  read(j, "augment", p.augment, w);
  read(j, "log_wall_time", p.log_wall_time, w);
  if (j.contains("clip_norm")) {
    read(j, "clip_norm", p.clip_norm, w);
    if (clip_seen) *clip_seen = p.clip_norm;
  }
  if (j.contains("adam")) {
    const json& a = j.at("adam");
    only_keys(a, w + ".adam", {"beta1", "beta2", "eps"});
    read(a, "beta1", p.adam.beta1, w + ".adam");
    read(a, "beta2", p.adam.beta2, w + ".adam");
    read(a, "eps", p.adam.eps, w + ".adam");
  }
}

json plan_json(const TrainPlan& p) {
  json phases = json::array();
  for (const auto& ph : p.phases) phases.push_back({ph.epochs, ph.lr});
  return {{"phases", phases},
          {"batch_size", p.batch_size},
          {"weight_decay", p.weight_decay},
          {"optimizer", enum_name(p.optimizer, kOpt)},
          {"seed", p.seed},
          {"block_size", p.block_size},
          {"resample_each_epoch", p.resample_each_epoch},
          {"augment", p.augment},
          {"clip_norm", p.clip_norm},
          {"log_wall_time", p.log_wall_time},
          {"adam", {{"beta1", p.adam.beta1}, {"beta2", p.adam.beta2}, {"eps", p.adam.eps}}}};
}

}  // namespace

TrainPlan RunConfig::rnn_plan_for(CellKind cell) const {
  TrainPlan p = rnn_plan;
  p.clip_norm = rnn_clip_norm ? *rnn_clip_norm : TrainPlan::rnn_default(cell).clip_norm;
  return p;
}

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  synth.seed = s;
  fcn_plan.seed = s;
  rnn_plan.seed = s;
}

void RunConfig::validate() const {
  fcn.validate();
  rnn.validate();
  fcn_plan.validate();
  rnn_plan.validate();
  if (synth.train_sequences < 0 || synth.test_sequences < 0 || synth.frames_per_sequence < 1 ||
      synth.height < 1 || synth.width < 1)
    throw ConfigError("synth: counts and resolution must be positive");
  if (rnn.input_channels != fcn.num_classes || rnn.output_channels != fcn.num_classes)
    throw ConfigError("rnn channels must equal fcn.num_classes");
}

RunConfig parse_run_config(const json& j) {
  only_keys(j, "config", {"seed", "synth", "fcn", "rnn", "train_fcn", "train_rnn", "paths"});
  RunConfig c;
  if (j.contains("seed")) {
    std::uint64_t s = 1;
    read(j, "seed", s, "config");
    c.set_seed(s);
  }
  if (j.contains("synth")) parse_synth(j.at("synth"), c.synth);
  // The FCN input follows the generated resolution unless set explicitly.
  c.fcn.input_h = c.synth.height;
  c.fcn.input_w = c.synth.width;
  if (j.contains("fcn")) parse_fcn(j.at("fcn"), c.fcn);
  c.rnn.input_channels = c.rnn.output_channels = c.fcn.num_classes;
  if (j.contains("rnn")) parse_rnn(j.at("rnn"), c.rnn);
  c.rnn.input_channels = c.rnn.output_channels = c.fcn.num_classes;
  if (j.contains("train_fcn")) parse_plan(j.at("train_fcn"), c.fcn_plan, "train_fcn", nullptr);
  if (j.contains("train_rnn"))
    parse_plan(j.at("train_rnn"), c.rnn_plan, "train_rnn", &c.rnn_clip_norm);
  c.fcn_plan.stage = TrainStage::fcn;
  c.rnn_plan.stage = TrainStage::rnn;
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    only_keys(p, "paths", {"data", "out", "report"});
    read(p, "data", c.paths.data, "paths");
    read(p, "out", c.paths.out, "paths");
    read(p, "report", c.paths.report, "paths");
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& c) {
  json stages = json::array();
  for (const auto& s : c.fcn.stages) stages.push_back({s.blocks, s.channels});
  json train_rnn = plan_json(c.rnn_plan);
  if (!c.rnn_clip_norm) train_rnn.erase("clip_norm");
  return {
      {"seed", c.seed},
      {"synth",
       {{"train_sequences", c.synth.train_sequences},
        {"test_sequences", c.synth.test_sequences},
        {"frames_per_sequence", c.synth.frames_per_sequence},
        {"height", c.synth.height},
        {"width", c.synth.width},
        {"seed", c.synth.seed},
        {"walk",
         {{"p_jump", c.synth.walk.p_jump},
          {"cycle_frames", c.synth.walk.cycle_frames},
          {"near_distance", c.synth.walk.near_distance},
          {"far_distance", c.synth.walk.far_distance},
          {"position_noise", c.synth.walk.position_noise},
          {"angle_noise", c.synth.walk.angle_noise}}}}},
      {"fcn",
       {{"num_classes", c.fcn.num_classes},
        {"stem_channels", c.fcn.stem_channels},
        {"stem_kernel", c.fcn.stem_kernel},
        {"stages", stages},
        {"skip_taps", c.fcn.skip_taps},
        {"input_h", c.fcn.input_h},
        {"input_w", c.fcn.input_w}}},
      {"rnn",
       {{"cell", enum_name(c.rnn.cell, kCell)},
        {"layers", c.rnn.layers},
        {"kernel", {c.rnn.kernel_h, c.rnn.kernel_w}},
        {"hidden", c.rnn.hidden},
        {"unroll", c.rnn.unroll},
        {"peephole", enum_name(c.rnn.peephole, kPeep)},
        {"output_peek", enum_name(c.rnn.output_peek, kPeek)},
        {"merge", enum_name(c.rnn.merge, kMerge)},
        {"forget_bias", c.rnn.forget_bias}}},
      {"train_fcn", plan_json(c.fcn_plan)},
      {"train_rnn", train_rnn},
      {"paths", {{"data", c.paths.data}, {"out", c.paths.out}, {"report", c.paths.report}}}};
}

}  // namespace seqseg
