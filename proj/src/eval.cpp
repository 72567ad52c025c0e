#include "seqseg/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "seqseg/errors.hpp"
#include "seqseg/ops.hpp"
#include "seqseg/parallel.hpp"
#include "seqseg/training.hpp"

namespace seqseg {

namespace fs = std::filesystem;

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

std::int64_t ConfusionMatrix::row_total(int i) const {
  std::int64_t t = 0;
  for (int j = 0; j < k; ++j) t += at(i, j);
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  SEQSEG_REQUIRE(other.k == k, "confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

void accumulate(ConfusionMatrix& cm, const LabelMap& truth, const LabelMap& pred) {
  SEQSEG_REQUIRE(truth.h == pred.h && truth.w == pred.w && truth.size() == pred.size(),
                 "accumulate: truth and prediction sizes differ");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const std::uint8_t t = truth.ids[i], p = pred.ids[i];
    if (p == kIgnoreLabel) throw DataError("prediction contains the ignore label");
    if (t == kIgnoreLabel) continue;
    if (t >= cm.k || p >= cm.k)
      throw DataError("label id outside [0, " + std::to_string(cm.k) + ")");
    ++cm.at(t, p);
  }
}

double pixel_accuracy(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total == 0) throw DataError("pixel accuracy of an empty confusion matrix");
  std::int64_t diag = 0;
  for (int i = 0; i < cm.k; ++i) diag += cm.at(i, i);
  return static_cast<double>(diag) / static_cast<double>(total);
}

std::vector<std::optional<double>> per_class_accuracy(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(cm.k);
  for (int i = 0; i < cm.k; ++i) {
    const std::int64_t row = cm.row_total(i);
    if (row > 0) out[i] = static_cast<double>(cm.at(i, i)) / static_cast<double>(row);
  }
  return out;
}

std::vector<std::optional<std::vector<double>>> row_normalized(const ConfusionMatrix& cm) {
  std::vector<std::optional<std::vector<double>>> out(cm.k);
  for (int i = 0; i < cm.k; ++i) {
    const std::int64_t row = cm.row_total(i);
    if (row == 0) continue;
    std::vector<double> r(cm.k);
    for (int j = 0; j < cm.k; ++j)
      r[j] = static_cast<double>(cm.at(i, j)) / static_cast<double>(row);
    out[i] = std::move(r);
  }
  return out;
}

std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::fcn: return "fcn";
    case ModelVariant::fcn_simple: return "fcn+simple";
    case ModelVariant::fcn_convlstm: return "fcn+convlstm";
  }
  return "fcn";
}

ModelVariant parse_variant(const std::string& s) {
  if (s == "fcn") return ModelVariant::fcn;
  if (s == "fcn+simple" || s == "simple") return ModelVariant::fcn_simple;
  if (s == "fcn+convlstm" || s == "convlstm") return ModelVariant::fcn_convlstm;
  throw ConfigError("unknown variant '" + s + "' (expected fcn|fcn+simple|fcn+convlstm)");
}

namespace {

void check_model(const SegModel& model, ModelVariant variant, int num_classes) {
  if (model.fcn.config.num_classes != num_classes)
    throw CompatibilityError("model predicts " + std::to_string(model.fcn.config.num_classes) +
                             " classes, data has " + std::to_string(num_classes));
  if (variant == ModelVariant::fcn) return;
  const CellKind want =
      variant == ModelVariant::fcn_simple ? CellKind::simple : CellKind::convlstm;
  if (!model.head)
    throw CompatibilityError("checkpoint has no recurrent head for variant " +
                             to_string(variant));
  if (model.head->config.cell != want)
    throw CompatibilityError("checkpoint head is " + to_string(model.head->config.cell) +
                             ", variant needs " + to_string(want));
}

LabelMap to_label_map(const Tensor4& logits) {
  LabelMap m(logits.h(), logits.w());
  m.ids = argmax_channels(logits);
  return m;
}

}  // namespace

std::vector<LabelMap> predict_sequence(const SegModel& model, ModelVariant variant,
                                       const Sequence& seq) {
  check_model(model, variant, model.fcn.config.num_classes);
  std::vector<LabelMap> out;
  HeadState state;
  const FcnConfig& fc = model.fcn.config;
  if (variant != ModelVariant::fcn) state = init_state(model.head->config, fc.low_h(), fc.low_w());
  for (const Frame& f : seq.frames) {
    if (f.image.h() != fc.input_h || f.image.w() != fc.input_w)
      throw CompatibilityError("frame size " + f.image.shape().str() +
                               " does not match the model input");
    const LogitsBundle b = fcn_forward(model.fcn, f.image, Phase::infer);
    if (variant == ModelVariant::fcn) {
      out.push_back(to_label_map(b.logits_full));
      continue;
    }
    const Tensor4 head_out = head_step(*model.head, b.logits_low, state);
    out.push_back(to_label_map(composite_logits(b, head_out, model.head->config.merge,
                                                f.image.h(), f.image.w())));
  }
  return out;
}

EvalResult evaluate_model(const SegModel& model, ModelVariant variant,
                          const VideoDataset& data) {
  check_model(model, variant, data.num_classes);
  std::vector<ConfusionMatrix> parts(data.sequences.size(), ConfusionMatrix(data.num_classes));
  parallel_for(data.sequences.size(), [&](std::size_t s) {
    const auto preds = predict_sequence(model, variant, data.sequences[s]);
    for (std::size_t i = 0; i < preds.size(); ++i)
      accumulate(parts[s], data.sequences[s].frames[i].label, preds[i]);
  });
  EvalResult r;
  r.variant = to_string(variant);
  r.confusion = ConfusionMatrix(data.num_classes);
  for (const auto& p : parts) r.confusion += p;
  r.accuracy = pixel_accuracy(r.confusion);
  r.recalls = per_class_accuracy(r.confusion);
  return r;
}

// ---- report -------------------------------------------------------------------

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string class_label(int k) {
  return k < kNumBridgeClasses ? class_name(k) : "class" + std::to_string(k);
}

std::string file_safe(const std::string& variant) {
  std::string s = variant;
  for (char& c : s)
    if (c == '+') c = '_';
  return s;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> parse_cell(const std::string& s, const fs::path& path) {
  if (s == "NA") return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("bad number '" + s + "' in " + path.string());
  }
}

// Heatmap of a row-normalised matrix; each cell is a rect whose fill opacity
// equals its value.
std::string heatmap_group(const EvalResult& r, double x0, double y0, double cell) {
  const auto rows = row_normalized(r.confusion);
  const int k = r.confusion.k;
  std::ostringstream s;
  s << "<g class=\"heatmap\" data-variant=\"" << r.variant << "\">\n";
  s << "<text x=\"" << x0 << "\" y=\"" << y0 - 28 << "\" font-size=\"14\">" << r.variant
    << " (accuracy " << num(std::round(r.accuracy * 1000) / 10) << "%)</text>\n";
  for (int j = 0; j < k; ++j)
    s << "<text x=\"" << x0 + (j + 0.5) * cell << "\" y=\"" << y0 - 6
      << "\" font-size=\"9\" text-anchor=\"middle\">" << class_label(j) << "</text>\n";
  for (int i = 0; i < k; ++i) {
    s << "<text x=\"" << x0 - 4 << "\" y=\"" << y0 + (i + 0.6) * cell
      << "\" font-size=\"9\" text-anchor=\"end\">" << class_label(i) << "</text>\n";
    for (int j = 0; j < k; ++j) {
      const double x = x0 + j * cell, y = y0 + i * cell;
      s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\""
        << cell << "\" data-row=\"" << i << "\" data-col=\"" << j << "\"";
      if (rows[i]) {
        const double v = (*rows[i])[j];
        s << " data-value=\"" << num(v) << "\" fill=\"#1f4e9c\" fill-opacity=\"" << num(v)
          << "\" stroke=\"#cccccc\"/>\n";
        s << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4
          << "\" font-size=\"11\" text-anchor=\"middle\" fill=\""
          << (v > 0.5 ? "#ffffff" : "#000000") << "\">" << std::lround(v * 100)
          << "</text>\n";
      } else {
        s << " data-value=\"NA\" fill=\"#eeeeee\" fill-opacity=\"1\" stroke=\"#cccccc\"/>\n";
      }
    }
  }
  s << "</g>\n";
  return s.str();
}

std::string svg_open(double w, double h) {
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << w
    << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << ' ' << h << "\">\n"
    << "<rect x=\"0\" y=\"0\" width=\"" << w << "\" height=\"" << h
    << "\" fill=\"#ffffff\"/>\n";
  return s.str();
}

}  // namespace

std::vector<fs::path> emit_report(const std::vector<EvalResult>& results, const fs::path& dir) {
  if (results.empty()) throw ConfigError("emit_report needs at least one result");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw IoError("cannot create report directory " + dir.string());
  std::vector<fs::path> written;
  const int k = results[0].confusion.k;
  for (const auto& r : results)
    if (r.confusion.k != k) throw ContractViolation("results have different class counts");

  std::ostringstream csv;
  csv << "variant,pixel_accuracy";
  for (int j = 0; j < k; ++j) csv << ",recall_" << class_label(j);
  csv << "\n";
  for (const auto& r : results) {
    csv << r.variant << ',' << num(r.accuracy);
    for (const auto& rec : r.recalls) csv << ',' << (rec ? num(*rec) : "NA");
    csv << "\n";
  }
  written.push_back(dir / "summary.csv");
  write_file(written.back(), csv.str());

  const double cell = 48, margin = 110;
  for (const auto& r : results) {
    std::ostringstream c;
    c << "true\\pred";
    for (int j = 0; j < k; ++j) c << ',' << class_label(j);
    c << "\n";
    const auto rows = row_normalized(r.confusion);
    for (int i = 0; i < k; ++i) {
      c << class_label(i);
      for (int j = 0; j < k; ++j) c << ',' << (rows[i] ? num((*rows[i])[j]) : "NA");
      c << "\n";
    }
    const std::string stem = "confusion_" + file_safe(r.variant);
    written.push_back(dir / (stem + ".csv"));
    write_file(written.back(), c.str());

    const double size = margin + k * cell + 20;
    std::string svg = svg_open(size, size);
    svg += heatmap_group(r, margin, margin - 40, cell);
    svg += "</svg>\n";
    written.push_back(dir / (stem + ".svg"));
    write_file(written.back(), svg);
  }

  if (results.size() >= 2) {
    const double panel = margin + k * cell + 20;
    const double bar_h = 160;
    const double w = panel * results.size();
    const double h = panel + bar_h + 40;
    std::ostringstream s;
    s << svg_open(w, h);
    for (std::size_t v = 0; v < results.size(); ++v)
      s << heatmap_group(results[v], v * panel + margin, margin - 40, cell);
    // Accuracy bars under the heatmaps.
    const double base = panel + bar_h;
    for (std::size_t v = 0; v < results.size(); ++v) {
      const double bh = results[v].accuracy * (bar_h - 20);
      const double x = v * panel + margin;
      s << "<rect class=\"accuracy\" x=\"" << x << "\" y=\"" << base - bh << "\" width=\""
        << k * cell << "\" height=\"" << bh << "\" data-variant=\"" << results[v].variant
        << "\" data-value=\"" << num(results[v].accuracy) << "\" fill=\"#d9822b\"/>\n";
      s << "<text x=\"" << x + k * cell / 2 << "\" y=\"" << base + 16
        << "\" font-size=\"12\" text-anchor=\"middle\">" << results[v].variant << ": "
        << num(std::round(results[v].accuracy * 1000) / 10) << "%</text>\n";
    }
    s << "</svg>\n";
    written.push_back(dir / "comparison.svg");
    write_file(written.back(), s.str());
  }
  return written;
}

std::vector<EvalResult> read_summary_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(f, line);
  const auto header = split_csv(line);
  if (header.size() < 2 || header[0] != "variant" || header[1] != "pixel_accuracy")
    throw DataError("unexpected summary header in " + path.string());
  std::vector<EvalResult> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size())
      throw DataError("summary row has " + std::to_string(cells.size()) + " fields in " +
                      path.string());
    EvalResult r;
    r.variant = cells[0];
    const auto acc = parse_cell(cells[1], path);
    if (!acc) throw DataError("missing accuracy in " + path.string());
    r.accuracy = *acc;
    for (std::size_t j = 2; j < cells.size(); ++j) r.recalls.push_back(parse_cell(cells[j], path));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::optional<std::vector<double>>> read_confusion_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(f, line);
  const std::size_t k = split_csv(line).size() - 1;
  std::vector<std::optional<std::vector<double>>> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != k + 1) throw DataError("confusion row width differs in " + path.string());
    std::vector<double> row;
    bool undefined = false;
    for (std::size_t j = 1; j < cells.size(); ++j) {
      const auto v = parse_cell(cells[j], path);
      if (!v) undefined = true;
      else row.push_back(*v);
    }
    if (undefined) out.emplace_back(std::nullopt);
    else out.emplace_back(std::move(row));
  }
  return out;
}

}  // namespace seqseg
