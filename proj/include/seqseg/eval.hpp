#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "seqseg/checkpoint.hpp"
#include "seqseg/dataset.hpp"

namespace seqseg {

/// counts[i * k + j] = pixels of true class i predicted as j.
struct ConfusionMatrix {
  int k = 0;
  std::vector<std::int64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int classes)
      : k(classes), counts(static_cast<std::size_t>(classes) * classes, 0) {}

  std::int64_t at(int i, int j) const { return counts[static_cast<std::size_t>(i) * k + j]; }
  std::int64_t& at(int i, int j) { return counts[static_cast<std::size_t>(i) * k + j]; }
  std::int64_t total() const;
  std::int64_t row_total(int i) const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;
};

/// Adds one count per pixel whose truth label is not 255. Throws
/// ContractViolation on a size mismatch and DataError on ids >= k or an
/// ignore value in the prediction.
void accumulate(ConfusionMatrix& cm, const LabelMap& truth, const LabelMap& pred);

/// trace / total. Throws DataError on an empty matrix.
double pixel_accuracy(const ConfusionMatrix& cm);

/// Row-normalised diagonal; rows with no pixels are nullopt.
std::vector<std::optional<double>> per_class_accuracy(const ConfusionMatrix& cm);

/// Row-normalised matrix; undefined rows are nullopt.
std::vector<std::optional<std::vector<double>>> row_normalized(const ConfusionMatrix& cm);

enum class ModelVariant { fcn, fcn_simple, fcn_convlstm };

std::string to_string(ModelVariant v);
ModelVariant parse_variant(const std::string& s);

struct EvalResult {
  std::string variant;
  ConfusionMatrix confusion;
  double accuracy = 0.0;
  std::vector<std::optional<double>> recalls;
  bool operator==(const EvalResult&) const = default;
};

/// Per-pixel argmax of the composite logits. Recurrent variants zero the
/// state at each sequence start and carry it through every frame.
/// Throws CompatibilityError when the model and data disagree on classes or
/// the checkpoint lacks the requested head.
EvalResult evaluate_model(const SegModel& model, ModelVariant variant,
                          const VideoDataset& data);

/// Predicted label maps for one sequence.
std::vector<LabelMap> predict_sequence(const SegModel& model, ModelVariant variant,
                                       const Sequence& seq);

/// Writes summary.csv, confusion_<variant>.csv and confusion_<variant>.svg per
/// result, plus comparison.svg when there are two or more results.
std::vector<std::filesystem::path> emit_report(const std::vector<EvalResult>& results,
                                               const std::filesystem::path& dir);

/// Parses summary.csv back into (variant, accuracy, recalls) rows; the
/// confusion field stays empty.
std::vector<EvalResult> read_summary_csv(const std::filesystem::path& path);

/// Parses a confusion_<variant>.csv back into its row-normalised values.
std::vector<std::optional<std::vector<double>>> read_confusion_csv(
    const std::filesystem::path& path);

}  // namespace seqseg
