#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fedavg/data.hpp"
#include "fedavg/params.hpp"

namespace fedavg {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;
};

// Mann-Whitney AUROC via average ranks, so tied pairs count 1/2.
// UndefinedMetricError unless both classes are present.
double roc_auc(std::span<const double> scores, std::span<const int> labels);
inline double roc_auc(const ScoredSet& s) { return roc_auc(s.scores, s.labels); }

// Average precision with equal scores grouped into a single cut.
// UndefinedMetricError without positives.
double pr_auc(std::span<const double> scores, std::span<const int> labels);
inline double pr_auc(const ScoredSet& s) { return pr_auc(s.scores, s.labels); }

struct Evaluation {
  double auroc = 0.0;
  double auprc = 0.0;
};

ScoredSet score(const ParameterSet& params, std::span<const LabeledExample> examples);
Evaluation evaluate(const ParameterSet& params, std::span<const LabeledExample> examples);

struct NamedModel {
  std::string name;
  ParameterSet params;
};

struct NamedTestSet {
  std::string name;
  std::vector<LabeledExample> examples;
};

struct MetricsRow {
  std::string model_name;
  std::string test_set_name;
  double auroc = 0.0;
  double auprc = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

/// One row per (test set, model), test-set-major.
struct MetricsReport {
  std::vector<MetricsRow> rows;

  std::vector<std::string> model_names() const;
  std::vector<std::string> test_set_names() const;
  // Throws std::out_of_range when the cell is missing.
  const MetricsRow& at(const std::string& model, const std::string& test_set) const;
};

MetricsReport cross_eval_matrix(std::span<const NamedModel> models, std::span<const NamedTestSet> test_sets);

enum class Metric { auroc, auprc };

// Rows are test sets, columns are models; raw fractions at full precision.
std::string to_csv(const MetricsReport& report, Metric metric);
// Aligned markdown table in percent with two decimals.
std::string to_markdown(const MetricsReport& report, Metric metric);

// 0.9961 -> "99.61"
std::string format_percent(double fraction);

}  // namespace fedavg
