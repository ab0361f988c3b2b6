#include "fedavg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "fedavg/error.hpp"
#include "fedavg/nn.hpp"

namespace fedavg {

namespace {

void check_lengths(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw StructuralError("score and label vectors differ in length (" + std::to_string(scores.size()) +
                          " vs " + std::to_string(labels.size()) + ")");
  }
}

std::vector<std::size_t> order_by_score(std::span<const double> scores, bool descending) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return descending ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  return order;
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores, labels);
  const auto n = scores.size();
  const auto order = order_by_score(scores, false);

  // Twice the average rank of each tie group is first + last (1-based), an
  // integer, so the rank sum stays exact.
  std::uint64_t n_pos = 0;
  std::uint64_t pos_rank_sum_x2 = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t rank_x2 = (i + 1) + j;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        ++n_pos;
        pos_rank_sum_x2 += rank_x2;
      }
    }
    i = j;
  }
  const std::uint64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw UndefinedMetricError("AUROC needs at least one positive and one negative (have " +
                               std::to_string(n_pos) + " positive, " + std::to_string(n_neg) + " negative)");
  }
  // 2U = rank_sum_x2 - n_pos(n_pos+1)
  const std::uint64_t u_x2 = pos_rank_sum_x2 - n_pos * (n_pos + 1);
  return static_cast<double>(u_x2) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double pr_auc(std::span<const double> scores, std::span<const int> labels) {
  check_lengths(scores, labels);
  const auto total_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (total_pos == 0) throw UndefinedMetricError("AUPRC needs at least one positive example");

  const auto order = order_by_score(scores, true);
  const auto n = order.size();
  std::size_t tp = 0;
  std::size_t fp = 0;
  double ap = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    std::size_t group_pos = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] == 1) ++group_pos;
      else ++fp;
      ++j;
    }
    tp += group_pos;
    if (group_pos > 0) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      const double recall_step = static_cast<double>(group_pos) / static_cast<double>(total_pos);
      ap += precision * recall_step;
    }
    i = j;
  }
  return std::clamp(ap, 0.0, 1.0);
}

ScoredSet score(const ParameterSet& params, std::span<const LabeledExample> examples) {
  ScoredSet s;
  s.scores.reserve(examples.size());
  s.labels.reserve(examples.size());
  for (const auto& ex : examples) {
    s.scores.push_back(forward(params, ex.features));
    s.labels.push_back(ex.label);
  }
  return s;
}

Evaluation evaluate(const ParameterSet& params, std::span<const LabeledExample> examples) {
  const auto s = score(params, examples);
  return {roc_auc(s), pr_auc(s)};
}

std::vector<std::string> MetricsReport::model_names() const {
  std::vector<std::string> names;
  for (const auto& row : rows) {
    if (std::find(names.begin(), names.end(), row.model_name) == names.end()) names.push_back(row.model_name);
  }
  return names;
}

std::vector<std::string> MetricsReport::test_set_names() const {
  std::vector<std::string> names;
  for (const auto& row : rows) {
    if (std::find(names.begin(), names.end(), row.test_set_name) == names.end()) names.push_back(row.test_set_name);
  }
  return names;
}

const MetricsRow& MetricsReport::at(const std::string& model, const std::string& test_set) const {
  for (const auto& row : rows) {
    if (row.model_name == model && row.test_set_name == test_set) return row;
  }
  throw std::out_of_range("no metrics for model '" + model + "' on '" + test_set + "'");
}

MetricsReport cross_eval_matrix(std::span<const NamedModel> models, std::span<const NamedTestSet> test_sets) {
  MetricsReport report;
  report.rows.reserve(models.size() * test_sets.size());
  for (const auto& test : test_sets) {
    const auto n_pos = static_cast<std::size_t>(
        std::count_if(test.examples.begin(), test.examples.end(), [](const auto& e) { return e.label == 1; }));
    for (const auto& model : models) {
      const auto ev = evaluate(model.params, test.examples);
      report.rows.push_back({model.name, test.name, ev.auroc, ev.auprc, n_pos, test.examples.size() - n_pos});
    }
  }
  return report;
}

namespace {

double pick(const MetricsRow& row, Metric metric) { return metric == Metric::auroc ? row.auroc : row.auprc; }

std::string full_precision(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
  return buf;
}

std::string to_csv(const MetricsReport& report, Metric metric) {
  const auto models = report.model_names();
  std::string out = "data";
  for (const auto& m : models) out += "," + m;
  out += "\n";
  for (const auto& test : report.test_set_names()) {
    out += test;
    for (const auto& m : models) out += "," + full_precision(pick(report.at(m, test), metric));
    out += "\n";
  }
  return out;
}

std::string to_markdown(const MetricsReport& report, Metric metric) {
  const auto models = report.model_names();
  const auto tests = report.test_set_names();
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"Data"});
  cells.back().insert(cells.back().end(), models.begin(), models.end());
  for (const auto& test : tests) {
    std::vector<std::string> row{test};
    for (const auto& m : models) row.push_back(format_percent(pick(report.at(m, test), metric)));
    cells.push_back(std::move(row));
  }
  std::vector<std::size_t> width(models.size() + 1, 3);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  auto emit = [&](const std::vector<std::string>& row) {
    std::string line = "|";
    for (std::size_t c = 0; c < row.size(); ++c) {
      // first column left-aligned, numbers right-aligned
      const std::string pad(width[c] - row[c].size(), ' ');
      line += " " + (c == 0 ? row[c] + pad : pad + row[c]) + " |";
    }
    return line + "\n";
  };
  std::string out = emit(cells[0]);
  out += "|";
  for (std::size_t c = 0; c < width.size(); ++c) {
    out += c == 0 ? " " + std::string(width[c], '-') + " |" : " " + std::string(width[c] - 1, '-') + ": |";
  }
  out += "\n";
  for (std::size_t r = 1; r < cells.size(); ++r) out += emit(cells[r]);
  return out;
}

}  // namespace fedavg
