#include "fedavg/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fedavg/error.hpp"
#include "fedavg/rng.hpp"

namespace fedavg {

std::size_t ClientDataset::feature_dim() const {
  for (const auto* part : {&train, &val, &test}) {
    if (!part->empty()) return part->front().features.size();
  }
  return 0;
}

PartitionSpec PartitionSpec::reference_default(std::uint64_t seed) {
  PartitionSpec spec;
  spec.seed = seed;
  spec.clients = {
      {"client1", 719, 219, {623, 48, 48}, {0.0}, 1.0, 3.0},
      {"client2", 2426, 1125, {2330, 48, 48}, {0.25}, 1.1, 3.0},
      {"client3", 287, 84, {191, 48, 48}, {-0.25}, 0.9, 3.0},
  };
  return spec;
}

void PartitionSpec::validate() const {
  if (feature_dim == 0) throw UsageError("feature_dim must be positive");
  if (!std::isfinite(class_mean_separation)) throw UsageError("class_mean_separation must be finite");
  if (clients.empty()) throw UsageError("partition spec has no clients");
  for (const auto& c : clients) {
    const std::string who = "client '" + c.client_id + "': ";
    if (c.client_id.empty()) throw UsageError("client with empty id");
    if (c.splits.total() != c.total) {
      throw UsageError(who + "split sizes sum to " + std::to_string(c.splits.total()) +
                       ", expected total " + std::to_string(c.total));
    }
    if (c.positives == 0 || c.positives >= c.total) {
      throw UsageError(who + "positive count must lie strictly between 0 and total");
    }
    if (c.feature_shift.size() > 1 && c.feature_shift.size() != feature_dim) {
      throw UsageError(who + "feature_shift must have 0, 1 or feature_dim entries");
    }
    if (!(c.feature_scale > 0.0) || !std::isfinite(c.feature_scale)) {
      throw UsageError(who + "feature_scale must be positive");
    }
    if (!std::isfinite(c.site_effect)) throw UsageError(who + "site_effect must be finite");
  }
  for (std::size_t i = 0; i < clients.size(); ++i) {
    for (std::size_t j = i + 1; j < clients.size(); ++j) {
      if (clients[i].client_id == clients[j].client_id) {
        throw UsageError("duplicate client id '" + clients[i].client_id + "'");
      }
    }
  }
}

namespace {

std::vector<double> shared_direction(std::size_t dim) {
  return std::vector<double>(dim, 1.0 / std::sqrt(static_cast<double>(dim)));
}

// Random unit vector orthogonal to `shared`; zero when dim == 1.
std::vector<double> site_axis(std::size_t dim, const std::vector<double>& shared,
                              std::uint64_t key) {
  std::vector<double> axis(dim, 0.0);
  if (dim < 2) return axis;
  CounterRng rng(key);
  double norm = 0.0;
  while (norm < 1e-6) {
    for (auto& v : axis) v = rng.normal();
    const double dot = std::inner_product(axis.begin(), axis.end(), shared.begin(), 0.0);
    for (std::size_t i = 0; i < dim; ++i) axis[i] -= dot * shared[i];
    norm = std::sqrt(std::inner_product(axis.begin(), axis.end(), axis.begin(), 0.0));
  }
  for (auto& v : axis) v /= norm;
  return axis;
}

}  // namespace

std::vector<ClientDataset> generate_synthetic(const PartitionSpec& spec) {
  spec.validate();
  const std::size_t dim = spec.feature_dim;
  const auto shared = shared_direction(dim);
  std::vector<ClientDataset> out;
  out.reserve(spec.clients.size());
  for (const auto& client : spec.clients) {
    const auto axis = site_axis(dim, shared, derive_seed(spec.seed, "site:" + client.client_id));
    CounterRng rng(derive_seed(spec.seed, "sample:" + client.client_id));
    std::vector<LabeledExample> examples;
    examples.reserve(client.total);
    for (std::size_t n = 0; n < client.total; ++n) {
      LabeledExample ex;
      ex.label = n < client.positives ? 1 : 0;
      const double sign = ex.label == 1 ? 0.5 : -0.5;
      ex.features.resize(dim);
      for (std::size_t i = 0; i < dim; ++i) {
        double x = rng.normal();
        x += sign * spec.class_mean_separation * shared[i];
        x += sign * client.site_effect * axis[i];
        double shift = 0.0;
        if (client.feature_shift.size() == 1) shift = client.feature_shift[0];
        else if (!client.feature_shift.empty()) shift = client.feature_shift[i];
        ex.features[i] = client.feature_scale * x + shift;
      }
      examples.push_back(std::move(ex));
    }
    out.push_back(split(client.client_id, std::move(examples), client.splits,
                        derive_seed(spec.seed, "split:" + client.client_id)));
  }
  return out;
}

ClientDataset split(std::string client_id, std::vector<LabeledExample> examples,
                    SplitCounts counts, std::uint64_t seed) {
  if (counts.total() != examples.size()) {
    throw UsageError("split counts sum to " + std::to_string(counts.total()) + " but " +
                     std::to_string(examples.size()) + " examples were given");
  }
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(seed);
  shuffle(std::span<std::size_t>(order), rng);

  ClientDataset ds;
  ds.client_id = std::move(client_id);
  ds.train.reserve(counts.train);
  ds.val.reserve(counts.val);
  ds.test.reserve(counts.test);
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto& ex = examples[order[k]];
    if (k < counts.train) ds.train.push_back(std::move(ex));
    else if (k < counts.train + counts.val) ds.val.push_back(std::move(ex));
    else ds.test.push_back(std::move(ex));
  }
  return ds;
}

ClientDataset combine(std::span<const ClientDataset> datasets, std::string client_id) {
  ClientDataset out;
  out.client_id = std::move(client_id);
  std::size_t dim = 0;
  for (const auto& ds : datasets) {
    const std::size_t d = ds.feature_dim();
    if (d == 0) continue;
    if (dim == 0) dim = d;
    if (d != dim) {
      throw StructuralError("cannot combine datasets of feature dimension " + std::to_string(dim) +
                            " and " + std::to_string(d) + " (client '" + ds.client_id + "')");
    }
  }
  for (const auto& ds : datasets) {
    out.train.insert(out.train.end(), ds.train.begin(), ds.train.end());
    out.val.insert(out.val.end(), ds.val.begin(), ds.val.end());
    out.test.insert(out.test.end(), ds.test.begin(), ds.test.end());
  }
  return out;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    fields.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

bool parse_double(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return false;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

}  // namespace

std::vector<LabeledExample> parse_csv(std::string_view text) {
  std::vector<LabeledExample> out;
  std::size_t line_no = 0;
  std::size_t columns = 0;
  bool first_row = true;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;

    const auto fields = split_fields(line);
    std::vector<double> values(fields.size());
    std::vector<bool> numeric(fields.size());
    for (std::size_t i = 0; i < fields.size(); ++i) numeric[i] = parse_double(fields[i], values[i]);

    if (first_row) {
      first_row = false;
      if (std::none_of(numeric.begin(), numeric.end(), [](bool b) { return b; })) continue;
    }
    const std::string where = "row " + std::to_string(line_no) + ": ";
    if (fields.size() < 2) throw DataError(where + "need at least one feature and a label", line_no);
    if (columns == 0) columns = fields.size();
    if (fields.size() != columns) {
      throw DataError(where + "expected " + std::to_string(columns) + " columns, found " +
                          std::to_string(fields.size()),
                      line_no);
    }
    LabeledExample ex;
    ex.features.resize(columns - 1);
    for (std::size_t i = 0; i + 1 < columns; ++i) {
      if (!numeric[i] || !std::isfinite(values[i])) {
        throw DataError(where + "feature column " + std::to_string(i + 1) + " is not a finite number ('" +
                            std::string(fields[i]) + "')",
                        line_no);
      }
      ex.features[i] = values[i];
    }
    const auto label = fields.back();
    if (label == "0") ex.label = 0;
    else if (label == "1") ex.label = 1;
    else throw DataError(where + "label must be 0 or 1, found '" + std::string(label) + "'", line_no);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<LabeledExample> load_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_csv(buf.str());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what(), e.row());
  }
}

std::string format_csv(std::span<const LabeledExample> examples) {
  std::string out;
  const std::size_t dim = examples.empty() ? 0 : examples.front().features.size();
  for (std::size_t i = 0; i < dim; ++i) out += "f" + std::to_string(i) + ",";
  out += "label\n";
  char buf[32];
  for (const auto& ex : examples) {
    for (double v : ex.features) {
      const auto res = std::to_chars(buf, buf + sizeof(buf), v);
      out.append(buf, res.ptr);
      out += ',';
    }
    out += ex.label == 1 ? "1\n" : "0\n";
  }
  return out;
}

void write_csv(const std::filesystem::path& path, std::span<const LabeledExample> examples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write dataset file " + path.string());
  const auto text = format_csv(examples);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("failed writing dataset file " + path.string());
}

}  // namespace fedavg
