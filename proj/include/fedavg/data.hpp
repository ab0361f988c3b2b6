#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fedavg {

struct LabeledExample {
  std::vector<double> features;
  int label = 0;  // 1 = positive class

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

/// Train/validation/test splits held by one client.
struct ClientDataset {
  std::string client_id;
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> val;
  std::vector<LabeledExample> test;

  // Dimension of the first example found in any split; 0 when all are empty.
  std::size_t feature_dim() const;
  std::size_t total() const { return train.size() + val.size() + test.size(); }
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;

  std::size_t total() const { return train + val + test; }
};

/// One client's share of a synthetic corpus.
struct ClientPartition {
  std::string client_id;
  std::size_t total = 0;
  std::size_t positives = 0;
  SplitCounts splits;
  // Affine map applied after sampling: x -> feature_scale * x + feature_shift.
  // An empty shift means zero; a single entry is broadcast to every feature.
  std::vector<double> feature_shift;
  double feature_scale = 1.0;
  // Class-dependent offset along an axis private to this client, modelling
  // acquisition artifacts that correlate with the label at one site only.
  double site_effect = 0.0;
};

struct PartitionSpec {
  std::size_t feature_dim = 16;
  // Distance between the two class means along the direction all clients share.
  double class_mean_separation = 2.0;
  std::vector<ClientPartition> clients;
  std::uint64_t seed = 0;

  // Three clients with the 719/2426/287 sizes, 219/1125/84 positives and the
  // 623-48-48 / 2330-48-48 / 191-48-48 splits of the reference study.
  static PartitionSpec reference_default(std::uint64_t seed = 0);

  // Throws UsageError on inconsistent counts or non-positive sizes.
  void validate() const;
};

std::vector<ClientDataset> generate_synthetic(const PartitionSpec& spec);

// Seeded shuffle followed by a contiguous train/val/test partition.
ClientDataset split(std::string client_id, std::vector<LabeledExample> examples,
                    SplitCounts counts, std::uint64_t seed);

// Concatenates splits in input order. Throws StructuralError on differing dims.
ClientDataset combine(std::span<const ClientDataset> datasets, std::string client_id = "combined");

// Parses feature columns followed by a 0/1 label column. A first row in which
// no field is numeric is taken as a header. Errors carry 1-based line numbers.
std::vector<LabeledExample> parse_csv(std::string_view text);
std::vector<LabeledExample> load_csv(const std::filesystem::path& path);

// Writes with a header row and shortest round-trip number formatting.
std::string format_csv(std::span<const LabeledExample> examples);
void write_csv(const std::filesystem::path& path, std::span<const LabeledExample> examples);

}  // namespace fedavg
