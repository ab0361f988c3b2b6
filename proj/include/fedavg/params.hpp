#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace fedavg {

struct Layer {
  std::string name;
  std::vector<double> values;
};

/// Ordered, named collection of weight vectors; the unit exchanged between the
/// server and its clients.
///
/// Layer names are unique and non-empty, checked on construction. Layer order
/// is canonical: it is fixed by whoever builds the set (the model definition)
/// and every reduction walks layers and elements in that order, so results
/// are bit-reproducible. Finiteness is not checked on construction; call
/// validate() where values cross a module boundary.
///
/// A ParameterSet is immutable once built. operator== compares values
/// bitwise, which is what the determinism guarantees are stated in.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(std::vector<Layer> layers);

  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t layer_count() const { return layers_.size(); }
  std::size_t value_count() const;
  bool empty() const { return layers_.empty(); }

  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  // nullptr when absent.
  const Layer* find(std::string_view name) const;

  // Identical name sequence and per-layer lengths.
  bool shape_compatible(const ParameterSet& other) const;

  // Throws StructuralError on the first non-finite value.
  void validate() const;

  // Moves the layers out, for building a modified copy without reallocating.
  std::vector<Layer> release() && { return std::move(layers_); }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b);

 private:
  std::vector<Layer> layers_;
};

// Throws StructuralError naming the first layer where a and b disagree.
void require_shape_compatible(const ParameterSet& a, const ParameterSet& b);

ParameterSet zeros_like(const ParameterSet& p);

// Element-wise a + c * b.
ParameterSet add_scaled(const ParameterSet& a, const ParameterSet& b, double c);

// Euclidean distance over the concatenation of all layers.
double l2_distance(const ParameterSet& a, const ParameterSet& b);

double l2_norm(const ParameterSet& p);

}  // namespace fedavg
