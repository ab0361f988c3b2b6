#include "fedavg/params.hpp"

#include <cmath>
#include <cstring>
#include <unordered_set>

#include "fedavg/error.hpp"

namespace fedavg {

ParameterSet::ParameterSet(std::vector<Layer> layers) : layers_(std::move(layers)) {
  std::unordered_set<std::string_view> seen;
  for (const auto& layer : layers_) {
    if (layer.name.empty()) throw StructuralError("parameter layer with empty name");
    if (!seen.insert(layer.name).second) {
      throw StructuralError("duplicate parameter layer '" + layer.name + "'");
    }
  }
}

std::size_t ParameterSet::value_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += layer.values.size();
  return n;
}

const Layer* ParameterSet::find(std::string_view name) const {
  for (const auto& layer : layers_) {
    if (layer.name == name) return &layer;
  }
  return nullptr;
}

bool ParameterSet::shape_compatible(const ParameterSet& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name != other.layers_[i].name ||
        layers_[i].values.size() != other.layers_[i].values.size()) {
      return false;
    }
  }
  return true;
}

void ParameterSet::validate() const {
  for (const auto& layer : layers_) {
    for (std::size_t i = 0; i < layer.values.size(); ++i) {
      if (!std::isfinite(layer.values[i])) {
        throw StructuralError("non-finite value in layer '" + layer.name + "' at index " +
                              std::to_string(i));
      }
    }
  }
}

bool operator==(const ParameterSet& a, const ParameterSet& b) {
  if (!a.shape_compatible(b)) return false;
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    const auto& x = a.layers_[i].values;
    const auto& y = b.layers_[i].values;
    if (!x.empty() && std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

void require_shape_compatible(const ParameterSet& a, const ParameterSet& b) {
  const auto& la = a.layers();
  const auto& lb = b.layers();
  const std::size_t common = std::min(la.size(), lb.size());
  for (std::size_t i = 0; i < common; ++i) {
    if (la[i].name != lb[i].name) {
      throw StructuralError("shape mismatch at layer " + std::to_string(i) + ": '" +
                            la[i].name + "' vs '" + lb[i].name + "'");
    }
    if (la[i].values.size() != lb[i].values.size()) {
      throw StructuralError("shape mismatch in layer '" + la[i].name + "': " +
                            std::to_string(la[i].values.size()) + " vs " +
                            std::to_string(lb[i].values.size()) + " values");
    }
  }
  if (la.size() != lb.size()) {
    const auto& extra = la.size() > lb.size() ? la[common] : lb[common];
    throw StructuralError("shape mismatch: layer '" + extra.name + "' present on one side only");
  }
}

ParameterSet zeros_like(const ParameterSet& p) {
  std::vector<Layer> out;
  out.reserve(p.layer_count());
  for (const auto& layer : p.layers()) {
    out.push_back({layer.name, std::vector<double>(layer.values.size(), 0.0)});
  }
  return ParameterSet(std::move(out));
}

ParameterSet add_scaled(const ParameterSet& a, const ParameterSet& b, double c) {
  require_shape_compatible(a, b);
  std::vector<Layer> out = a.layers();
  for (std::size_t l = 0; l < out.size(); ++l) {
    auto& dst = out[l].values;
    const auto& src = b.layer(l).values;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      // A zero increment leaves the element untouched, so -0.0 survives.
      const double inc = c * src[i];
      if (inc != 0.0) dst[i] += inc;
    }
  }
  return ParameterSet(std::move(out));
}

double l2_distance(const ParameterSet& a, const ParameterSet& b) {
  require_shape_compatible(a, b);
  double sum = 0.0;
  for (std::size_t l = 0; l < a.layer_count(); ++l) {
    const auto& x = a.layer(l).values;
    const auto& y = b.layer(l).values;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - y[i];
      sum += d * d;
    }
  }
  return std::sqrt(sum);
}

double l2_norm(const ParameterSet& p) { return l2_distance(p, zeros_like(p)); }

}  // namespace fedavg
