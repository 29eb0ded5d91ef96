#pragma once

// Parameter structs <-> LMT records, one named record per weight and bias.

#include <string>
#include <vector>

#include "leafmask/errors.hpp"
#include "leafmask/io/lmt.hpp"
#include "leafmask/refine.hpp"

namespace leafmask::io {

// P is any parameter struct exposing visit(f) or visit(prefix, f).
template <class T, class P>
std::vector<LmtRecord> params_to_records(const P& params) {
  std::vector<LmtRecord> out;
  params.visit([&](const std::string& name, const Tensor<T>& t) { out.push_back({name, t}); });
  return out;
}

template <class T, class P>
std::vector<LmtRecord> params_to_records(const P& params, const std::string& prefix) {
  std::vector<LmtRecord> out;
  params.visit(prefix, [&](const std::string& name, const Tensor<T>& t) { out.push_back({name, t}); });
  return out;
}

// Fills every tensor of `params` from the record of the same name. Shapes
// must match the existing tensors.
template <class T, class P>
void load_params(const std::vector<LmtRecord>& records, P& params, const std::string& prefix) {
  params.visit(prefix, [&](const std::string& name, Tensor<T>& t) {
    const LmtRecord* r = find_record(records, name);
    if (!r) throw ValidationError("missing parameter '" + name + "'");
    if (r->shape() != t.shape())
      throw ShapeError("parameter '" + name + "' has shape " + to_string(r->shape()) + ", expected " +
                       to_string(t.shape()));
    t = r->as<T>();
  });
}

// Point predictor stored under "<prefix>.layer<i>.{weight,bias}"; the layer
// count and widths are read from the records.
template <class T>
PointPredictorParams<T> predictor_from_records(const std::vector<LmtRecord>& records,
                                               const std::string& prefix = "predictor") {
  PointPredictorParams<T> p;
  for (std::size_t i = 0;; ++i) {
    const std::string base = prefix + ".layer" + std::to_string(i);
    const LmtRecord* w = find_record(records, base + ".weight");
    if (!w) break;
    const LmtRecord* b = find_record(records, base + ".bias");
    if (!b) throw ValidationError("missing parameter '" + base + ".bias'");
    ConvParams<T> c;
    c.weight = w->as<T>();
    c.bias = b->as<T>();
    if (c.weight.rank() != 4 || c.weight.dim(2) != 1 || c.weight.dim(3) != 1)
      throw ShapeError("'" + base + ".weight' must be (out, in, 1, 1), got " + to_string(c.weight.shape()));
    if (c.bias.rank() != 1 || c.bias.dim(0) != c.weight.dim(0))
      throw ShapeError("'" + base + ".bias' does not match its weight");
    if (i > 0 && c.weight.dim(1) != p.layers.back().out_channels() + 1)
      throw ShapeError("'" + base + ".weight' expects " + std::to_string(c.weight.dim(1)) +
                       " inputs, previous layer gives " + std::to_string(p.layers.back().out_channels()) +
                       " plus the coarse logit");
    p.layers.push_back(std::move(c));
  }
  if (p.layers.empty()) throw ValidationError("no '" + prefix + ".layer0.weight' record");
  if (p.layers.back().out_channels() != 1) throw ShapeError("last predictor layer must emit 1 channel");
  return p;
}

}  // namespace leafmask::io
