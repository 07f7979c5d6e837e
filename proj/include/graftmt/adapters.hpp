// Bottleneck adapters appended to the end of a transformer layer.
//
//   plain: z = gelu(W_d h)
//   glu:   z = 2 sigmoid(W_g h) * gelu(W_d h)
//   both:  h_out = tanh(W_u z) + h
//
// The doubled sigmoid gate is 1 at zero pre-activation, so a GLU adapter starts
// with the same bottleneck magnitude as the plain one. W_u starts at zero,
// making a freshly inserted adapter the identity map.
#pragma once

#include <string>

#include "graftmt/config.hpp"
#include "graftmt/layers.hpp"

namespace graftmt {

template <typename T>
struct AdapterParams {
  Tensor<T> down;  // W_d [d_model, d_hidden]
  Tensor<T> up;    // W_u [d_hidden, d_model]
  Tensor<T> gate;  // W_g [d_model, d_hidden], GLU only

  static AdapterParams bind(ParamTree<T>& tree, const std::string& prefix) {
    AdapterParams p;
    p.down = tree.at(prefix + "/down/weight");
    p.up = tree.at(prefix + "/up/weight");
    if (tree.contains(prefix + "/gate/weight")) p.gate = tree.at(prefix + "/gate/weight");
    return p;
  }
};

template <typename T>
Tensor<T> adapter_forward(Tape<T>& tape, const AdapterParams<T>& p, const AdapterConfig& config,
                          const Tensor<T>& h) {
  if (h.last_dim() != p.down.dim(0) || p.up.dim(1) != h.last_dim()) {
    throw DimensionError("adapter: hidden state " + shape_str(h.shape()) + " vs W_d " +
                         shape_str(p.down.shape()) + ", W_u " + shape_str(p.up.shape()));
  }
  auto z = gelu(tape, matmul(tape, h, p.down));
  if (config.kind == AdapterKind::kGlu) {
    if (!p.gate.defined()) throw StateError("adapter: GLU adapter without gate projection");
    auto gate = scale(tape, sigmoid(tape, matmul(tape, h, p.gate)), T(2));
    z = mul(tape, gate, z);
  }
  z = dropout(tape, z, config.dropout);
  return add(tape, tanh(tape, matmul(tape, z, p.up)), h);
}

}  // namespace graftmt
