#pragma once

#include <string>
#include <vector>

#include "coopuq/common.hpp"
#include "coopuq/rng.hpp"

namespace coopuq {

enum class Activation { kTanh, kRelu };

// Link applied to one block of output columns. Softplus heads get a small
// additive floor so downstream code can divide by them safely.
enum class Link { kIdentity, kSoftplus };

inline constexpr double kPositiveFloor = 1e-6;

struct HeadSpec {
  std::string name;
  int dim = 1;
  Link link = Link::kIdentity;
};

// Dense feed-forward network: input -> hidden stack -> one linear output
// layer whose columns are split into named heads, each with its own link.
struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden;
  Activation activation = Activation::kTanh;
  std::vector<HeadSpec> heads;
  double dropout_rate = 0.0;

  int output_dim() const;
  int param_count() const;
  // [input_dim, hidden..., output_dim]
  std::vector<int> layer_widths() const;
  // Throws std::invalid_argument describing the first problem found.
  void validate() const;

  int head_index(const std::string& name) const;
  // First output column of head i.
  int head_offset(int head) const;
  const HeadSpec& head(const std::string& name) const;
};

// Weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero. Same seed, same
// spec -> bit-identical vector.
ParamVector init_params(const MlpSpec& spec, std::uint64_t seed);

// One inverted-dropout mask per hidden layer: entries are 0 with probability
// dropout_rate and 1/(1-dropout_rate) otherwise.
std::vector<Matrix> make_dropout_masks(const MlpSpec& spec, int rows, Rng& rng);

// Plain forward pass. Masks, when given, are applied to hidden activations;
// pass nullptr for a deterministic pass.
Matrix forward(const MlpSpec& spec, const ParamVector& params, const Matrix& x,
               const std::vector<Matrix>* masks = nullptr);

// Everything backward() needs to replay the pass.
struct ForwardTrace {
  std::vector<Matrix> acts;     // acts[0] = x, then post-activation (and mask) per hidden layer
  std::vector<Matrix> preacts;  // hidden pre-activations
  Matrix out_linear;            // pre-link output layer
  Matrix outputs;               // post-link
  std::vector<Matrix> masks;
};

ForwardTrace forward_trace(const MlpSpec& spec, const ParamVector& params, const Matrix& x,
                           const std::vector<Matrix>* masks = nullptr);

// Reverse-mode sweep: gradient of a scalar loss w.r.t. params, given the
// loss gradient w.r.t. the post-link outputs.
ParamVector backward(const MlpSpec& spec, const ParamVector& params, const ForwardTrace& trace,
                     const Matrix& d_outputs);

// Columns of a full output matrix belonging to one head.
Matrix head_block(const MlpSpec& spec, const Matrix& outputs, const std::string& name);

}  // namespace coopuq
