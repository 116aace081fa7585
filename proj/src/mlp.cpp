#include "coopuq/mlp.hpp"

#include <cmath>
#include <set>

#include "coopuq/special.hpp"

namespace coopuq {

namespace {

// Offset of layer l's weight block in the flat parameter vector. Layout is
// W_0, b_0, W_1, b_1, ... with W_l stored as an (in x out) column-major block.
int layer_offset(const std::vector<int>& widths, int layer) {
  int off = 0;
  for (int l = 0; l < layer; ++l) off += widths[l] * widths[l + 1] + widths[l + 1];
  return off;
}

Matrix apply_activation(Activation act, const Matrix& z) {
  if (act == Activation::kTanh) return z.array().tanh();
  return z.cwiseMax(0.0);
}

Matrix activation_grad(Activation act, const Matrix& z) {
  if (act == Activation::kTanh) {
    Matrix t = z.array().tanh();
    return (1.0 - t.array().square()).matrix();
  }
  return (z.array() > 0.0).cast<double>();
}

}  // namespace

int MlpSpec::output_dim() const {
  int d = 0;
  for (const auto& h : heads) d += h.dim;
  return d;
}

std::vector<int> MlpSpec::layer_widths() const {
  std::vector<int> w;
  w.push_back(input_dim);
  for (int h : hidden) w.push_back(h);
  w.push_back(output_dim());
  return w;
}

int MlpSpec::param_count() const {
  auto w = layer_widths();
  int n = 0;
  for (std::size_t l = 0; l + 1 < w.size(); ++l) n += w[l] * w[l + 1] + w[l + 1];
  return n;
}

void MlpSpec::validate() const {
  if (input_dim <= 0) throw std::invalid_argument("MlpSpec: input_dim must be positive");
  for (int h : hidden)
    if (h <= 0) throw std::invalid_argument("MlpSpec: hidden widths must be positive");
  if (heads.empty()) throw std::invalid_argument("MlpSpec: at least one output head required");
  std::set<std::string> names;
  for (const auto& h : heads) {
    if (h.name.empty()) throw std::invalid_argument("MlpSpec: head name must be non-empty");
    if (h.dim <= 0) throw std::invalid_argument("MlpSpec: head '" + h.name + "' dim must be positive");
    if (!names.insert(h.name).second)
      throw std::invalid_argument("MlpSpec: duplicate head name '" + h.name + "'");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
    throw std::invalid_argument("MlpSpec: dropout_rate must be in [0, 1)");
}

int MlpSpec::head_index(const std::string& name) const {
  for (std::size_t i = 0; i < heads.size(); ++i)
    if (heads[i].name == name) return static_cast<int>(i);
  throw std::invalid_argument("MlpSpec: no head named '" + name + "'");
}

int MlpSpec::head_offset(int head) const {
  int off = 0;
  for (int i = 0; i < head; ++i) off += heads[i].dim;
  return off;
}

const HeadSpec& MlpSpec::head(const std::string& name) const { return heads[head_index(name)]; }

ParamVector init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  auto widths = spec.layer_widths();
  ParamVector p = ParamVector::Zero(spec.param_count());
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    int off = layer_offset(widths, static_cast<int>(l));
    double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    int n_w = widths[l] * widths[l + 1];
    for (int i = 0; i < n_w; ++i) p[off + i] = rng.uniform(-bound, bound);
    // biases stay zero
  }
  return p;
}

std::vector<Matrix> make_dropout_masks(const MlpSpec& spec, int rows, Rng& rng) {
  if (spec.dropout_rate <= 0.0)
    throw std::invalid_argument("make_dropout_masks: spec has no dropout");
  double keep = 1.0 - spec.dropout_rate;
  double scale = 1.0 / keep;
  std::vector<Matrix> masks;
  masks.reserve(spec.hidden.size());
  for (int h : spec.hidden) {
    Matrix m(rows, h);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < h; ++c) m(r, c) = rng.uniform() < keep ? scale : 0.0;
    masks.push_back(std::move(m));
  }
  return masks;
}

namespace {

void check_forward_args(const MlpSpec& spec, const ParamVector& params, const Matrix& x,
                        const std::vector<Matrix>* masks) {
  spec.validate();
  if (x.cols() != spec.input_dim)
    throw std::invalid_argument("forward: input has " + std::to_string(x.cols()) +
                                " columns, spec expects " + std::to_string(spec.input_dim));
  if (params.size() != spec.param_count())
    throw std::invalid_argument("forward: parameter vector has wrong length");
  if (masks != nullptr) {
    if (masks->size() != spec.hidden.size())
      throw std::invalid_argument("forward: expected one dropout mask per hidden layer");
    for (std::size_t l = 0; l < masks->size(); ++l)
      if ((*masks)[l].rows() != x.rows() || (*masks)[l].cols() != spec.hidden[l])
        throw std::invalid_argument("forward: dropout mask shape mismatch at layer " +
                                    std::to_string(l));
  }
}

}  // namespace

ForwardTrace forward_trace(const MlpSpec& spec, const ParamVector& params, const Matrix& x,
                           const std::vector<Matrix>* masks) {
  check_forward_args(spec, params, x, masks);
  auto widths = spec.layer_widths();
  int n_hidden = static_cast<int>(spec.hidden.size());
  ForwardTrace tr;
  tr.acts.reserve(n_hidden + 1);
  tr.preacts.reserve(n_hidden);
  tr.acts.push_back(x);
  if (masks != nullptr) tr.masks = *masks;

  for (int l = 0; l < n_hidden; ++l) {
    int off = layer_offset(widths, l);
    Eigen::Map<const Matrix> w(params.data() + off, widths[l], widths[l + 1]);
    Eigen::Map<const Vector> b(params.data() + off + widths[l] * widths[l + 1], widths[l + 1]);
    Matrix z = (tr.acts.back() * w).rowwise() + b.transpose();
    Matrix a = apply_activation(spec.activation, z);
    if (masks != nullptr) a = a.cwiseProduct((*masks)[l]);
    tr.preacts.push_back(std::move(z));
    tr.acts.push_back(std::move(a));
  }

  int out_l = n_hidden;
  int off = layer_offset(widths, out_l);
  Eigen::Map<const Matrix> w(params.data() + off, widths[out_l], widths[out_l + 1]);
  Eigen::Map<const Vector> b(params.data() + off + widths[out_l] * widths[out_l + 1],
                             widths[out_l + 1]);
  tr.out_linear = (tr.acts.back() * w).rowwise() + b.transpose();

  tr.outputs = tr.out_linear;
  for (std::size_t h = 0; h < spec.heads.size(); ++h) {
    if (spec.heads[h].link == Link::kSoftplus) {
      int c0 = spec.head_offset(static_cast<int>(h));
      for (int c = c0; c < c0 + spec.heads[h].dim; ++c)
        tr.outputs.col(c) = tr.out_linear.col(c).unaryExpr(
            [](double v) { return softplus(v) + kPositiveFloor; });
    }
  }
  return tr;
}

Matrix forward(const MlpSpec& spec, const ParamVector& params, const Matrix& x,
               const std::vector<Matrix>* masks) {
  return forward_trace(spec, params, x, masks).outputs;
}

ParamVector backward(const MlpSpec& spec, const ParamVector& params, const ForwardTrace& trace,
                     const Matrix& d_outputs) {
  if (d_outputs.rows() != trace.outputs.rows() || d_outputs.cols() != trace.outputs.cols())
    throw std::invalid_argument("backward: output gradient shape mismatch");
  auto widths = spec.layer_widths();
  int n_hidden = static_cast<int>(spec.hidden.size());
  ParamVector grad = ParamVector::Zero(params.size());

  // Through the links.
  Matrix delta = d_outputs;
  for (std::size_t h = 0; h < spec.heads.size(); ++h) {
    if (spec.heads[h].link == Link::kSoftplus) {
      int c0 = spec.head_offset(static_cast<int>(h));
      for (int c = c0; c < c0 + spec.heads[h].dim; ++c)
        delta.col(c) =
            delta.col(c).cwiseProduct(trace.out_linear.col(c).unaryExpr(&sigmoid));
    }
  }

  for (int l = n_hidden; l >= 0; --l) {
    int off = layer_offset(widths, l);
    int n_w = widths[l] * widths[l + 1];
    Eigen::Map<const Matrix> w(params.data() + off, widths[l], widths[l + 1]);
    Eigen::Map<Matrix> gw(grad.data() + off, widths[l], widths[l + 1]);
    Eigen::Map<Vector> gb(grad.data() + off + n_w, widths[l + 1]);

    gw = trace.acts[l].transpose() * delta;
    gb = delta.colwise().sum();

    if (l > 0) {
      Matrix upstream = delta * w.transpose();
      if (!trace.masks.empty()) upstream = upstream.cwiseProduct(trace.masks[l - 1]);
      delta = upstream.cwiseProduct(activation_grad(spec.activation, trace.preacts[l - 1]));
    }
  }
  return grad;
}

Matrix head_block(const MlpSpec& spec, const Matrix& outputs, const std::string& name) {
  int i = spec.head_index(name);
  return outputs.middleCols(spec.head_offset(i), spec.heads[i].dim);
}

}  // namespace coopuq
