#include "coopuq/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "coopuq/rng.hpp"

namespace coopuq {

void Dataset::validate() const {
  if (x.rows() != y.rows()) throw std::invalid_argument("Dataset: x/y row mismatch");
  if (truth_mean.has_value() != truth_noise_var.has_value())
    throw std::invalid_argument("Dataset: truth_mean and truth_noise_var must come together");
  if (truth_mean && (truth_mean->rows() != x.rows() || truth_noise_var->rows() != x.rows()))
    throw std::invalid_argument("Dataset: truth column row mismatch");
}

namespace {

Dataset gen_sine(int n, double x_low, double x_high, std::uint64_t seed, bool heteroscedastic) {
  if (n < 1) throw std::invalid_argument("generator: n must be >= 1");
  if (!(x_low < x_high)) throw std::invalid_argument("generator: need x_low < x_high");
  Rng rng(seed);
  Dataset ds;
  ds.x.resize(n, 1);
  ds.y.resize(n, 1);
  ds.truth_mean = Matrix(n, 1);
  ds.truth_noise_var = Matrix(n, 1);
  for (int i = 0; i < n; ++i) {
    double x = rng.uniform(x_low, x_high);
    double f = x * std::sin(x);
    ds.x(i, 0) = x;
    (*ds.truth_mean)(i, 0) = f;
    if (heteroscedastic) {
      double e1 = rng.normal();
      double e2 = rng.normal();
      ds.y(i, 0) = f + 0.3 * x * e1 + 0.3 * e2;
      (*ds.truth_noise_var)(i, 0) = 0.09 * x * x + 0.09;
    } else {
      double e2 = rng.normal();
      ds.y(i, 0) = f + 0.5 * e2;
      (*ds.truth_noise_var)(i, 0) = 0.25;
    }
  }
  return ds;
}

}  // namespace

Dataset gen_heteroscedastic(int n, double x_low, double x_high, std::uint64_t seed) {
  return gen_sine(n, x_low, x_high, seed, true);
}

Dataset gen_homoscedastic(int n, double x_low, double x_high, std::uint64_t seed) {
  return gen_sine(n, x_low, x_high, seed, false);
}

namespace {

double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
  std::size_t a = cell.find_first_not_of(" \t");
  if (a == std::string::npos)
    throw ParseError("row " + std::to_string(row) + ", column " + std::to_string(col) +
                     ": empty cell");
  std::size_t b = cell.find_last_not_of(" \t");
  std::string trimmed = cell.substr(a, b - a + 1);
  const char* begin = trimmed.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0')
    throw ParseError("row " + std::to_string(row) + ", column " + std::to_string(col) +
                     ": non-numeric cell '" + trimmed + "'");
  return v;
}

}  // namespace

Dataset load_csv(const std::string& path, const std::vector<int>& target_columns, bool header) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open file '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (header && line_no == 1) continue;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) row.push_back(parse_cell(cell, line_no, ++col));
    if (width == 0) width = row.size();
    if (row.size() != width)
      throw ParseError("row " + std::to_string(line_no) + ": expected " + std::to_string(width) +
                       " cells, got " + std::to_string(row.size()));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("'" + path + "': no data rows");

  std::vector<bool> is_target(width, false);
  for (int t : target_columns) {
    if (t < 0 || static_cast<std::size_t>(t) >= width)
      throw std::invalid_argument("load_csv: target column " + std::to_string(t) +
                                  " out of range for " + std::to_string(width) + " columns");
    if (is_target[t])
      throw std::invalid_argument("load_csv: duplicate target column " + std::to_string(t));
    is_target[t] = true;
  }
  if (target_columns.empty()) throw std::invalid_argument("load_csv: no target columns given");
  if (target_columns.size() == width)
    throw std::invalid_argument("load_csv: all columns are targets, no features left");

  Dataset ds;
  ds.x.resize(rows.size(), width - target_columns.size());
  ds.y.resize(rows.size(), target_columns.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    Eigen::Index xi = 0;
    for (std::size_t c = 0; c < width; ++c)
      if (!is_target[c]) ds.x(r, xi++) = rows[r][c];
    for (std::size_t t = 0; t < target_columns.size(); ++t)
      ds.y(r, t) = rows[r][target_columns[t]];
  }
  return ds;
}

namespace {

void column_stats(const Matrix& m, Vector& mean, Vector& std) {
  mean = m.colwise().mean();
  std.resize(m.cols());
  double n = static_cast<double>(m.rows());
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    double var = (m.col(c).array() - mean[c]).square().sum() / n;
    double s = std::sqrt(var);
    std[c] = s < 1e-12 ? 1.0 : s;
  }
}

Matrix scale_columns(const Matrix& m, const Vector& mean, const Vector& std) {
  Matrix out = m;
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    out.col(c) = (m.col(c).array() - mean[c]) / std[c];
  return out;
}

}  // namespace

Scaler fit_scaler(const Dataset& train) {
  train.validate();
  if (train.n() == 0) throw std::invalid_argument("fit_scaler: empty dataset");
  Scaler s;
  column_stats(train.x, s.x_mean, s.x_std);
  column_stats(train.y, s.y_mean, s.y_std);
  return s;
}

Dataset apply_scaler(const Scaler& s, const Dataset& ds) {
  ds.validate();
  if (s.x_mean.size() != ds.x.cols() || s.y_mean.size() != ds.y.cols())
    throw std::invalid_argument("apply_scaler: scaler dimensions do not match dataset");
  Dataset out = ds;
  out.x = scale_columns(ds.x, s.x_mean, s.x_std);
  out.y = scale_columns(ds.y, s.y_mean, s.y_std);
  if (ds.truth_mean) out.truth_mean = scale_columns(*ds.truth_mean, s.y_mean, s.y_std);
  if (ds.truth_noise_var) {
    Matrix v = *ds.truth_noise_var;
    for (Eigen::Index c = 0; c < v.cols(); ++c) v.col(c) /= s.y_std[c] * s.y_std[c];
    out.truth_noise_var = v;
  }
  out.scaler = s;
  return out;
}

Matrix unscale_mean(const Scaler& s, const Matrix& mean_std) {
  if (mean_std.cols() != s.y_mean.size())
    throw std::invalid_argument("unscale_mean: column mismatch");
  Matrix out = mean_std;
  for (Eigen::Index c = 0; c < out.cols(); ++c)
    out.col(c) = mean_std.col(c).array() * s.y_std[c] + s.y_mean[c];
  return out;
}

Matrix unscale_variance(const Scaler& s, const Matrix& var_std) {
  if (var_std.cols() != s.y_mean.size())
    throw std::invalid_argument("unscale_variance: column mismatch");
  Matrix out = var_std;
  for (Eigen::Index c = 0; c < out.cols(); ++c)
    out.col(c) = var_std.col(c).array() * (s.y_std[c] * s.y_std[c]);
  return out;
}

namespace {

Dataset take_rows(const Dataset& ds, const std::vector<int>& idx, std::size_t from,
                  std::size_t count) {
  Dataset out;
  out.x.resize(count, ds.x.cols());
  out.y.resize(count, ds.y.cols());
  if (ds.truth_mean) out.truth_mean = Matrix(count, ds.truth_mean->cols());
  if (ds.truth_noise_var) out.truth_noise_var = Matrix(count, ds.truth_noise_var->cols());
  for (std::size_t i = 0; i < count; ++i) {
    int r = idx[from + i];
    out.x.row(i) = ds.x.row(r);
    out.y.row(i) = ds.y.row(r);
    if (ds.truth_mean) out.truth_mean->row(i) = ds.truth_mean->row(r);
    if (ds.truth_noise_var) out.truth_noise_var->row(i) = ds.truth_noise_var->row(r);
  }
  out.scaler = ds.scaler;
  return out;
}

}  // namespace

SplitResult split(const Dataset& ds, const SplitSpec& spec) {
  ds.validate();
  if (!(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0))
    throw std::invalid_argument("split: train_fraction out of range");
  if (!(spec.val_fraction >= 0.0 && spec.val_fraction < 1.0))
    throw std::invalid_argument("split: val_fraction out of range");
  if (spec.train_fraction + spec.val_fraction > 1.0 + 1e-12)
    throw std::invalid_argument("split: fractions exceed 1");
  std::size_t n = static_cast<std::size_t>(ds.n());
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(spec.seed);
  rng.shuffle(idx);
  std::size_t n_train = static_cast<std::size_t>(
      std::llround(spec.train_fraction * static_cast<double>(n)));
  std::size_t n_val =
      static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(n)));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);
  SplitResult out;
  out.train = take_rows(ds, idx, 0, n_train);
  out.val = take_rows(ds, idx, n_train, n_val);
  out.test = take_rows(ds, idx, n_train + n_val, n - n_train - n_val);
  return out;
}

Dataset concat_rows(const Dataset& a, const Dataset& b) {
  a.validate();
  b.validate();
  if (a.x.cols() != b.x.cols() || a.y.cols() != b.y.cols())
    throw std::invalid_argument("concat_rows: column mismatch");
  if (a.truth_mean.has_value() != b.truth_mean.has_value())
    throw std::invalid_argument("concat_rows: truth columns present in only one part");
  Dataset out;
  out.x.resize(a.n() + b.n(), a.x.cols());
  out.x << a.x, b.x;
  out.y.resize(a.n() + b.n(), a.y.cols());
  out.y << a.y, b.y;
  if (a.truth_mean) {
    Matrix tm(a.n() + b.n(), a.truth_mean->cols());
    tm << *a.truth_mean, *b.truth_mean;
    out.truth_mean = tm;
    Matrix tv(a.n() + b.n(), a.truth_noise_var->cols());
    tv << *a.truth_noise_var, *b.truth_noise_var;
    out.truth_noise_var = tv;
  }
  out.scaler = a.scaler;
  return out;
}

namespace {

Dataset grid_on(double lo, double hi, int n, bool heteroscedastic) {
  Dataset ds;
  ds.x.resize(n, 1);
  ds.y.resize(n, 1);
  ds.truth_mean = Matrix(n, 1);
  ds.truth_noise_var = Matrix(n, 1);
  for (int i = 0; i < n; ++i) {
    double x = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / (n - 1);
    double f = x * std::sin(x);
    ds.x(i, 0) = x;
    ds.y(i, 0) = f;
    (*ds.truth_mean)(i, 0) = f;
    (*ds.truth_noise_var)(i, 0) = heteroscedastic ? 0.09 * x * x + 0.09 : 0.25;
  }
  return ds;
}

}  // namespace

Dataset synthetic_grid_in_support(bool heteroscedastic) {
  return grid_on(0.0, 10.0, 1000, heteroscedastic);
}

Dataset synthetic_grid_extrapolation(bool heteroscedastic) {
  return concat_rows(grid_on(-4.0, 0.0, 500, heteroscedastic),
                     grid_on(10.0, 14.0, 500, heteroscedastic));
}

}  // namespace coopuq
