#pragma once

#include <optional>
#include <string>
#include <vector>

#include "coopuq/common.hpp"

namespace coopuq {

// Per-column affine transform fit on training rows: value -> (value-mean)/std.
struct Scaler {
  Vector x_mean, x_std;
  Vector y_mean, y_std;
};

struct Dataset {
  Matrix x;  // N x d
  Matrix y;  // N x m
  std::optional<Matrix> truth_mean;
  std::optional<Matrix> truth_noise_var;
  std::optional<Scaler> scaler;  // set once standardized

  Eigen::Index n() const { return x.rows(); }
  Eigen::Index input_dim() const { return x.cols(); }
  Eigen::Index output_dim() const { return y.cols(); }
  void validate() const;
};

struct SplitSpec {
  double train_fraction = 0.8;
  double val_fraction = 0.0;
  std::uint64_t seed = 0;
};

// y = x sin(x) + 0.3 x e1 + 0.3 e2 with x uniform on [x_low, x_high];
// truth noise variance 0.09 x^2 + 0.09.
Dataset gen_heteroscedastic(int n, double x_low, double x_high, std::uint64_t seed);

// y = x sin(x) + 0.5 e2; truth noise variance 0.25 everywhere.
Dataset gen_homoscedastic(int n, double x_low, double x_high, std::uint64_t seed);

// Numeric comma-separated file. target_columns (0-based, in file order given)
// become y; all remaining columns become x. Throws ParseError with row and
// column context on malformed input.
Dataset load_csv(const std::string& path, const std::vector<int>& target_columns, bool header);

// Statistics from train only; never fit this on evaluation rows. Columns with
// (near) zero spread keep std 1 so constants pass through unchanged.
Scaler fit_scaler(const Dataset& train);
Dataset apply_scaler(const Scaler& s, const Dataset& ds);

// Inverse transforms for predictions made in standardized space.
Matrix unscale_mean(const Scaler& s, const Matrix& mean_std);
Matrix unscale_variance(const Scaler& s, const Matrix& var_std);

struct SplitResult {
  Dataset train, val, test;
};

// Seeded shuffle, then contiguous cut into train/val/test. Disjoint and
// exhaustive over rows.
SplitResult split(const Dataset& ds, const SplitSpec& spec);

// Row-wise concatenation; optional fields must be present in both or neither.
Dataset concat_rows(const Dataset& a, const Dataset& b);

// The fixed evaluation grids used by the synthetic experiments: 1000 evenly
// spaced in-support points on [0,10] and 1000 extrapolation points on
// [-4,0] and [10,14], with the generator's truth columns attached. y holds
// the noiseless function values; sample the generator on the same intervals
// when noisy targets are needed.
Dataset synthetic_grid_in_support(bool heteroscedastic);
Dataset synthetic_grid_extrapolation(bool heteroscedastic);

}  // namespace coopuq
