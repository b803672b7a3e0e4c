#pragma once

// Additive Gaussian-process prior over subject descriptors.
//
// Kernel inputs are an n x Q' matrix whose columns are descriptors (and
// optionally the event time), each with a DescriptorKind. Categorical
// columns hold category codes; binary columns hold 0/1.

#include "longimpute/autodiff.hpp"
#include "longimpute/core_types.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace longimpute::gp {

using ad::Matrix;
using ad::Var;

class KindMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CholeskyFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ComponentKind { SquaredExponential, Categorical, Interaction, BinaryProduct };

const char* to_string(ComponentKind kind);
ComponentKind component_kind_from_string(const std::string& name);

/// One additive covariance function. Hyperparameters live in log space:
/// variance = exp(log_variance), lengthscale_d = exp(log_lengthscales[d]).
///
///  SquaredExponential  s2 * exp(-1/2 sum_d (x_d - x'_d)^2 / l_d^2) over `continuous`
///  Categorical         s2 * [c == c'] on column `factor`
///  Interaction         Categorical(factor) * SE(continuous), one shared s2
///  BinaryProduct       s2 * [b = b' = 1] on column `factor`, times SE(continuous)
struct KernelComponent {
  ComponentKind kind = ComponentKind::SquaredExponential;
  std::vector<Eigen::Index> continuous;
  Eigen::Index factor = -1;
  Eigen::VectorXd log_lengthscales;
  double log_variance = 0.0;

  bool uses_se() const { return kind != ComponentKind::Categorical; }
};

/// Sum of components plus an optional trainable diagonal latent-noise term
/// (variance exp(log_noise)) and a fixed jitter on the diagonal.
struct KernelSpec {
  std::vector<KernelComponent> components;
  double jitter = 1e-6;
  std::optional<double> log_noise;
};

/// Evaluated n x n Gram matrix with its lower Cholesky factor.
struct GramMatrix {
  Matrix values;
  Matrix chol;

  Eigen::Index n() const { return values.rows(); }
  /// Factorizes `values`; throws CholeskyFailure if not positive definite.
  static GramMatrix factorize(Matrix values);
  static GramMatrix identity(Eigen::Index n);
  double log_det() const;
  /// K^{-1} B via two triangular solves.
  Matrix solve(const Matrix& rhs) const;
};

/// Throws KindMismatch (or std::out_of_range for bad indices) if the
/// component references columns of the wrong kind.
void check_component(const KernelComponent& c, std::span<const DescriptorKind> kinds);
void check_spec(const KernelSpec& spec, std::span<const DescriptorKind> kinds);

namespace detail {

template <typename A, typename B>
double se_value(const KernelComponent& c, const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& y) {
  double acc = 0.0;
  for (std::size_t k = 0; k < c.continuous.size(); ++k) {
    const auto d = c.continuous[k];
    const double diff = x(0, d) - y(0, d);
    acc += diff * diff * std::exp(-2.0 * c.log_lengthscales(static_cast<Eigen::Index>(k)));
  }
  return std::exp(-0.5 * acc);
}

template <typename A, typename B>
double component_value(const KernelComponent& c, const Eigen::MatrixBase<A>& x,
                       const Eigen::MatrixBase<B>& y) {
  const double s2 = std::exp(c.log_variance);
  switch (c.kind) {
    case ComponentKind::SquaredExponential:
      return s2 * se_value(c, x, y);
    case ComponentKind::Categorical:
      return x(0, c.factor) == y(0, c.factor) ? s2 : 0.0;
    case ComponentKind::Interaction:
      return x(0, c.factor) == y(0, c.factor) ? s2 * se_value(c, x, y) : 0.0;
    case ComponentKind::BinaryProduct:
      return (x(0, c.factor) == 1.0 && y(0, c.factor) == 1.0) ? s2 * se_value(c, x, y) : 0.0;
  }
  return 0.0;
}

}  // namespace detail

/// Component covariance between the rows of X1 and X2 (n1 x n2).
template <typename A, typename B>
Matrix eval_component(const KernelComponent& c, const Eigen::MatrixBase<A>& X1, const Eigen::MatrixBase<B>& X2,
                      std::span<const DescriptorKind> kinds) {
  check_component(c, kinds);
  Matrix out(X1.rows(), X2.rows());
  for (Eigen::Index i = 0; i < X1.rows(); ++i) {
    for (Eigen::Index j = 0; j < X2.rows(); ++j) out(i, j) = detail::component_value(c, X1.row(i), X2.row(j));
  }
  return out;
}

/// Component Gram matrix on the rows of X; the upper triangle is evaluated
/// and mirrored, so the result is exactly symmetric.
template <typename A>
Matrix eval_component(const KernelComponent& c, const Eigen::MatrixBase<A>& X, std::span<const DescriptorKind> kinds) {
  check_component(c, kinds);
  const Eigen::Index n = X.rows();
  Matrix out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      out(i, j) = detail::component_value(c, X.row(i), X.row(j));
      out(j, i) = out(i, j);
    }
  }
  return out;
}

/// Sum of component covariances between X1 and X2, without noise or jitter.
template <typename A, typename B>
Matrix cross_covariance(const KernelSpec& spec, const Eigen::MatrixBase<A>& X1, const Eigen::MatrixBase<B>& X2,
                        std::span<const DescriptorKind> kinds) {
  Matrix out = Matrix::Zero(X1.rows(), X2.rows());
  for (const auto& c : spec.components) out += eval_component(c, X1, X2, kinds);
  return out;
}

/// Sum of component Gram matrices, without noise or jitter.
Matrix component_sum(const KernelSpec& spec, const Matrix& X, std::span<const DescriptorKind> kinds);

/// Components + noise + jitter on the diagonal, factorized.
/// Throws CholeskyFailure when the matrix is not numerically SPD.
GramMatrix eval_gram(const KernelSpec& spec, const Matrix& X, std::span<const DescriptorKind> kinds);

/// eval_gram with jitter escalated x10 on failure, up to 1e-4.
GramMatrix eval_gram_escalating(const KernelSpec& spec, const Matrix& X, std::span<const DescriptorKind> kinds);

/// One SE over all continuous columns, one Categorical and one Interaction
/// per categorical column, one BinaryProduct per binary column; unit initial
/// hyperparameters. `noise_variance` adds the diagonal latent-noise term.
KernelSpec default_kernel_spec(std::span<const DescriptorKind> kinds, std::optional<double> noise_variance);

// Trainable hyperparameters, in component order: for each component a 1x1
// log-variance then (if it has an SE part) a k x 1 log-lengthscale column;
// finally the 1x1 log-noise if present.
std::vector<Matrix> kernel_parameters(const KernelSpec& spec);
void set_kernel_parameters(KernelSpec& spec, std::span<const Matrix> params);

/// Differentiable Gram matrix (components + noise + jitter) with respect to
/// `params` bound on the tape in kernel_parameters() order.
Var gram_var(ad::Tape& tape, const KernelSpec& spec, std::span<const Var> params, const Matrix& X,
             std::span<const DescriptorKind> kinds);

// KL divergences.

/// KL(N(mu, diag sigma^2) || N(0, I)) summed over all entries:
/// 1/2 sum(sigma^2 + mu^2 - 1 - log sigma^2).
template <typename A, typename B>
double kl_standard_normal(const Eigen::MatrixBase<A>& mu, const Eigen::MatrixBase<B>& log_sigma) {
  if (mu.rows() != log_sigma.rows() || mu.cols() != log_sigma.cols()) {
    throw DimensionMismatch("kl_standard_normal: mu and log_sigma shapes differ");
  }
  const auto ls = log_sigma.array();
  return 0.5 * ((2.0 * ls).exp() + mu.array().square() - 1.0 - 2.0 * ls).sum();
}

/// Sum over latent dimensions l of KL(N(mu_l, diag sigma_l^2) || N(0, K_l)),
/// where mu and log_sigma are n x L. `grams` holds one matrix shared by all
/// dimensions or one per dimension.
double kl_posterior_vs_gp(const Matrix& mu, const Matrix& log_sigma, std::span<const GramMatrix> grams);

/// Differentiable isotropic KL (summed).
Var kl_standard_normal(Var mu, Var log_sigma);

/// Differentiable GP-prior KL with a single Gram shared across latent
/// dimensions, with gradients for K, mu and log_sigma.
Var kl_posterior_vs_gp(Var gram, Var mu, Var log_sigma);

/// KL against N(0, K) for K = Z K_s Z^T + d I, where row i of mu belongs to
/// group groups[i] (0..B-1, every group non-empty), K_s = `group_gram` is
/// B x B and d = `diag` is 1 x 1. Exact, in O(n B + B^3): with
/// U = Z N^{-1/2} orthonormal, K^{-1} = U (N^{1/2} K_s N^{1/2} + d I)^{-1} U^T
/// + (I - U U^T) / d. The Gram is shared by all columns of mu.
Var kl_grouped_gp(Var group_gram, Var diag, std::span<const Eigen::Index> groups, Var mu, Var log_sigma);

/// As above with `grams` holding one Gram shared by every latent dimension
/// or one per dimension (column of mu).
Var kl_posterior_vs_gp(std::span<const Var> grams, Var mu, Var log_sigma);

}  // namespace longimpute::gp
