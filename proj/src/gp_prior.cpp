#include "longimpute/gp_prior.hpp"

#include <algorithm>

namespace longimpute::gp {

const char* to_string(ComponentKind kind) {
  switch (kind) {
    case ComponentKind::SquaredExponential: return "se";
    case ComponentKind::Categorical: return "categorical";
    case ComponentKind::Interaction: return "interaction";
    case ComponentKind::BinaryProduct: return "binary_product";
  }
  return "?";
}

ComponentKind component_kind_from_string(const std::string& name) {
  if (name == "se") return ComponentKind::SquaredExponential;
  if (name == "categorical") return ComponentKind::Categorical;
  if (name == "interaction") return ComponentKind::Interaction;
  if (name == "binary_product") return ComponentKind::BinaryProduct;
  throw std::invalid_argument("unknown kernel component kind: " + name);
}

GramMatrix GramMatrix::factorize(Matrix values) {
  if (values.rows() != values.cols()) throw DimensionMismatch("Gram matrix must be square");
  if (!values.allFinite()) throw CholeskyFailure("Gram matrix has non-finite entries");
  Eigen::LLT<Matrix> llt(values);
  if (llt.info() != Eigen::Success) throw CholeskyFailure("Gram matrix is not positive definite");
  GramMatrix g;
  g.chol = llt.matrixL();
  g.values = std::move(values);
  return g;
}

GramMatrix GramMatrix::identity(Eigen::Index n) { return factorize(Matrix::Identity(n, n)); }

double GramMatrix::log_det() const { return 2.0 * chol.diagonal().array().log().sum(); }

Matrix GramMatrix::solve(const Matrix& rhs) const {
  Matrix y = chol.triangularView<Eigen::Lower>().solve(rhs);
  return chol.transpose().triangularView<Eigen::Upper>().solve(y);
}

namespace {

void expect_kind(std::span<const DescriptorKind> kinds, Eigen::Index col, DescriptorKind want,
                 const KernelComponent& c) {
  if (col < 0 || static_cast<std::size_t>(col) >= kinds.size()) {
    throw std::out_of_range(std::string(to_string(c.kind)) + " component references column " +
                            std::to_string(col) + " of " + std::to_string(kinds.size()));
  }
  if (kinds[static_cast<std::size_t>(col)] != want) {
    throw KindMismatch(std::string(to_string(c.kind)) + " component expects a " + longimpute::to_string(want) +
                       " column at " + std::to_string(col) + ", found " +
                       longimpute::to_string(kinds[static_cast<std::size_t>(col)]));
  }
}

}  // namespace

void check_component(const KernelComponent& c, std::span<const DescriptorKind> kinds) {
  if (c.uses_se()) {
    if (c.continuous.empty()) {
      throw std::invalid_argument(std::string(to_string(c.kind)) + " component needs continuous inputs");
    }
    if (c.log_lengthscales.size() != static_cast<Eigen::Index>(c.continuous.size())) {
      throw std::invalid_argument("one lengthscale per continuous input is required");
    }
    for (auto d : c.continuous) expect_kind(kinds, d, DescriptorKind::Continuous, c);
  }
  switch (c.kind) {
    case ComponentKind::Categorical:
    case ComponentKind::Interaction:
      expect_kind(kinds, c.factor, DescriptorKind::Categorical, c);
      break;
    case ComponentKind::BinaryProduct:
      expect_kind(kinds, c.factor, DescriptorKind::Binary, c);
      break;
    case ComponentKind::SquaredExponential:
      break;
  }
}

void check_spec(const KernelSpec& spec, std::span<const DescriptorKind> kinds) {
  if (spec.components.empty()) throw std::invalid_argument("kernel spec has no components");
  if (!(spec.jitter > 0.0)) throw std::invalid_argument("kernel jitter must be positive");
  for (const auto& c : spec.components) check_component(c, kinds);
}

Matrix component_sum(const KernelSpec& spec, const Matrix& X, std::span<const DescriptorKind> kinds) {
  Matrix out = Matrix::Zero(X.rows(), X.rows());
  for (const auto& c : spec.components) out += eval_component(c, X, kinds);
  return out;
}

GramMatrix eval_gram(const KernelSpec& spec, const Matrix& X, std::span<const DescriptorKind> kinds) {
  check_spec(spec, kinds);
  if (X.rows() < 1) throw DimensionMismatch("eval_gram needs at least one row");
  Matrix K = component_sum(spec, X, kinds);
  double diag = spec.jitter;
  if (spec.log_noise) diag += std::exp(*spec.log_noise);
  K.diagonal().array() += diag;
  return GramMatrix::factorize(std::move(K));
}

GramMatrix eval_gram_escalating(const KernelSpec& spec, const Matrix& X, std::span<const DescriptorKind> kinds) {
  KernelSpec s = spec;
  for (;;) {
    try {
      return eval_gram(s, X, kinds);
    } catch (const CholeskyFailure&) {
      if (s.jitter >= 1e-4 * (1.0 - 1e-12)) throw;
      s.jitter = std::min(s.jitter * 10.0, 1e-4);
    }
  }
}

KernelSpec default_kernel_spec(std::span<const DescriptorKind> kinds, std::optional<double> noise_variance) {
  std::vector<Eigen::Index> continuous;
  for (std::size_t q = 0; q < kinds.size(); ++q) {
    if (kinds[q] == DescriptorKind::Continuous) continuous.push_back(static_cast<Eigen::Index>(q));
  }
  const auto k = static_cast<Eigen::Index>(continuous.size());
  KernelSpec spec;
  if (!continuous.empty()) {
    spec.components.push_back({ComponentKind::SquaredExponential, continuous, -1, Eigen::VectorXd::Zero(k), 0.0});
  }
  for (std::size_t q = 0; q < kinds.size(); ++q) {
    const auto col = static_cast<Eigen::Index>(q);
    if (kinds[q] == DescriptorKind::Categorical) {
      spec.components.push_back({ComponentKind::Categorical, {}, col, Eigen::VectorXd(), 0.0});
      if (!continuous.empty()) {
        spec.components.push_back({ComponentKind::Interaction, continuous, col, Eigen::VectorXd::Zero(k), 0.0});
      }
    } else if (kinds[q] == DescriptorKind::Binary && !continuous.empty()) {
      spec.components.push_back({ComponentKind::BinaryProduct, continuous, col, Eigen::VectorXd::Zero(k), 0.0});
    }
  }
  if (noise_variance) spec.log_noise = std::log(*noise_variance);
  return spec;
}

std::vector<Matrix> kernel_parameters(const KernelSpec& spec) {
  std::vector<Matrix> out;
  for (const auto& c : spec.components) {
    out.push_back(Matrix::Constant(1, 1, c.log_variance));
    if (c.uses_se()) out.push_back(c.log_lengthscales);
  }
  if (spec.log_noise) out.push_back(Matrix::Constant(1, 1, *spec.log_noise));
  return out;
}

void set_kernel_parameters(KernelSpec& spec, std::span<const Matrix> params) {
  std::size_t i = 0;
  auto next = [&]() -> const Matrix& {
    if (i >= params.size()) throw DimensionMismatch("too few kernel parameters");
    return params[i++];
  };
  for (auto& c : spec.components) {
    c.log_variance = next()(0, 0);
    if (c.uses_se()) {
      const Matrix& l = next();
      if (l.size() != static_cast<Eigen::Index>(c.continuous.size())) {
        throw DimensionMismatch("lengthscale count mismatch");
      }
      c.log_lengthscales = l.reshaped();
    }
  }
  if (spec.log_noise) spec.log_noise = next()(0, 0);
  if (i != params.size()) throw DimensionMismatch("too many kernel parameters");
}

Var gram_var(ad::Tape& tape, const KernelSpec& spec, std::span<const Var> params, const Matrix& X,
             std::span<const DescriptorKind> kinds) {
  check_spec(spec, kinds);
  const Eigen::Index n = X.rows();
  if (n < 1) throw DimensionMismatch("gram_var needs at least one row");

  // Constant pairwise structure shared by all components.
  auto squared_diff = [&](Eigen::Index d) {
    Matrix m(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i; j < n; ++j) {
        const double diff = X(i, d) - X(j, d);
        m(i, j) = diff * diff;
        m(j, i) = m(i, j);
      }
    }
    return m;
  };
  auto indicator = [&](Eigen::Index col, bool binary) {
    Matrix m(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i; j < n; ++j) {
        const bool on = binary ? (X(i, col) == 1.0 && X(j, col) == 1.0) : X(i, col) == X(j, col);
        m(i, j) = on ? 1.0 : 0.0;
        m(j, i) = m(i, j);
      }
    }
    return m;
  };

  std::size_t p = 0;
  auto next = [&]() -> Var {
    if (p >= params.size()) throw DimensionMismatch("too few kernel parameters bound");
    return params[p++];
  };

  Var total;
  for (const auto& c : spec.components) {
    const Var variance = ad::exp(next());
    Var term;
    if (c.uses_se()) {
      const Var log_l = next();
      if (log_l.rows() != static_cast<Eigen::Index>(c.continuous.size())) {
        throw DimensionMismatch("bound lengthscale count mismatch");
      }
      Var dist;
      for (std::size_t k = 0; k < c.continuous.size(); ++k) {
        const Var inv_l2 = ad::exp(ad::scale(ad::slice_rows(log_l, static_cast<Eigen::Index>(k), 1), -2.0));
        const Var contrib = ad::scale(tape.constant(squared_diff(c.continuous[k])), inv_l2);
        dist = dist.valid() ? dist + contrib : contrib;
      }
      term = ad::exp(ad::scale(dist, -0.5));
    }
    if (c.kind == ComponentKind::Categorical || c.kind == ComponentKind::Interaction ||
        c.kind == ComponentKind::BinaryProduct) {
      const Var mask = tape.constant(indicator(c.factor, c.kind == ComponentKind::BinaryProduct));
      term = term.valid() ? ad::mul(mask, term) : mask;
    }
    term = ad::scale(term, variance);
    total = total.valid() ? total + term : term;
  }
  if (spec.log_noise) {
    total = total + ad::scale(tape.constant(Matrix::Identity(n, n)), ad::exp(next()));
  }
  if (p != params.size()) throw DimensionMismatch("too many kernel parameters bound");
  return total + tape.constant(Matrix::Identity(n, n) * spec.jitter);
}

double kl_posterior_vs_gp(const Matrix& mu, const Matrix& log_sigma, std::span<const GramMatrix> grams) {
  if (mu.rows() != log_sigma.rows() || mu.cols() != log_sigma.cols()) {
    throw DimensionMismatch("kl_posterior_vs_gp: mu and log_sigma shapes differ");
  }
  const Eigen::Index n = mu.rows();
  const Eigen::Index L = mu.cols();
  if (grams.size() != 1 && grams.size() != static_cast<std::size_t>(L)) {
    throw DimensionMismatch("need one shared Gram matrix or one per latent dimension");
  }
  double total = 0.0;
  for (Eigen::Index l = 0; l < L; ++l) {
    const GramMatrix& K = grams.size() == 1 ? grams[0] : grams[static_cast<std::size_t>(l)];
    if (K.n() != n) throw DimensionMismatch("Gram size does not match the number of rows");
    // diag(K^{-1})_i = || column i of L^{-1} ||^2
    const Matrix chol_inv = K.chol.triangularView<Eigen::Lower>().solve(Matrix::Identity(n, n));
    const Eigen::VectorXd inv_diag = chol_inv.colwise().squaredNorm().transpose();
    const Eigen::VectorXd var = (2.0 * log_sigma.col(l).array()).exp();
    const Eigen::VectorXd half_solve = chol_inv * mu.col(l);
    total += 0.5 * (inv_diag.dot(var) + half_solve.squaredNorm() - static_cast<double>(n) + K.log_det() -
                    2.0 * log_sigma.col(l).sum());
  }
  return total;
}

Var kl_standard_normal(Var mu, Var log_sigma) {
  if (mu.rows() != log_sigma.rows() || mu.cols() != log_sigma.cols()) {
    throw DimensionMismatch("kl_standard_normal: mu and log_sigma shapes differ");
  }
  const Var var = ad::exp(ad::scale(log_sigma, 2.0));
  const Var inner = ad::add_scalar(var + ad::square(mu) - ad::scale(log_sigma, 2.0), -1.0);
  return ad::scale(ad::sum(inner), 0.5);
}

Var kl_posterior_vs_gp(Var gram, Var mu, Var log_sigma) {
  const Matrix& K = gram.value();
  const Matrix& M = mu.value();
  const Matrix& LS = log_sigma.value();
  if (M.rows() != LS.rows() || M.cols() != LS.cols()) {
    throw DimensionMismatch("kl_posterior_vs_gp: mu and log_sigma shapes differ");
  }
  if (K.rows() != K.cols() || K.rows() != M.rows()) {
    throw DimensionMismatch("kl_posterior_vs_gp: Gram is " + std::to_string(K.rows()) + "x" +
                            std::to_string(K.cols()) + " for " + std::to_string(M.rows()) + " rows");
  }
  const GramMatrix factor = GramMatrix::factorize(K);
  const Eigen::Index n = M.rows();
  const auto L = static_cast<double>(M.cols());
  Matrix K_inv = factor.solve(Matrix::Identity(n, n));
  Matrix alpha = factor.solve(M);
  const Matrix var = (2.0 * LS.array()).exp().matrix();
  const Eigen::VectorXd inv_diag = K_inv.diagonal();

  const double value = 0.5 * ((inv_diag.transpose() * var).sum() + M.cwiseProduct(alpha).sum() -
                              static_cast<double>(n) * L + L * factor.log_det() - 2.0 * LS.sum());

  const auto ik = gram.id(), im = mu.id(), il = log_sigma.id();
  ad::Tape& tape = *gram.tape();
  return tape.push(Matrix::Constant(1, 1, value), {ik, im, il},
                   [ik, im, il, L, K_inv = std::move(K_inv), alpha = std::move(alpha), var](ad::Tape& tp,
                                                                                          std::size_t self) {
                     const double g = tp.grad(self)(0, 0);
                     if (tp.requires_grad(im)) tp.grad_mut(im) += g * alpha;
                     if (tp.requires_grad(il)) {
                       Matrix d = var.array().colwise() * K_inv.diagonal().array();
                       tp.grad_mut(il) += g * (d.array() - 1.0).matrix();
                     }
                     if (tp.requires_grad(ik)) {
                       const Eigen::VectorXd var_sum = var.rowwise().sum();
                       Matrix dK = L * K_inv - K_inv * var_sum.asDiagonal() * K_inv - alpha * alpha.transpose();
                       tp.grad_mut(ik) += 0.5 * g * dK;
                     }
                   });
}

Var kl_grouped_gp(Var group_gram, Var diag, std::span<const Eigen::Index> groups, Var mu, Var log_sigma) {
  const Matrix& Ks = group_gram.value();
  const Matrix& M = mu.value();
  const Matrix& LS = log_sigma.value();
  const Eigen::Index n = M.rows(), B = Ks.rows();
  if (M.rows() != LS.rows() || M.cols() != LS.cols()) throw DimensionMismatch("kl_grouped_gp: mu and log_sigma shapes differ");
  if (Ks.cols() != B || static_cast<Eigen::Index>(groups.size()) != n) throw DimensionMismatch("kl_grouped_gp: bad group layout");
  if (diag.rows() != 1 || diag.cols() != 1) throw DimensionMismatch("kl_grouped_gp: diag must be 1 x 1");
  const double d = diag.value()(0, 0);
  if (!(d > 0.0)) throw CholeskyFailure("kl_grouped_gp: diagonal term must be positive");

  Eigen::VectorXd count = Eigen::VectorXd::Zero(B);
  for (auto g : groups) {
    if (g < 0 || g >= B) throw DimensionMismatch("kl_grouped_gp: group index out of range");
    count(g) += 1.0;
  }
  if ((count.array() == 0.0).any()) throw DimensionMismatch("kl_grouped_gp: empty group");
  const Eigen::VectorXd root = count.cwiseSqrt();

  Matrix A = root.asDiagonal() * Ks * root.asDiagonal();
  A.diagonal().array() += d;
  const GramMatrix factor = GramMatrix::factorize(A);
  Matrix R = factor.solve(Matrix::Identity(B, B));
  R = 0.5 * (R + R.transpose());

  const auto L = M.cols();
  const Matrix var = (2.0 * LS.array()).exp().matrix();
  // a = U^T mu, w = U^T S U (diagonal, one column per latent dimension).
  Matrix a = Matrix::Zero(B, L), w = Matrix::Zero(B, L);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto g = groups[static_cast<std::size_t>(i)];
    a.row(g) += M.row(i);
    w.row(g) += var.row(i);
  }
  a = root.cwiseInverse().asDiagonal() * a;
  w = count.cwiseInverse().asDiagonal() * w;

  Eigen::VectorXd kinv_diag(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto g = groups[static_cast<std::size_t>(i)];
    kinv_diag(i) = R(g, g) / count(g) + (1.0 - 1.0 / count(g)) / d;
  }
  const Matrix Ra = R * a;
  const double quad = (a.cwiseProduct(Ra)).sum() + (M.squaredNorm() - a.squaredNorm()) / d;
  const double trace = (kinv_diag.transpose() * var).sum();
  const double log_det = factor.log_det() + static_cast<double>(n - B) * std::log(d);
  const double value = 0.5 * (trace + quad - static_cast<double>(n * L) + static_cast<double>(L) * log_det - 2.0 * LS.sum());

  // K^{-1} mu, needed for the mu gradient and the trace of G.
  Matrix kinv_mu = M / d;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto g = groups[static_cast<std::size_t>(i)];
    kinv_mu.row(i) += (Ra.row(g) - a.row(g) / d) / root(g);
  }

  const auto ik = group_gram.id(), id = diag.id(), im = mu.id(), il = log_sigma.id();
  std::vector<Eigen::Index> group_of(groups.begin(), groups.end());
  return group_gram.tape()->push(
      Matrix::Constant(1, 1, value), {ik, id, im, il},
      [=, R = std::move(R), a = std::move(a), w = std::move(w), var = std::move(var), kinv_mu = std::move(kinv_mu),
       kinv_diag = std::move(kinv_diag), group_of = std::move(group_of)](ad::Tape& tp, std::size_t self) {
        const double gv = tp.grad(self)(0, 0);
        const auto Ld = static_cast<double>(L);
        if (tp.requires_grad(im)) tp.grad_mut(im) += gv * kinv_mu;
        if (tp.requires_grad(il)) {
          tp.grad_mut(il) += gv * ((var.array().colwise() * kinv_diag.array()) - 1.0).matrix();
        }
        if (tp.requires_grad(ik)) {
          // Z^T G Z = 1/2 N^{1/2} (L R - R (sum_l W_l + a_l a_l^T) R) N^{1/2}
          Matrix inner = a * a.transpose();
          inner.diagonal() += w.rowwise().sum();
          const Matrix core = Ld * R - R * inner * R;
          tp.grad_mut(ik) += 0.5 * gv * (root.asDiagonal() * core * root.asDiagonal());
        }
        if (tp.requires_grad(id)) {
          // tr G = 1/2 (L tr K^{-1} - sum_i s_i (K^{-2})_ii - |K^{-1} mu|^2)
          const Matrix R2 = R * R;
          double weighted = 0.0;
          for (Eigen::Index i = 0; i < n; ++i) {
            const auto g = group_of[static_cast<std::size_t>(i)];
            weighted += var.row(i).sum() * (R2(g, g) / count(g) + (1.0 - 1.0 / count(g)) / (d * d));
          }
          const double tr_kinv = R.trace() + static_cast<double>(n - B) / d;
          tp.grad_mut(id)(0, 0) += 0.5 * gv * (Ld * tr_kinv - weighted - kinv_mu.squaredNorm());
        }
      });
}

Var kl_posterior_vs_gp(std::span<const Var> grams, Var mu, Var log_sigma) {
  if (grams.size() == 1) return kl_posterior_vs_gp(grams[0], mu, log_sigma);
  if (static_cast<Eigen::Index>(grams.size()) != mu.cols()) {
    throw DimensionMismatch("kl_posterior_vs_gp: " + std::to_string(grams.size()) + " Grams for " +
                            std::to_string(mu.cols()) + " latent dimensions");
  }
  Var total = kl_posterior_vs_gp(grams[0], ad::slice_cols(mu, 0, 1), ad::slice_cols(log_sigma, 0, 1));
  for (Eigen::Index l = 1; l < mu.cols(); ++l) {
    const auto k = static_cast<std::size_t>(l);
    total = total + kl_posterior_vs_gp(grams[k], ad::slice_cols(mu, l, 1), ad::slice_cols(log_sigma, l, 1));
  }
  return total;
}

}  // namespace longimpute::gp
