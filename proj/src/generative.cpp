#include "longimpute/generative.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace longimpute::gen {

namespace {

using Rows = std::vector<std::pair<Eigen::Index, Eigen::Index>>;

constexpr double kClipNorm = 5.0;
constexpr std::uint64_t kValidationNoiseSalt = 0x9e3779b97f4a7c15ULL;

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix out(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) out(r, c) = n01(rng);
  }
  return out;
}

std::vector<Matrix> batch_noise(Eigen::Index B, Eigen::Index T, Eigen::Index L, std::mt19937_64& rng) {
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(T));
  for (Eigen::Index t = 0; t < T; ++t) out.push_back(gaussian(B, L, rng));
  return out;
}

std::vector<Eigen::Index> flat_indices(const Rows& rows, Eigen::Index B) {
  std::vector<Eigen::Index> out;
  out.reserve(rows.size());
  for (const auto& [b, t] : rows) out.push_back(t * B + b);
  return out;
}

Var masked_recon(std::span<const Var> y, std::span<const Var> y_hat, const Matrix& mask, double n_real) {
  if (y.size() != y_hat.size() || static_cast<Eigen::Index>(y.size()) != mask.cols()) {
    throw ad::ShapeMismatch("elbo: sequence lengths differ");
  }
  ad::Tape& tape = *y.front().tape();
  const Eigen::Index D = y.front().cols();
  std::vector<Var> terms;
  terms.reserve(y.size());
  for (std::size_t t = 0; t < y.size(); ++t) {
    const Matrix m = mask.col(static_cast<Eigen::Index>(t)).replicate(1, D);
    terms.push_back(ad::sum(ad::square(ad::mul(ad::sub(y_hat[t], y[t]), tape.constant(m)))));
  }
  Var total = terms.front();
  for (std::size_t t = 1; t < terms.size(); ++t) total = total + terms[t];
  return ad::scale(total, 1.0 / (n_real * static_cast<double>(D)));
}

struct RealLatents {
  Var mu;
  Var log_sigma;
  double n_real = 0.0;
};

RealLatents gather_real(std::span<const Var> mu, std::span<const Var> log_sigma, const Matrix& mask) {
  const Rows rows = real_rows(mask);
  if (rows.empty()) throw EmptySequence("elbo: batch has no real rows");
  const auto idx = flat_indices(rows, mask.rows());
  return {ad::gather_rows(ad::concat_rows(mu), idx), ad::gather_rows(ad::concat_rows(log_sigma), idx),
          static_cast<double>(rows.size())};
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite ") + what);
}

void clip_gradients(std::vector<Matrix>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    for (auto& g : grads) g *= max_norm / norm;
  }
}

std::vector<DescriptorKind> kinds_of(const std::vector<DescriptorField>& schema, bool with_time) {
  std::vector<DescriptorKind> out;
  for (const auto& f : schema) out.push_back(f.kind);
  if (with_time) out.push_back(DescriptorKind::Continuous);
  return out;
}

// Fits the scaler, fixed length and kernel input normalization on the
// training part.
void prepare(GenerativeModel& model, const Dataset& train_part) {
  model.scaler.fit(feature_rows(train_part));
  model.fixed_length = model.config.fixed_length > 0 ? model.config.fixed_length : default_fixed_length(train_part);
  const auto Q = static_cast<Eigen::Index>(model.kernel_kinds.size());
  model.kernel_offset = Eigen::RowVectorXd::Zero(Q);
  model.kernel_scale = Eigen::RowVectorXd::Ones(Q);
  const auto nd = static_cast<Eigen::Index>(model.descriptor_schema.size());
  for (Eigen::Index q = 0; q < Q; ++q) {
    if (model.kernel_kinds[static_cast<std::size_t>(q)] != DescriptorKind::Continuous) continue;
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& s : train_part.subjects) {
      if (q < nd) {
        lo = std::min(lo, s.descriptors(q));
        hi = std::max(hi, s.descriptors(q));
      } else {
        for (const auto& step : s.steps) {
          lo = std::min(lo, step.event_time);
          hi = std::max(hi, step.event_time);
        }
      }
    }
    if (std::isfinite(lo) && hi > lo) {
      model.kernel_offset(q) = lo;
      model.kernel_scale(q) = hi - lo;
    }
  }
}

PaddingStrategy strategy_of(const GenerativeModel& model) { return {model.config.padding, model.fixed_length}; }

Posterior encode_batch(const GenerativeModel& model, const SequenceBatch& batch) {
  ad::Tape tape;
  const auto enc = bind<Encoder>(tape, model.params.encoder);
  std::vector<Var> inputs;
  for (const auto& x : batch.inputs) inputs.push_back(tape.constant(x));
  const auto out = encode(enc, inputs);
  const Rows rows = real_rows(batch.mask);
  Posterior p{Matrix(static_cast<Eigen::Index>(rows.size()), model.config.latent_dim),
              Matrix(static_cast<Eigen::Index>(rows.size()), model.config.latent_dim)};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto [b, t] = rows[i];
    p.mu.row(static_cast<Eigen::Index>(i)) = out.mu[static_cast<std::size_t>(t)].value().row(b);
    p.log_sigma.row(static_cast<Eigen::Index>(i)) = out.log_sigma[static_cast<std::size_t>(t)].value().row(b);
  }
  return p;
}

// Encoder means and kernel inputs of up to reference_rows real training rows,
// spread evenly over the subjects (a few evenly spaced steps from each).
void build_reference(GenerativeModel& model, std::span<const AlignedSubject> train_set) {
  const std::size_t cap = model.config.reference_rows;
  const std::size_t per_subject = std::max<std::size_t>(1, cap / train_set.size());
  std::vector<Eigen::RowVectorXd> inputs, mus;
  for (std::size_t i = 0; i < train_set.size() && inputs.size() < cap; ++i) {
    const std::size_t idx[] = {i};
    const SequenceBatch batch = make_batch(train_set, idx);
    const Rows rows = real_rows(batch.mask);
    const Posterior p = encode_batch(model, batch);
    const Matrix X = model.kernel_inputs(batch, rows);
    const std::size_t take = std::min(per_subject, rows.size());
    for (std::size_t k = 0; k < take && inputs.size() < cap; ++k) {
      const auto r = static_cast<Eigen::Index>(k * rows.size() / take);
      inputs.push_back(X.row(r));
      mus.push_back(p.mu.row(r));
    }
  }
  model.reference_inputs.resize(static_cast<Eigen::Index>(inputs.size()), model.kernel_offset.size());
  model.reference_mu.resize(static_cast<Eigen::Index>(mus.size()), model.config.latent_dim);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    model.reference_inputs.row(static_cast<Eigen::Index>(i)) = inputs[i];
    model.reference_mu.row(static_cast<Eigen::Index>(i)) = mus[i];
  }
}

// Draws latents from N(mean, cov), one column per mean column, tolerant of
// a numerically semi-definite covariance.
Matrix sample_correlated(const Matrix& mean, const Matrix& cov, std::mt19937_64& rng) {
  const Matrix sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Matrix factor = eig.eigenvectors() * root.asDiagonal();
  return mean + factor * gaussian(mean.rows(), mean.cols(), rng);
}

nlohmann::json schema_to_json(const std::vector<DescriptorField>& schema) {
  auto out = nlohmann::json::array();
  for (const auto& f : schema) out.push_back({{"name", f.name}, {"kind", to_string(f.kind)}});
  return out;
}

}  // namespace

const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Vae: return "vae";
    case ModelKind::VaeNs: return "vae_ns";
    case ModelKind::Lvae: return "lvae";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& name) {
  if (name == "vae") return ModelKind::Vae;
  if (name == "vae_ns") return ModelKind::VaeNs;
  if (name == "lvae") return ModelKind::Lvae;
  throw std::invalid_argument("unknown generative model: " + name);
}

void ElboConfig::check() const {
  if (!(kl_weight >= 0.0)) throw std::invalid_argument("kl_weight must be non-negative");
  if (latent_dim < 1 || hidden_dim < 1) throw std::invalid_argument("latent and hidden sizes must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (max_epochs < 0 || patience < 0) throw std::invalid_argument("epoch counts must be non-negative");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (fixed_length < 0) throw std::invalid_argument("fixed length must be non-negative");
  if (!(noise_variance > 0.0)) throw std::invalid_argument("noise variance must be positive");
  if (reference_rows == 0) throw std::invalid_argument("reference_rows must be positive");
}

nlohmann::json kernel_to_json(const gp::KernelSpec& spec) {
  nlohmann::json j;
  j["jitter"] = spec.jitter;
  j["log_noise"] = spec.log_noise ? nlohmann::json(*spec.log_noise) : nlohmann::json(nullptr);
  j["components"] = nlohmann::json::array();
  for (const auto& c : spec.components) {
    j["components"].push_back({{"kind", gp::to_string(c.kind)},
                               {"continuous", c.continuous},
                               {"factor", c.factor},
                               {"log_lengthscales", std::vector<double>(c.log_lengthscales.begin(), c.log_lengthscales.end())},
                               {"log_variance", c.log_variance}});
  }
  return j;
}

gp::KernelSpec kernel_from_json(const nlohmann::json& j, const std::vector<std::string>* columns) {
  auto column = [&](const nlohmann::json& ref) -> Eigen::Index {
    if (ref.is_number_integer()) return ref.get<Eigen::Index>();
    if (ref.is_string() && columns) {
      const auto it = std::find(columns->begin(), columns->end(), ref.get<std::string>());
      if (it != columns->end()) return it - columns->begin();
    }
    throw std::invalid_argument("kernel references unknown column " + ref.dump());
  };
  gp::KernelSpec spec;
  spec.jitter = j.value("jitter", 1e-6);
  if (j.contains("log_noise") && !j.at("log_noise").is_null()) spec.log_noise = j.at("log_noise").get<double>();
  for (const auto& cj : j.at("components")) {
    gp::KernelComponent c;
    c.kind = gp::component_kind_from_string(cj.at("kind").get<std::string>());
    if (cj.contains("continuous")) {
      for (const auto& ref : cj.at("continuous")) c.continuous.push_back(column(ref));
    }
    c.factor = cj.contains("factor") ? column(cj.at("factor")) : Eigen::Index{-1};
    const auto ls = cj.value("log_lengthscales", std::vector<double>(c.continuous.size(), 0.0));
    c.log_lengthscales = Eigen::Map<const Eigen::VectorXd>(ls.data(), static_cast<Eigen::Index>(ls.size()));
    c.log_variance = cj.value("log_variance", 0.0);
    spec.components.push_back(std::move(c));
  }
  return spec;
}

nlohmann::json to_json(const ElboConfig& c) {
  nlohmann::json j{{"kl_weight", c.kl_weight},
                   {"latent_dim", c.latent_dim},
                   {"hidden_dim", c.hidden_dim},
                   {"learning_rate", c.learning_rate},
                   {"max_epochs", c.max_epochs},
                   {"patience", c.patience},
                   {"min_delta", c.min_delta},
                   {"batch_size", c.batch_size},
                   {"fixed_length", c.fixed_length},
                   {"padding", to_string(c.padding)},
                   {"use_event_time", c.use_event_time},
                   {"noise_variance", c.noise_variance},
                   {"reference_rows", c.reference_rows}};
  j["kernel"] = c.kernel ? kernel_to_json(*c.kernel) : nlohmann::json(nullptr);
  return j;
}

ElboConfig elbo_config_from_json(const nlohmann::json& j) {
  ElboConfig c;
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.min_delta = j.value("min_delta", c.min_delta);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.fixed_length = j.value("fixed_length", c.fixed_length);
  c.padding = padding_from_string(j.value("padding", std::string(to_string(c.padding))));
  c.use_event_time = j.value("use_event_time", c.use_event_time);
  c.noise_variance = j.value("noise_variance", c.noise_variance);
  c.reference_rows = j.value("reference_rows", c.reference_rows);
  if (j.contains("kernel") && !j.at("kernel").is_null()) c.kernel = kernel_from_json(j.at("kernel"));
  c.check();
  return c;
}

// ---- batched pieces ----

EncoderOutput encode(const Encoder<Var>& enc, std::span<const Var> inputs) {
  if (inputs.empty()) throw EmptySequence("encode: no time steps");
  ad::Tape& tape = *inputs.front().tape();
  const Eigen::Index B = inputs.front().rows();
  const Eigen::Index H = enc.lstm.b_input.cols();
  LstmState state{tape.constant(Matrix::Zero(B, H)), tape.constant(Matrix::Zero(B, H))};
  EncoderOutput out;
  for (const Var& x : inputs) {
    state = lstm_cell(enc.lstm, x, state.h, state.c);
    out.mu.push_back(dense(enc.mu_head, state.h));
    out.log_sigma.push_back(dense(enc.log_sigma_head, state.h));
  }
  return out;
}

std::vector<Var> decode(const Decoder<Var>& dec, std::span<const Var> latents) {
  if (latents.empty()) throw EmptySequence("decode: no time steps");
  ad::Tape& tape = *latents.front().tape();
  const Eigen::Index B = latents.front().rows();
  const Eigen::Index H = dec.lstm.b_input.cols();
  LstmState state{tape.constant(Matrix::Zero(B, H)), tape.constant(Matrix::Zero(B, H))};
  std::vector<Var> out;
  for (const Var& z : latents) {
    state = lstm_cell(dec.lstm, z, state.h, state.c);
    out.push_back(dense(dec.out_head, state.h));
  }
  return out;
}

Var reparameterize(Var mu, Var log_sigma, Var noise) { return mu + ad::mul(ad::exp(log_sigma), noise); }

Rows real_rows(const Matrix& mask) {
  Rows out;
  for (Eigen::Index t = 0; t < mask.cols(); ++t) {
    for (Eigen::Index b = 0; b < mask.rows(); ++b) {
      if (mask(b, t) != 0.0) out.emplace_back(b, t);
    }
  }
  return out;
}

ElboTerms elbo_vae(std::span<const Var> y, std::span<const Var> y_hat, const Matrix& mask,
                   std::span<const Var> mu, std::span<const Var> log_sigma, double beta) {
  const RealLatents z = gather_real(mu, log_sigma, mask);
  const Var recon = masked_recon(y, y_hat, mask, z.n_real);
  const Var kl = ad::scale(gp::kl_standard_normal(z.mu, z.log_sigma), 1.0 / (z.n_real * static_cast<double>(z.mu.cols())));
  return {recon + ad::scale(kl, beta), recon, kl};
}

ElboTerms elbo_lvae(std::span<const Var> y, std::span<const Var> y_hat, const Matrix& mask,
                    std::span<const Var> mu, std::span<const Var> log_sigma, std::span<const Var> grams,
                    double beta) {
  const RealLatents z = gather_real(mu, log_sigma, mask);
  for (const Var& gram : grams) {
    if (gram.rows() != z.mu.rows() || gram.cols() != z.mu.rows()) {
      throw ad::ShapeMismatch("elbo_lvae: Gram size differs from the number of real rows");
    }
  }
  const Var recon = masked_recon(y, y_hat, mask, z.n_real);
  const Var kl = ad::scale(gp::kl_posterior_vs_gp(grams, z.mu, z.log_sigma),
                           1.0 / (z.n_real * static_cast<double>(z.mu.cols())));
  return {recon + ad::scale(kl, beta), recon, kl};
}

// ---- single-sequence conveniences ----

Posterior encode(const EncoderParams& enc, const Matrix& y) {
  ad::Tape tape;
  const auto bound = bind<Encoder>(tape, enc);
  std::vector<Var> inputs;
  for (Eigen::Index t = 0; t < y.rows(); ++t) inputs.push_back(tape.constant(y.row(t)));
  const auto out = encode(bound, inputs);
  const Eigen::Index L = enc.mu_head.weight.rows();
  Posterior p{Matrix(y.rows(), L), Matrix(y.rows(), L)};
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    p.mu.row(t) = out.mu[static_cast<std::size_t>(t)].value();
    p.log_sigma.row(t) = out.log_sigma[static_cast<std::size_t>(t)].value();
  }
  return p;
}

Matrix decode(const DecoderParams& dec, const Matrix& z) {
  ad::Tape tape;
  const auto bound = bind<Decoder>(tape, dec);
  std::vector<Var> latents;
  for (Eigen::Index t = 0; t < z.rows(); ++t) latents.push_back(tape.constant(z.row(t)));
  const auto out = decode(bound, latents);
  Matrix y(z.rows(), dec.out_head.weight.rows());
  for (Eigen::Index t = 0; t < z.rows(); ++t) y.row(t) = out[static_cast<std::size_t>(t)].value();
  return y;
}

Matrix reparameterize(const Matrix& mu, const Matrix& log_sigma, const Matrix& noise) {
  ad::check_same_shape(mu, log_sigma, "reparameterize");
  ad::check_same_shape(mu, noise, "reparameterize");
  return mu.array() + log_sigma.array().exp() * noise.array();
}

// ---- models ----

std::size_t GenerativeModel::kernel_block() const { return gp::kernel_parameters(kernel).size(); }

gp::KernelSpec GenerativeModel::trained_kernel(Eigen::Index dim) const {
  gp::KernelSpec spec = kernel;
  const std::size_t block = kernel_block();
  const auto at = static_cast<std::size_t>(dim) * block;
  if (dim < 0 || at + block > params.kernel.size()) throw gp::DimensionMismatch("no kernel for latent dimension " + std::to_string(dim));
  gp::set_kernel_parameters(spec, std::span<const Matrix>(params.kernel).subspan(at, block));
  return spec;
}

Eigen::RowVectorXd GenerativeModel::kernel_row(const Eigen::VectorXd& descriptors, double time) const {
  const auto Q = static_cast<Eigen::Index>(kernel_kinds.size());
  Eigen::RowVectorXd raw(Q);
  const Eigen::Index nd = descriptors.size();
  if (Q != nd + (config.use_event_time ? 1 : 0)) throw gp::DimensionMismatch("descriptor count differs from the model");
  raw.head(nd) = descriptors.transpose();
  if (config.use_event_time) raw(nd) = time;
  return (raw - kernel_offset).cwiseQuotient(kernel_scale);
}

Matrix GenerativeModel::kernel_inputs(const SequenceBatch& batch,
                                      std::span<const std::pair<Eigen::Index, Eigen::Index>> rows) const {
  Matrix X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(kernel_kinds.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto [b, t] = rows[i];
    X.row(static_cast<Eigen::Index>(i)) = kernel_row(batch.descriptors.row(b).transpose(), batch.times(b, t));
  }
  return X;
}

GenerativeModel init_model(ModelKind kind, const Dataset& schema, const ElboConfig& config, std::uint64_t seed) {
  config.check();
  if (schema.feature_schema.empty()) throw std::invalid_argument("dataset has no feature columns");
  GenerativeModel m;
  m.kind = kind;
  m.config = config;
  m.feature_schema = schema.feature_schema;
  m.descriptor_schema = schema.descriptor_schema;
  m.kernel_kinds = kinds_of(schema.descriptor_schema, config.use_event_time);
  m.kernel_offset = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(m.kernel_kinds.size()));
  m.kernel_scale = Eigen::RowVectorXd::Ones(static_cast<Eigen::Index>(m.kernel_kinds.size()));
  const auto D = static_cast<Eigen::Index>(schema.feature_schema.size());
  const Eigen::Index H = config.hidden_dim, L = config.latent_dim;
  std::mt19937_64 rng(seed);
  m.params.encoder = {make_lstm(D, H, rng), make_dense(H, L, rng), make_dense(H, L, rng)};
  m.params.decoder = {make_lstm(L, H, rng), make_dense(H, D, rng)};
  if (m.uses_gp()) {
    if (m.kernel_kinds.empty()) throw std::invalid_argument("the GP prior needs at least one kernel input");
    if (config.kernel) {
      m.kernel = *config.kernel;
    } else {
      // Components share what the noise leaves of a unit prior variance.
      m.kernel = gp::default_kernel_spec(m.kernel_kinds, config.noise_variance);
      const double share = std::max(1.0 - config.noise_variance, 0.1) / static_cast<double>(m.kernel.components.size());
      for (auto& c : m.kernel.components) c.log_variance = std::log(share);
    }
    gp::check_spec(m.kernel, m.kernel_kinds);
    const auto block = gp::kernel_parameters(m.kernel);
    for (Eigen::Index l = 0; l < L; ++l) m.params.kernel.insert(m.params.kernel.end(), block.begin(), block.end());
  }
  return m;
}

ElboTerms batch_elbo(ad::Tape& tape, const GenerativeModel& model, GenerativeParams<Var>& bound,
                     const SequenceBatch& batch, const std::vector<Matrix>& noise) {
  std::vector<Var> inputs;
  inputs.reserve(batch.inputs.size());
  for (const auto& x : batch.inputs) inputs.push_back(tape.constant(x));
  const EncoderOutput post = encode(bound.encoder, inputs);
  std::vector<Var> z;
  z.reserve(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    z.push_back(reparameterize(post.mu[t], post.log_sigma[t], tape.constant(noise[t])));
  }
  const std::vector<Var> y_hat = decode(bound.decoder, z);
  const double beta = model.config.kl_weight;
  if (!model.uses_gp()) return elbo_vae(inputs, y_hat, batch.mask, post.mu, post.log_sigma, beta);
  const Rows rows = real_rows(batch.mask);
  const std::size_t block = model.kernel_block();
  if (!model.config.use_event_time && model.kernel.log_noise) {
    // Kernel inputs are constant within a subject, so the Gram is a
    // subject-level block plus the noise diagonal and the KL is taken on the
    // B x B block. The jitter sits on the block instead of the full diagonal.
    std::vector<Eigen::Index> slot(static_cast<std::size_t>(batch.batch_size()), -1), groups;
    std::vector<Eigen::Index> present;
    for (const auto& [b, t] : rows) {
      auto& s = slot[static_cast<std::size_t>(b)];
      if (s < 0) {
        s = static_cast<Eigen::Index>(present.size());
        present.push_back(b);
      }
      groups.push_back(s);
    }
    Matrix Xs(static_cast<Eigen::Index>(present.size()), static_cast<Eigen::Index>(model.kernel_kinds.size()));
    for (std::size_t g = 0; g < present.size(); ++g) {
      Xs.row(static_cast<Eigen::Index>(g)) = model.kernel_row(batch.descriptors.row(present[g]).transpose(), 0.0);
    }
    gp::KernelSpec components = model.kernel;
    components.log_noise.reset();
    const RealLatents zr = gather_real(post.mu, post.log_sigma, batch.mask);
    Var kl;
    for (std::size_t at = 0, l = 0; at < bound.kernel.size(); at += block, ++l) {
      const auto dim_params = std::span<const Var>(bound.kernel).subspan(at, block);
      const Var Ks = gp::gram_var(tape, components, dim_params.first(block - 1), Xs, model.kernel_kinds);
      const auto col = static_cast<Eigen::Index>(l);
      const Var term = gp::kl_grouped_gp(Ks, ad::exp(dim_params.back()), groups, ad::slice_cols(zr.mu, col, 1),
                                         ad::slice_cols(zr.log_sigma, col, 1));
      kl = at == 0 ? term : kl + term;
    }
    const Var recon = masked_recon(inputs, y_hat, batch.mask, zr.n_real);
    kl = ad::scale(kl, 1.0 / (zr.n_real * static_cast<double>(zr.mu.cols())));
    return {recon + ad::scale(kl, beta), recon, kl};
  }
  const Matrix X = model.kernel_inputs(batch, rows);
  std::vector<Var> grams;
  for (std::size_t at = 0; at < bound.kernel.size(); at += block) {
    grams.push_back(gp::gram_var(tape, model.kernel, std::span<const Var>(bound.kernel).subspan(at, block), X,
                                 model.kernel_kinds));
  }
  return elbo_lvae(inputs, y_hat, batch.mask, post.mu, post.log_sigma, grams, beta);
}

ElboValues evaluate_elbo(const GenerativeModel& model, std::span<const AlignedSubject> subjects,
                         std::uint64_t noise_seed) {
  std::vector<std::size_t> order(subjects.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(noise_seed);
  ElboValues acc;
  double weight = 0.0;
  for (const auto& idx : batches_of(order, model.config.batch_size)) {
    const SequenceBatch batch = make_batch(subjects, idx);
    const auto noise = batch_noise(batch.batch_size(), batch.length(), model.config.latent_dim, rng);
    ad::Tape tape;
    auto bound = bind<GenerativeParams>(tape, model.params);
    const ElboTerms e = batch_elbo(tape, model, bound, batch, noise);
    const double w = batch.mask.sum();
    acc.loss += w * e.loss.scalar();
    acc.recon += w * e.recon.scalar();
    acc.kl += w * e.kl.scalar();
    weight += w;
  }
  if (weight > 0.0) {
    acc.loss /= weight;
    acc.recon /= weight;
    acc.kl /= weight;
  }
  return acc;
}

TrainResult train(ModelKind kind, const Dataset& train_part, const Dataset& val_part, const ElboConfig& config,
                  std::uint64_t seed) {
  GenerativeModel model = init_model(kind, train_part, config, seed);
  prepare(model, train_part);
  const auto strategy = strategy_of(model);
  const auto train_set = align_subjects(train_part, model.scaler, strategy);
  const auto val_set = align_subjects(val_part, model.scaler, strategy);
  return train(std::move(model), train_set, val_set, seed);
}

TrainResult train(GenerativeModel model, std::span<const AlignedSubject> train_set,
                  std::span<const AlignedSubject> val_set, std::uint64_t seed) {
  if (train_set.empty()) throw EmptyPart("generative training set is empty");
  std::span<const AlignedSubject> monitor = val_set.empty() ? train_set : val_set;
  const std::uint64_t val_seed = seed ^ kValidationNoiseSalt;
  std::mt19937_64 rng(seed + 1);
  ad::AdamState adam;
  const ad::AdamConfig adam_config{model.config.learning_rate};

  TrainResult result;
  const ElboValues initial = evaluate_elbo(model, monitor, val_seed);
  check_finite(initial.loss, "validation loss");
  const ElboValues initial_train = evaluate_elbo(model, train_set, val_seed);
  result.history.push_back({0, initial_train.loss, initial.loss, initial.recon, initial.kl});
  GenerativeParams<Matrix> best = model.params;
  double best_val = initial.loss;
  int wait = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= model.config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double train_loss = 0.0, weight = 0.0;
    for (const auto& idx : batches_of(order, model.config.batch_size)) {
      const SequenceBatch batch = make_batch(train_set, idx);
      const auto noise = batch_noise(batch.batch_size(), batch.length(), model.config.latent_dim, rng);
      ad::Tape tape;
      auto bound = bind<GenerativeParams>(tape, model.params);
      const ElboTerms e = batch_elbo(tape, model, bound, batch, noise);
      check_finite(e.loss.scalar(), "training loss");
      tape.backward(e.loss);
      auto grads = gradients(bound);
      clip_gradients(grads, kClipNorm);
      const auto ptrs = parameter_pointers(model.params);
      ad::adam_step(ptrs, grads, adam, adam_config);
      const double w = batch.mask.sum();
      train_loss += w * e.loss.scalar();
      weight += w;
    }
    const ElboValues val = evaluate_elbo(model, monitor, val_seed);
    check_finite(val.loss, "validation loss");
    result.history.push_back({epoch, train_loss / weight, val.loss, val.recon, val.kl});
    if (val.loss < best_val - model.config.min_delta) {
      best_val = val.loss;
      best = model.params;
      result.best_epoch = epoch;
      wait = 0;
    } else if (++wait > model.config.patience) {
      break;
    }
  }
  model.params = std::move(best);
  if (model.uses_gp()) build_reference(model, train_set);
  result.model = std::move(model);
  return result;
}

Dataset generate_missing(const GenerativeModel& model, std::span<const MissingSkeleton> skeletons,
                         std::uint64_t noise_seed) {
  if (!model.scaler.fitted()) throw NotFitted("generative model has no fitted scaler");
  std::mt19937_64 rng(noise_seed);
  const Eigen::Index L = model.config.latent_dim;
  Dataset out;
  out.feature_schema = model.feature_schema;
  out.descriptor_schema = model.descriptor_schema;

  // One GP per latent dimension, each conditioned on the reference latents.
  std::vector<gp::KernelSpec> specs;
  std::vector<gp::GramMatrix> ref_grams;
  std::vector<Matrix> ref_alphas;
  if (model.uses_gp()) {
    if (model.reference_inputs.rows() == 0) throw NotFitted("LVAE model has no reference latents");
    for (Eigen::Index l = 0; l < L; ++l) {
      specs.push_back(model.trained_kernel(l));
      ref_grams.push_back(gp::eval_gram_escalating(specs.back(), model.reference_inputs, model.kernel_kinds));
      ref_alphas.push_back(ref_grams.back().solve(model.reference_mu.col(l)));
    }
  }

  for (const auto& sk : skeletons) {
    if (sk.times.empty()) continue;
    const auto n = static_cast<Eigen::Index>(sk.times.size());
    Matrix z;
    if (!model.uses_gp()) {
      z = gaussian(n, L, rng);
    } else {
      Matrix X(n, model.reference_inputs.cols());
      for (Eigen::Index i = 0; i < n; ++i) X.row(i) = model.kernel_row(sk.descriptors, sk.times[static_cast<std::size_t>(i)]);
      z.resize(n, L);
      for (Eigen::Index l = 0; l < L; ++l) {
        const auto& spec = specs[static_cast<std::size_t>(l)];
        const Matrix k_mt = gp::cross_covariance(spec, X, model.reference_inputs, model.kernel_kinds);
        Matrix cov = gp::component_sum(spec, X, model.kernel_kinds);
        cov.diagonal().array() += (spec.log_noise ? std::exp(*spec.log_noise) : 0.0) + spec.jitter;
        cov -= k_mt * ref_grams[static_cast<std::size_t>(l)].solve(k_mt.transpose());
        z.col(l) = sample_correlated(k_mt * ref_alphas[static_cast<std::size_t>(l)], cov, rng);
      }
    }
    const Matrix y = model.scaler.inverse_scale(decode(model.params.decoder, z));
    SubjectSeries s{sk.subject_id, sk.school_id, sk.descriptors, {}};
    for (Eigen::Index i = 0; i < n; ++i) {
      s.steps.push_back({sk.times[static_cast<std::size_t>(i)], y.row(i).transpose(), std::nullopt, false});
    }
    out.subjects.push_back(std::move(s));
  }
  return out;
}

Checkpoint to_checkpoint(const GenerativeModel& model) {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", to_string(model.kind)},
               {"config", to_json(model.config)},
               {"kernel", kernel_to_json(model.kernel)},
               {"kernel_parameters", model.params.kernel.size()},
               {"feature_schema", model.feature_schema},
               {"descriptor_schema", schema_to_json(model.descriptor_schema)},
               {"fixed_length", model.fixed_length},
               {"scaler_fitted", model.scaler.fitted()}};
  auto& params = const_cast<GenerativeParams<Matrix>&>(model.params);
  for (const auto& [name, m] : named_parameters(params)) ckpt.add(name, *m);
  if (model.scaler.fitted()) {
    ckpt.add("scaler.min", model.scaler.min());
    ckpt.add("scaler.max", model.scaler.max());
  }
  ckpt.add("kernel_offset", model.kernel_offset);
  ckpt.add("kernel_scale", model.kernel_scale);
  ckpt.add("reference_inputs", model.reference_inputs);
  ckpt.add("reference_mu", model.reference_mu);
  return ckpt;
}

GenerativeModel from_checkpoint(const Checkpoint& ckpt) {
  const auto& meta = ckpt.meta;
  GenerativeModel m;
  m.kind = model_kind_from_string(meta.at("kind").get<std::string>());
  m.config = elbo_config_from_json(meta.at("config"));
  m.kernel = kernel_from_json(meta.at("kernel"));
  m.feature_schema = meta.at("feature_schema").get<std::vector<std::string>>();
  for (const auto& f : meta.at("descriptor_schema")) {
    m.descriptor_schema.push_back({f.at("name").get<std::string>(), descriptor_kind_from_string(f.at("kind").get<std::string>())});
  }
  m.kernel_kinds = kinds_of(m.descriptor_schema, m.config.use_event_time);
  m.fixed_length = meta.at("fixed_length").get<Eigen::Index>();
  m.params.kernel.resize(meta.at("kernel_parameters").get<std::size_t>());
  for (const auto& [name, ptr] : named_parameters(m.params)) *ptr = ckpt.tensor(name);
  if (meta.value("scaler_fitted", false)) {
    m.scaler = MinMaxScaler(ckpt.tensor("scaler.min"), ckpt.tensor("scaler.max"));
  }
  m.kernel_offset = ckpt.tensor("kernel_offset");
  m.kernel_scale = ckpt.tensor("kernel_scale");
  m.reference_inputs = ckpt.tensor("reference_inputs");
  m.reference_mu = ckpt.tensor("reference_mu");
  return m;
}

std::string history_csv(const std::vector<LossRecord>& history) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,train_loss,val_loss,recon,kl\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_recon << ',' << r.val_kl << '\n';
  }
  return out.str();
}

}  // namespace longimpute::gen
