#pragma once

// LSTM-VAE and LSTM-LVAE sequence generators.
//
// Latents are per time step. The encoder LSTM reads the scaled sequence and
// emits mu and log sigma per step through two dense heads; the decoder LSTM
// reads z_t and reconstructs the features through one dense head. The VAE
// regularizes toward N(0, I); the LVAE regularizes the batch's latent rows
// toward N(0, K) with K the additive GP covariance of their descriptors.

#include "longimpute/checkpoint.hpp"
#include "longimpute/core_types.hpp"
#include "longimpute/gp_prior.hpp"
#include "longimpute/layers.hpp"
#include "longimpute/pipeline.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace longimpute::gen {

using ad::NonFiniteLoss;

/// VaeNs shares the VAE architecture; it differs only in being trained and
/// imputed on row-based splits.
enum class ModelKind { Vae, VaeNs, Lvae };

const char* to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);

template <typename T>
struct Encoder {
  LstmCell<T> lstm;
  Dense<T> mu_head;
  Dense<T> log_sigma_head;

  template <typename Self, typename F>
  static void fields(Self& s, F&& f) {
    for_each_field(s.lstm, "encoder.lstm", f);
    for_each_field(s.mu_head, "encoder.mu", f);
    for_each_field(s.log_sigma_head, "encoder.log_sigma", f);
  }
};

template <typename T>
struct Decoder {
  LstmCell<T> lstm;
  Dense<T> out_head;

  template <typename Self, typename F>
  static void fields(Self& s, F&& f) {
    for_each_field(s.lstm, "decoder.lstm", f);
    for_each_field(s.out_head, "decoder.out", f);
  }
};

/// Everything trained jointly: encoder, decoder and (LVAE) the kernel
/// hyperparameters, one gp::kernel_parameters block per latent dimension.
template <typename T>
struct GenerativeParams {
  Encoder<T> encoder;
  Decoder<T> decoder;
  std::vector<T> kernel;

  template <typename U>
  static GenerativeParams like(const GenerativeParams<U>& other) {
    GenerativeParams out{};
    out.kernel.resize(other.kernel.size());
    return out;
  }

  template <typename Self, typename F>
  static void fields(Self& s, F&& f) {
    Encoder<T>::fields(s.encoder, f);
    Decoder<T>::fields(s.decoder, f);
    for (std::size_t i = 0; i < s.kernel.size(); ++i) f("kernel." + std::to_string(i), s.kernel[i]);
  }
};

using EncoderParams = Encoder<Matrix>;
using DecoderParams = Decoder<Matrix>;

struct ElboConfig {
  double kl_weight = 1.0;
  Eigen::Index latent_dim = 8;
  Eigen::Index hidden_dim = 16;
  double learning_rate = 5e-3;
  int max_epochs = 200;
  int patience = 10;
  double min_delta = 1e-5;
  std::size_t batch_size = 8;
  /// 0 selects the corpus default (average length rounded to 10).
  Eigen::Index fixed_length = 0;
  Padding padding = Padding::Zero;
  /// Append the event time as a continuous kernel input.
  bool use_event_time = false;
  /// Initial latent-noise variance of the LVAE prior.
  double noise_variance = 0.5;
  /// Training rows kept (encoder means) to condition LVAE generation on.
  std::size_t reference_rows = 256;
  /// Optional user kernel; empty uses gp::default_kernel_spec.
  std::optional<gp::KernelSpec> kernel;

  void check() const;
};

nlohmann::json to_json(const ElboConfig& config);
ElboConfig elbo_config_from_json(const nlohmann::json& j);
nlohmann::json kernel_to_json(const gp::KernelSpec& spec);
/// Column references may be indices or, when `columns` is given, names from
/// it (descriptor names, then "event_time" when the time input is on).
gp::KernelSpec kernel_from_json(const nlohmann::json& j, const std::vector<std::string>* columns = nullptr);

// ---- batched, differentiable pieces ----

struct EncoderOutput {
  std::vector<Var> mu;         // T entries of B x L
  std::vector<Var> log_sigma;  // T entries of B x L
};

EncoderOutput encode(const Encoder<Var>& enc, std::span<const Var> inputs);
std::vector<Var> decode(const Decoder<Var>& dec, std::span<const Var> latents);
/// z = mu + exp(log_sigma) * noise
Var reparameterize(Var mu, Var log_sigma, Var noise);

struct ElboTerms {
  Var loss;
  Var recon;
  Var kl;
};

/// Rows (b, t) with mask(b, t) = 1, time-major. This is the row order of the
/// latent matrices the KL terms see.
std::vector<std::pair<Eigen::Index, Eigen::Index>> real_rows(const Matrix& mask);

/// recon = masked mean squared error over real rows and features;
/// kl = KL(q || N(0, I)) / (n_real * L); loss = recon + beta * kl.
ElboTerms elbo_vae(std::span<const Var> y, std::span<const Var> y_hat, const Matrix& mask,
                   std::span<const Var> mu, std::span<const Var> log_sigma, double beta);

/// As elbo_vae with the KL taken against N(0, K_l) for the real rows of
/// each latent dimension l. `grams` holds one n_real x n_real matrix (in
/// real_rows order) per dimension, or a single one shared by all.
ElboTerms elbo_lvae(std::span<const Var> y, std::span<const Var> y_hat, const Matrix& mask,
                    std::span<const Var> mu, std::span<const Var> log_sigma, std::span<const Var> grams,
                    double beta);

// ---- single-sequence conveniences (no gradients) ----

struct Posterior {
  Matrix mu;         // T x L
  Matrix log_sigma;  // T x L
};

Posterior encode(const EncoderParams& enc, const Matrix& y);
Matrix decode(const DecoderParams& dec, const Matrix& z);
Matrix reparameterize(const Matrix& mu, const Matrix& log_sigma, const Matrix& noise);

// ---- models ----

struct GenerativeModel {
  ModelKind kind = ModelKind::Vae;
  ElboConfig config;
  GenerativeParams<Matrix> params;
  gp::KernelSpec kernel;                     // structure; values follow params.kernel
  std::vector<DescriptorKind> kernel_kinds;  // kernel input columns
  std::vector<std::string> feature_schema;
  std::vector<DescriptorField> descriptor_schema;
  MinMaxScaler scaler;
  Eigen::Index fixed_length = 1;
  // Kernel inputs are (raw - offset) / scale; continuous columns are min-max
  // normalized on the training subjects, the rest pass through.
  Eigen::RowVectorXd kernel_offset;
  Eigen::RowVectorXd kernel_scale;
  Matrix reference_inputs;  // LVAE: kernel inputs of reference training rows
  Matrix reference_mu;      // LVAE: encoder means at those rows

  bool uses_gp() const { return kind == ModelKind::Lvae; }
  /// Number of kernel parameter tensors per latent dimension.
  std::size_t kernel_block() const;
  /// Kernel spec of latent dimension `dim` with its trained hyperparameters.
  gp::KernelSpec trained_kernel(Eigen::Index dim) const;
  /// Normalized kernel input row for one step.
  Eigen::RowVectorXd kernel_row(const Eigen::VectorXd& descriptors, double time) const;
  /// Kernel input rows for a batch's real rows.
  Matrix kernel_inputs(const SequenceBatch& batch, std::span<const std::pair<Eigen::Index, Eigen::Index>> rows) const;
};

/// Fresh model with initialized weights; the scaler is left unfitted.
GenerativeModel init_model(ModelKind kind, const Dataset& schema, const ElboConfig& config, std::uint64_t seed);

struct LossRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_recon = 0.0;
  double val_kl = 0.0;
};

struct ElboValues {
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

/// Builds and runs the ELBO of one batch on `tape`.
ElboTerms batch_elbo(ad::Tape& tape, const GenerativeModel& model, GenerativeParams<Var>& bound,
                     const SequenceBatch& batch, const std::vector<Matrix>& noise);

/// Mean ELBO terms over `subjects` (weighted by real rows), with noise drawn
/// from `noise_seed`.
ElboValues evaluate_elbo(const GenerativeModel& model, std::span<const AlignedSubject> subjects,
                         std::uint64_t noise_seed);

struct TrainResult {
  GenerativeModel model;
  std::vector<LossRecord> history;  // epoch 0 is the untrained model
  int best_epoch = 0;
};

/// Adam on the ELBO with early stopping on the validation loss (patience
/// epochs without a min_delta improvement); returns the best-validation
/// weights. Throws NonFiniteLoss if a loss turns NaN or infinite.
TrainResult train(ModelKind kind, const Dataset& train_part, const Dataset& val_part, const ElboConfig& config,
                  std::uint64_t seed);

/// Continues training an initialized model (scaler fitted, fixed_length set).
TrainResult train(GenerativeModel model, std::span<const AlignedSubject> train_set,
                  std::span<const AlignedSubject> val_set, std::uint64_t seed);

/// Generated rows for every skeleton time: observed = false, no target,
/// features in the original (inverse-scaled) units. VAE models draw z from
/// N(0, I); the LVAE draws z from its GP prior conditioned on the reference
/// training latents, given each subject's descriptors.
Dataset generate_missing(const GenerativeModel& model, std::span<const MissingSkeleton> skeletons,
                         std::uint64_t noise_seed);

Checkpoint to_checkpoint(const GenerativeModel& model);
GenerativeModel from_checkpoint(const Checkpoint& ckpt);

std::string history_csv(const std::vector<LossRecord>& history);

}  // namespace longimpute::gen
