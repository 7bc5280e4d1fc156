#pragma once

// Feed-forward networks for the encoder q(z | y^o, x^o), the covariate
// posterior q(x^u | x^o [, y^o]) and the decoder p(y | z [, x]).

#include <optional>
#include <string>
#include <vector>

#include "mcvae/diffmath.hpp"
#include "mcvae/distributions.hpp"
#include "mcvae/random.hpp"

namespace mcvae {

using ad::Binding;
using ad::ParameterSet;
using ad::Var;

enum class Activation { relu, tanh };

struct MlpConfig {
  std::vector<int> hidden{128, 64};
  Activation activation = Activation::relu;
  int input = 0;
  int output = 0;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string prefix, MlpConfig config);

  const MlpConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }
  // Glorot-uniform weights, zero biases.
  void initialise(ParameterSet& into, Rng& rng) const;
  Var forward(Binding& params, const Var& input) const;

  std::string weight_key(int layer) const;
  std::string bias_key(int layer) const;
  int layers() const { return static_cast<int>(config_.hidden.size()) + 1; }

 private:
  std::string prefix_;
  MlpConfig config_;
};

// Which covariate columns the networks see, and how they are encoded. The
// instance-id column is kept out of network inputs; it only enters kernels.
struct CovariateLayout {
  std::vector<int> continuous;
  std::vector<int> categorical;
  std::vector<int> cardinality;  // per entry of `categorical`
  int columns = 0;               // schema width

  explicit CovariateLayout(const CovariateSchema& schema);
  CovariateLayout() = default;
  // continuous values followed by one-hot blocks
  int value_width() const;
  // value_width plus one mask bit per encoded column
  int masked_width() const { return value_width() + static_cast<int>(continuous.size() + categorical.size()); }
};

// Zero-filled values followed by 0/1 observed flags.
Matrix fill_and_mask(const MaskedTable& y);
Matrix fill_and_mask(const CovariateTable& x, const CovariateLayout& layout);

// Decoder-side encoding of fully instantiated covariates (no mask bits).
// Continuous columns stay on the graph; category ids become one-hot constants.
Var encode_instantiated(const Var& x, const CovariateLayout& layout);
Matrix encode_instantiated(const Matrix& x, const CovariateLayout& layout);

struct EncoderOutput {
  Matrix mean;
  Matrix variance;
};

struct EncoderVars {
  Var mean;
  Var log_variance;
  Var variance;
};

struct DecoderOutput {
  Matrix mean;
  RowVector log_variance;
};

struct DecoderVars {
  Var mean;
  Var log_variance;  // 1xD
};

// Posterior over covariates on the graph. mean and variance are BxQ with
// entries only meaningful at continuous columns; log_probs is indexed by
// schema column and holds BxK log-probabilities for categorical columns.
struct CovariatePosteriorVars {
  Var mean;
  Var variance;
  std::vector<Var> log_probs;
};

struct NetworkConfig {
  MlpConfig encoder;
  MlpConfig covariate;
  MlpConfig decoder;
  bool condition_x_posterior_on_y = false;
  bool decoder_reads_x = false;  // CVAE decoders consume the covariates
};

class Networks {
 public:
  Networks() = default;
  Networks(const CovariateSchema& schema, int data_dims, int latent_dims, NetworkConfig config);

  void initialise(ParameterSet& into, Rng& rng) const;

  int data_dims() const { return data_dims_; }
  int latent_dims() const { return latent_dims_; }
  const CovariateLayout& layout() const { return layout_; }
  const NetworkConfig& config() const { return config_; }
  bool has_covariate_network() const { return has_covariate_network_; }

  // Inputs are fill_and_mask encodings.
  EncoderVars encode_z(Binding& params, const Var& y_in, const Var& x_in) const;
  CovariatePosteriorVars encode_missing(Binding& params, const Var& x_in, const Var& y_in) const;
  // x_encoded is required exactly when the decoder reads covariates.
  DecoderVars decode(Binding& params, const Var& z, const Var& x_encoded) const;

  EncoderOutput encode_z(const ParameterSet& params, const Matrix& y_in, const Matrix& x_in) const;
  CovariatePosterior encode_missing(const ParameterSet& params, const Matrix& x_in, const Matrix& y_in,
                                    const BoolMatrix& observed) const;
  DecoderOutput decode(const ParameterSet& params, const Matrix& z, const std::optional<Matrix>& x_encoded) const;

  static constexpr const char* kDecoderLogVariance = "decoder/log_variance";

 private:
  CovariateLayout layout_;
  int columns_ = 0;
  int data_dims_ = 0;
  int latent_dims_ = 0;
  NetworkConfig config_;
  bool has_covariate_network_ = false;
  Mlp encoder_;
  Mlp covariate_;
  Mlp decoder_;
};

}  // namespace mcvae
