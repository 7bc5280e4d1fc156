#include "mcvae/networks.hpp"

namespace mcvae {

Mlp::Mlp(std::string prefix, MlpConfig config) : prefix_(std::move(prefix)), config_(std::move(config)) {
  if (config_.input < 1 || config_.output < 1) throw ConfigError(prefix_ + ": network widths must be >= 1");
  for (int w : config_.hidden)
    if (w < 1) throw ConfigError(prefix_ + ": hidden widths must be >= 1");
}

std::string Mlp::weight_key(int layer) const { return prefix_ + "/W" + std::to_string(layer); }
std::string Mlp::bias_key(int layer) const { return prefix_ + "/b" + std::to_string(layer); }

void Mlp::initialise(ParameterSet& into, Rng& rng) const {
  int fan_in = config_.input;
  for (int k = 0; k < layers(); ++k) {
    const int fan_out = k + 1 < layers() ? config_.hidden[static_cast<std::size_t>(k)] : config_.output;
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Matrix w(fan_in, fan_out);
    for (Index j = 0; j < w.cols(); ++j)
      for (Index i = 0; i < w.rows(); ++i) w(i, j) = bound * (2.0 * rng.uniform() - 1.0);
    into.set(weight_key(k), std::move(w));
    into.set(bias_key(k), Matrix::Zero(1, fan_out));
    fan_in = fan_out;
  }
}

Var Mlp::forward(Binding& params, const Var& input) const {
  if (input.cols() != config_.input) {
    throw DimensionMismatch(prefix_ + ": input width " + std::to_string(input.cols()) + ", expected " +
                            std::to_string(config_.input));
  }
  Var h = input;
  for (int k = 0; k < layers(); ++k) {
    h = h * params[weight_key(k)] + params[bias_key(k)];
    if (k + 1 < layers()) h = config_.activation == Activation::relu ? relu(h) : tanh(h);
  }
  return h;
}

CovariateLayout::CovariateLayout(const CovariateSchema& schema) : columns(schema.size()) {
  for (int q = 0; q < schema.size(); ++q) {
    const auto& c = schema.column(q);
    if (c.role == ColumnRole::instance) continue;
    if (c.kind == ColumnKind::continuous) {
      continuous.push_back(q);
    } else {
      categorical.push_back(q);
      cardinality.push_back(c.cardinality);
    }
  }
}

int CovariateLayout::value_width() const {
  int w = static_cast<int>(continuous.size());
  for (int k : cardinality) w += k;
  return w;
}

Matrix fill_and_mask(const MaskedTable& y) {
  if (y.values.rows() != y.observed.rows() || y.values.cols() != y.observed.cols()) {
    throw DimensionMismatch("fill_and_mask: values and mask are not congruent");
  }
  const Index d = y.cols();
  Matrix out(y.rows(), 2 * d);
  out.leftCols(d) = y.observed.select(y.values, Matrix::Zero(y.rows(), d));
  out.rightCols(d) = y.observed.cast<double>();
  return out;
}

Matrix fill_and_mask(const CovariateTable& x, const CovariateLayout& layout) {
  if (x.values.rows() != x.observed.rows() || x.values.cols() != x.observed.cols()) {
    throw DimensionMismatch("fill_and_mask: values and mask are not congruent");
  }
  if (x.cols() != layout.columns) throw DimensionMismatch("fill_and_mask: covariate width differs from schema");
  const int vw = layout.value_width();
  Matrix out = Matrix::Zero(x.rows(), layout.masked_width());
  for (Index i = 0; i < x.rows(); ++i) {
    int c = 0;
    int m = vw;
    for (int q : layout.continuous) {
      if (x.observed(i, q)) {
        out(i, c) = x.values(i, q);
        out(i, m) = 1.0;
      }
      ++c;
      ++m;
    }
    for (std::size_t k = 0; k < layout.categorical.size(); ++k) {
      const int q = layout.categorical[k];
      const int card = layout.cardinality[k];
      if (x.observed(i, q)) {
        const double v = x.values(i, q);
        if (v != std::floor(v) || v < 0 || v >= card) {
          throw InvalidCategory("row " + std::to_string(i) + " column " + std::to_string(q) + " holds " +
                                std::to_string(v));
        }
        out(i, c + static_cast<int>(v)) = 1.0;
        out(i, m) = 1.0;
      }
      c += card;
      ++m;
    }
  }
  return out;
}

namespace {

Matrix one_hot_block(const Matrix& x, const CovariateLayout& layout) {
  int width = 0;
  for (int k : layout.cardinality) width += k;
  Matrix out = Matrix::Zero(x.rows(), width);
  for (Index i = 0; i < x.rows(); ++i) {
    int c = 0;
    for (std::size_t k = 0; k < layout.categorical.size(); ++k) {
      const double v = x(i, layout.categorical[k]);
      if (v != std::floor(v) || v < 0 || v >= layout.cardinality[k]) {
        throw InvalidCategory("instantiated covariate row " + std::to_string(i) + " holds " + std::to_string(v));
      }
      out(i, c + static_cast<int>(v)) = 1.0;
      c += layout.cardinality[k];
    }
  }
  return out;
}

}  // namespace

Var encode_instantiated(const Var& x, const CovariateLayout& layout) {
  if (x.cols() != layout.columns) throw DimensionMismatch("encode_instantiated: covariate width differs");
  std::vector<Var> parts;
  if (!layout.continuous.empty()) parts.push_back(ad::gather_cols(x, layout.continuous));
  if (!layout.categorical.empty()) parts.push_back(x.tape()->constant(one_hot_block(x.value(), layout)));
  if (parts.empty()) return x.tape()->constant(Matrix(x.rows(), 0));
  return parts.size() == 1 ? parts.front() : ad::hconcat(parts);
}

Matrix encode_instantiated(const Matrix& x, const CovariateLayout& layout) {
  ad::Tape t;
  return encode_instantiated(t.constant(x), layout).value();
}

Networks::Networks(const CovariateSchema& schema, int data_dims, int latent_dims, NetworkConfig config)
    : layout_(schema), columns_(schema.size()), data_dims_(data_dims), latent_dims_(latent_dims),
      config_(std::move(config)) {
  if (data_dims_ < 1 || latent_dims_ < 1) throw ConfigError("data and latent dimensions must be >= 1");
  const int xw = layout_.masked_width();

  config_.encoder.input = 2 * data_dims_ + xw;
  config_.encoder.output = 2 * latent_dims_;
  encoder_ = Mlp("encoder", config_.encoder);

  has_covariate_network_ = layout_.value_width() > 0;
  if (has_covariate_network_) {
    config_.covariate.input = xw + (config_.condition_x_posterior_on_y ? 2 * data_dims_ : 0);
    config_.covariate.output = 2 * static_cast<int>(layout_.continuous.size());
    for (int k : layout_.cardinality) config_.covariate.output += k;
    covariate_ = Mlp("covariate", config_.covariate);
  }

  config_.decoder.input = latent_dims_ + (config_.decoder_reads_x ? layout_.value_width() : 0);
  config_.decoder.output = data_dims_;
  decoder_ = Mlp("decoder", config_.decoder);
}

void Networks::initialise(ParameterSet& into, Rng& rng) const {
  encoder_.initialise(into, rng);
  if (has_covariate_network_) covariate_.initialise(into, rng);
  decoder_.initialise(into, rng);
  into.set(kDecoderLogVariance, Matrix::Zero(1, data_dims_));
}

EncoderVars Networks::encode_z(Binding& params, const Var& y_in, const Var& x_in) const {
  if (y_in.rows() != x_in.rows()) throw DimensionMismatch("encode_z: row counts differ");
  Var out = encoder_.forward(params, ad::hconcat({y_in, x_in}));
  const Index b = out.rows();
  EncoderVars e;
  e.mean = ad::block(out, 0, 0, b, latent_dims_);
  e.log_variance = ad_dist::clamp_log_variance(ad::block(out, 0, latent_dims_, b, latent_dims_));
  e.variance = exp(e.log_variance);
  return e;
}

CovariatePosteriorVars Networks::encode_missing(Binding& params, const Var& x_in, const Var& y_in) const {
  const Index b = x_in.rows();
  ad::Tape& t = *x_in.tape();
  CovariatePosteriorVars post;
  post.log_probs.resize(static_cast<std::size_t>(columns_));
  if (!has_covariate_network_) {
    post.mean = t.constant(Matrix::Zero(b, columns_));
    post.variance = t.constant(Matrix::Ones(b, columns_));
    return post;
  }
  Var in = x_in;
  if (config_.condition_x_posterior_on_y) {
    if (!y_in.valid() || y_in.rows() != b) throw DimensionMismatch("covariate posterior needs y inputs");
    in = ad::hconcat({x_in, y_in});
  }
  Var out = covariate_.forward(params, in);
  const auto qc = static_cast<Index>(layout_.continuous.size());
  if (qc > 0) {
    Matrix select = Matrix::Zero(qc, columns_);
    Matrix fill = Matrix::Ones(b, columns_);
    for (Index k = 0; k < qc; ++k) {
      select(k, layout_.continuous[static_cast<std::size_t>(k)]) = 1.0;
      fill.col(layout_.continuous[static_cast<std::size_t>(k)]).setZero();
    }
    Var sel = t.constant(select);
    post.mean = ad::block(out, 0, 0, b, qc) * sel;
    Var var = exp(ad_dist::clamp_log_variance(ad::block(out, 0, qc, b, qc)));
    post.variance = var * sel + t.constant(fill);
  } else {
    post.mean = t.constant(Matrix::Zero(b, columns_));
    post.variance = t.constant(Matrix::Ones(b, columns_));
  }
  Index c = 2 * qc;
  for (std::size_t k = 0; k < layout_.categorical.size(); ++k) {
    const int card = layout_.cardinality[k];
    post.log_probs[static_cast<std::size_t>(layout_.categorical[k])] = ad::log_softmax_rows(ad::block(out, 0, c, b, card));
    c += card;
  }
  return post;
}

DecoderVars Networks::decode(Binding& params, const Var& z, const Var& x_encoded) const {
  if (z.cols() != latent_dims_) throw DimensionMismatch("decode: latent width differs");
  Var in = z;
  if (config_.decoder_reads_x) {
    if (!x_encoded.valid()) throw DimensionMismatch("decode: this decoder needs covariates");
    if (x_encoded.rows() != z.rows()) throw DimensionMismatch("decode: row counts differ");
    if (x_encoded.cols() > 0) in = ad::hconcat({z, x_encoded});
  }
  DecoderVars d;
  d.mean = decoder_.forward(params, in);
  d.log_variance = ad_dist::clamp_log_variance(params[kDecoderLogVariance]);
  return d;
}

EncoderOutput Networks::encode_z(const ParameterSet& params, const Matrix& y_in, const Matrix& x_in) const {
  ad::Tape t;
  Binding b(t, params, false);
  EncoderVars e = encode_z(b, t.constant(y_in), t.constant(x_in));
  return {e.mean.value(), e.variance.value()};
}

CovariatePosterior Networks::encode_missing(const ParameterSet& params, const Matrix& x_in, const Matrix& y_in,
                                            const BoolMatrix& observed) const {
  ad::Tape t;
  Binding b(t, params, false);
  Var yv = y_in.size() > 0 ? t.constant(y_in) : Var();
  CovariatePosteriorVars v = encode_missing(b, t.constant(x_in), yv);
  CovariatePosterior out;
  out.mean = v.mean.value();
  out.variance = v.variance.value();
  out.probs.resize(static_cast<std::size_t>(columns_));
  for (std::size_t q = 0; q < v.log_probs.size(); ++q) {
    if (v.log_probs[q].valid()) out.probs[q] = v.log_probs[q].value().array().exp().matrix();
  }
  out.missing = observed.unaryExpr([](bool o) { return !o; });
  return out;
}

DecoderOutput Networks::decode(const ParameterSet& params, const Matrix& z, const std::optional<Matrix>& x_encoded) const {
  ad::Tape t;
  Binding b(t, params, false);
  Var xv = x_encoded ? t.constant(*x_encoded) : Var();
  DecoderVars d = decode(b, t.constant(z), xv);
  return {d.mean.value(), d.log_variance.value()};
}

}  // namespace mcvae
