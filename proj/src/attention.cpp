#include "neurodim/attention.hpp"

#include <cmath>

#include "neurodim/detail/kernels.hpp"

namespace neurodim {

namespace {

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void expect_shape(const Matrix& m, Index rows, Index cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(what + " has shape " + shape(m) + ", expected " + std::to_string(rows) +
                         "x" + std::to_string(cols));
  }
  if (!all_finite(m)) throw InvalidInputError(what + " has non-finite entries");
}

TokenMatrix finite_output(Matrix y) {
  if (!all_finite(y)) throw OverflowError("forward pass produced non-finite values");
  return TokenMatrix(std::move(y));
}

std::vector<detail::LayerMats<double>> as_mats(const DeepWeights& w) {
  std::vector<detail::LayerMats<double>> out;
  for (auto& layer : w.attn_layers()) out.push_back({std::move(layer.A), std::move(layer.V)});
  return out;
}

}  // namespace

AttnLayer AttnLayer::from_qkv(const QKVLayer& layer) {
  if (layer.Q.rows() != layer.K.rows() || layer.Q.cols() != layer.K.cols()) {
    throw DimensionError("Q and K must share shape, got " + shape(layer.Q) + " and " +
                         shape(layer.K));
  }
  return {layer.K.transpose() * layer.Q, layer.V};
}

std::string_view to_string(Parametrization p) { return p == Parametrization::qkv ? "qkv" : "attn"; }

Parametrization DeepWeights::parametrization() const {
  return std::holds_alternative<std::vector<QKVLayer>>(layers) ? Parametrization::qkv
                                                               : Parametrization::attn;
}

int DeepWeights::layer_count() const {
  return std::visit([](const auto& v) { return static_cast<int>(v.size()); }, layers);
}

void DeepWeights::validate() const {
  arch.validate();
  if (layer_count() != arch.layers) {
    throw DimensionError("weights have " + std::to_string(layer_count()) +
                         " layers, architecture expects " + std::to_string(arch.layers));
  }
  for (int i = 1; i <= arch.layers; ++i) {
    const Index din = arch.dims[i - 1];
    const Index dout = arch.dims[i];
    const std::string tag = "layer " + std::to_string(i);
    if (const auto* qkv = std::get_if<std::vector<QKVLayer>>(&layers)) {
      const auto& l = (*qkv)[i - 1];
      expect_shape(l.Q, arch.attn_dims[i - 1], din, tag + " Q");
      expect_shape(l.K, arch.attn_dims[i - 1], din, tag + " K");
      expect_shape(l.V, dout, din, tag + " V");
    } else {
      const auto& l = std::get<std::vector<AttnLayer>>(layers)[i - 1];
      expect_shape(l.A, din, din, tag + " A");
      expect_shape(l.V, dout, din, tag + " V");
    }
  }
}

std::vector<AttnLayer> DeepWeights::attn_layers() const {
  if (const auto* attn = std::get_if<std::vector<AttnLayer>>(&layers)) return *attn;
  std::vector<AttnLayer> out;
  for (const auto& l : std::get<std::vector<QKVLayer>>(layers)) out.push_back(AttnLayer::from_qkv(l));
  return out;
}

DeepWeights DeepWeights::to_attn() const { return {arch, attn_layers()}; }

DeepWeights random_deep_weights(const Architecture& arch, Parametrization p, std::uint64_t seed,
                                std::uint64_t index) {
  arch.validate();
  const StreamKey key = stream_key(seed, "weights", index);
  DeepWeights w{arch, {}};
  std::vector<QKVLayer> qkv;
  std::vector<AttnLayer> attn;
  for (int i = 1; i <= arch.layers; ++i) {
    const Index din = arch.dims[i - 1];
    const Index dout = arch.dims[i];
    const Index a = arch.attn_dims[i - 1];
    const StreamKey lk = key.child(static_cast<std::uint64_t>(i));
    if (p == Parametrization::qkv) {
      qkv.push_back({sample_gaussian_matrix(a, din, lk.child(0)),
                     sample_gaussian_matrix(a, din, lk.child(1)),
                     sample_gaussian_matrix(dout, din, lk.child(2))});
    } else {
      attn.push_back({sample_gaussian_matrix(din, din, lk.child(3)),
                      sample_gaussian_matrix(dout, din, lk.child(2))});
    }
  }
  if (p == Parametrization::qkv) {
    w.layers = std::move(qkv);
  } else {
    w.layers = std::move(attn);
  }
  return w;
}

nlohmann::json to_json(const DeepWeights& w) {
  nlohmann::json layers = nlohmann::json::array();
  if (const auto* qkv = std::get_if<std::vector<QKVLayer>>(&w.layers)) {
    for (const auto& l : *qkv) {
      layers.push_back({{"Q", matrix_to_json(l.Q)}, {"K", matrix_to_json(l.K)}, {"V", matrix_to_json(l.V)}});
    }
  } else {
    for (const auto& l : std::get<std::vector<AttnLayer>>(w.layers)) {
      layers.push_back({{"A", matrix_to_json(l.A)}, {"V", matrix_to_json(l.V)}});
    }
  }
  return {{"arch", to_json(w.arch)},
          {"parametrization", to_string(w.parametrization())},
          {"layers", std::move(layers)}};
}

DeepWeights deep_weights_from_json(const nlohmann::json& j) {
  DeepWeights w;
  try {
    w.arch = architecture_from_json(j.at("arch"));
    const auto kind = j.value("parametrization", std::string("attn"));
    const auto& layers = j.at("layers");
    if (kind == "qkv") {
      std::vector<QKVLayer> out;
      for (const auto& l : layers) {
        out.push_back({matrix_from_json(l.at("Q")), matrix_from_json(l.at("K")), matrix_from_json(l.at("V"))});
      }
      w.layers = std::move(out);
    } else if (kind == "attn") {
      std::vector<AttnLayer> out;
      for (const auto& l : layers) out.push_back({matrix_from_json(l.at("A")), matrix_from_json(l.at("V"))});
      w.layers = std::move(out);
    } else {
      throw InvalidInputError("unknown parametrization '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInputError(std::string("malformed weights: ") + e.what());
  }
  w.validate();
  return w;
}

void SoftmaxConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidInputError("softmax temperature must be positive");
}

double SoftmaxConfig::apply(double x) const { return std::exp(x / tau); }

Matrix NormalizedScores::normalized() const {
  return normalizers.cwiseInverse().asDiagonal() * scores;
}

NormalizedScores normalized_scores(const AttnLayer& layer, const TokenMatrix& x,
                                   const SoftmaxConfig& cfg) {
  cfg.validate();
  const Matrix& X = x.matrix();
  detail::require(layer.A.rows() == X.rows() && layer.A.cols() == X.rows(),
                  "attention matrix must be d x d");
  const Matrix G = X.transpose() * layer.A * X;
  NormalizedScores out{Matrix(G.rows(), G.cols()), Vector::Zero(G.rows())};
  for (Index i = 0; i < G.rows(); ++i) {
    for (Index j = 0; j < G.cols(); ++j) {
      const double s = cfg.apply(G(i, j));
      if (!std::isfinite(s)) {
        throw OverflowError("softmax overflow at score (" + std::to_string(i) + ", " +
                            std::to_string(j) + ")");
      }
      out.scores(i, j) = s;
      out.normalizers(i) += s;
    }
  }
  return out;
}

TokenMatrix lightning_forward(const AttnLayer& layer, const TokenMatrix& x) {
  return finite_output(detail::lightning_layer<double>(layer.A, layer.V, x.matrix()));
}

TokenMatrix lightning_forward(const QKVLayer& layer, const TokenMatrix& x) {
  return lightning_forward(AttnLayer::from_qkv(layer), x);
}

TokenMatrix deep_forward(const DeepWeights& w, const TokenMatrix& x) {
  w.validate();
  if (x.dim() != w.arch.input_dim()) throw DimensionError("input must have d_0 rows");
  return finite_output(detail::deep_lightning<double>(as_mats(w), x.matrix()));
}

TokenMatrix softmax_forward(const AttnLayer& layer, const TokenMatrix& x, const SoftmaxConfig& cfg) {
  cfg.validate();
  return finite_output(detail::softmax_layer<double>(layer.A, layer.V, x.matrix(), cfg.tau));
}

TokenMatrix softmax_deep_forward(const DeepWeights& w, const TokenMatrix& x, const SoftmaxConfig& cfg) {
  cfg.validate();
  w.validate();
  if (x.dim() != w.arch.input_dim()) throw DimensionError("input must have d_0 rows");
  return finite_output(detail::deep_softmax<double>(as_mats(w), x.matrix(), cfg.tau));
}

TokenMatrix forward(const DeepWeights& w, const TokenMatrix& x, Model model, const SoftmaxConfig& cfg) {
  return model == Model::lightning ? deep_forward(w, x) : softmax_deep_forward(w, x, cfg);
}

}  // namespace neurodim
