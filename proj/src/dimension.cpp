#include "neurodim/dimension.hpp"

#include <algorithm>
#include <thread>

#include "neurodim/detail/kernels.hpp"
#include "neurodim/dual.hpp"

namespace neurodim {

using detail::Mat;

std::string_view to_string(DimensionFormula f) {
  switch (f) {
    case DimensionFormula::single_layer: return "single_layer";
    case DimensionFormula::deep_lightning: return "deep_lightning";
    case DimensionFormula::deep_softmax: return "deep_softmax";
    case DimensionFormula::determinantal: return "determinantal";
    case DimensionFormula::virtual_weights: return "virtual_weights";
  }
  return "unknown";
}

long long DimensionPrediction::sum_of_terms() const {
  long long s = 0;
  for (const auto& t : terms) s += t.value;
  return s;
}

nlohmann::json to_json(const DimensionPrediction& p) {
  nlohmann::json terms = nlohmann::json::array();
  for (const auto& t : p.terms) terms.push_back({{"name", t.name}, {"value", t.value}});
  return {{"value", p.value}, {"formula", to_string(p.formula)}, {"terms", std::move(terms)},
          {"warnings", p.warnings}};
}

namespace {

DimensionPrediction finish(DimensionFormula f, std::vector<DimensionTerm> terms,
                           std::vector<std::string> warnings = {}) {
  DimensionPrediction p;
  p.formula = f;
  p.terms = std::move(terms);
  p.warnings = std::move(warnings);
  p.value = p.sum_of_terms();
  return p;
}

void require_positive(std::initializer_list<int> values) {
  for (int v : values) {
    if (v < 1) throw InvalidInputError("dimensions must be >= 1");
  }
}

std::vector<std::string> single_layer_warnings(int d, int d_out, int a) {
  std::vector<std::string> w;
  if (!((d >= 2 && d_out >= 2) || (d >= 2 && a >= 2))) {
    w.emplace_back("genericity hypothesis violated: need d, d' >= 2 or d, a >= 2");
  }
  return w;
}

struct DeepTerms {
  std::vector<DimensionTerm> terms;
  std::vector<std::string> warnings;
};

// Shared part of the deep lightning and softmax values.
DeepTerms deep_common(const Architecture& arch) {
  arch.validate();
  if (arch.layers < 2) {
    throw UnsupportedArchitectureError("deep formula needs l >= 2; use the single-layer predictor");
  }
  if (!arch.is_bottleneck()) {
    throw UnsupportedArchitectureError(
        "bottleneck hypothesis violated: need d_i = delta for 0 < i < l and d_0, d_l >= delta");
  }
  DeepTerms out;
  const long long delta = arch.bottleneck_width();
  const long long d0 = arch.dims.front();
  const long long dl = arch.dims.back();
  const long long a1 = arch.alpha(1);
  out.terms.push_back({"first layer attention 2*alpha_1*d_0 - alpha_1^2", 2 * a1 * d0 - a1 * a1});
  out.terms.push_back({"value chain delta*(d_0 + d_l) - delta^2", delta * (d0 + dl) - delta * delta});
  for (int i = 2; i <= arch.layers; ++i) {
    const long long ai = arch.alpha(i);
    out.terms.push_back({"layer " + std::to_string(i) + " attention 2*alpha_i*delta - alpha_i^2",
                         2 * ai * delta - ai * ai});
  }
  if (delta < 2) out.warnings.emplace_back("hypothesis violated: delta >= 2");
  if (arch.tokens < 3) out.warnings.emplace_back("hypothesis violated: t >= 3");
  for (int a : arch.attn_dims) {
    if (a < 2) {
      out.warnings.emplace_back("hypothesis violated: a_i >= 2");
      break;
    }
  }
  return out;
}

}  // namespace

DimensionPrediction predict_single_layer(int d, int d_out, int a) {
  require_positive({d, d_out, a});
  const long long D = d, Dp = d_out, Aa = a;
  std::vector<DimensionTerm> terms;
  if (a <= d) {
    terms = {{"attention 2ad - a^2", 2 * Aa * D - Aa * Aa}, {"value dd'", D * Dp}, {"rescaling", -1}};
  } else {
    terms = {{"attention d^2", D * D}, {"value dd'", D * Dp}, {"rescaling", -1}};
  }
  return finish(DimensionFormula::single_layer, std::move(terms), single_layer_warnings(d, d_out, a));
}

DimensionPrediction predict_single_layer_softmax(int d, int d_out, int a) {
  require_positive({d, d_out, a});
  const long long D = d, Dp = d_out, alpha = std::min(a, d);
  std::vector<std::string> warnings;
  return finish(DimensionFormula::single_layer,
                {{"attention 2*alpha*d - alpha^2", 2 * alpha * D - alpha * alpha}, {"value dd'", D * Dp}},
                std::move(warnings));
}

DimensionPrediction predict_determinantal(int d, int a) {
  require_positive({d, a});
  const long long alpha = std::min(a, d);
  return finish(DimensionFormula::determinantal, {{"alpha*(2d - alpha)", alpha * (2LL * d - alpha)}});
}

DimensionPrediction predict_deep_lightning(const Architecture& arch) {
  DeepTerms c = deep_common(arch);
  c.terms.push_back({"layer rescaling -l", -static_cast<long long>(arch.layers)});
  return finish(DimensionFormula::deep_lightning, std::move(c.terms), std::move(c.warnings));
}

DimensionPrediction predict_deep_softmax(const Architecture& arch) {
  DeepTerms c = deep_common(arch);
  return finish(DimensionFormula::deep_softmax, std::move(c.terms), std::move(c.warnings));
}

DimensionPrediction predict_virtual(const Architecture& arch, Model model) {
  arch.validate();
  const long long d0 = arch.dims.front();
  const long long dl = arch.dims.back();
  const long long l = arch.layers;
  std::vector<DimensionTerm> terms{{"M_1..M_l l*d_0^2", l * d0 * d0}, {"L d_l*d_0", dl * d0}};
  if (model == Model::lightning) terms.push_back({"layer rescaling -l", -l});
  std::vector<std::string> warnings;
  if (arch.tokens < (arch.layers == 1 ? 2 : 3)) warnings.emplace_back("hypothesis violated: token count too small");
  return finish(DimensionFormula::virtual_weights, std::move(terms), std::move(warnings));
}

DimensionPrediction predict(const Architecture& arch) {
  arch.validate();
  if (arch.layers == 1) {
    auto p = arch.model == Model::lightning
                 ? predict_single_layer(arch.dims[0], arch.dims[1], arch.attn_dims[0])
                 : predict_single_layer_softmax(arch.dims[0], arch.dims[1], arch.attn_dims[0]);
    if (arch.tokens < 2) p.warnings.emplace_back("hypothesis violated: t >= 2");
    return p;
  }
  return arch.model == Model::lightning ? predict_deep_lightning(arch) : predict_deep_softmax(arch);
}

std::string_view to_string(ParamSpace s) {
  switch (s) {
    case ParamSpace::raw_qkv: return "raw_qkv";
    case ParamSpace::attn_v: return "attn_v";
    case ParamSpace::virtual_weights: return "virtual";
  }
  return "unknown";
}

ParamSpace param_space_from_string(std::string_view s) {
  if (s == "raw_qkv" || s == "qkv") return ParamSpace::raw_qkv;
  if (s == "attn_v" || s == "attn") return ParamSpace::attn_v;
  if (s == "virtual") return ParamSpace::virtual_weights;
  throw InvalidInputError("unknown parameter space '" + std::string(s) + "'");
}

DimensionPrediction predict_for(const Architecture& arch, ParamSpace space) {
  switch (space) {
    case ParamSpace::raw_qkv: return predict(arch);
    case ParamSpace::attn_v: {
      Architecture free = arch;
      for (int i = 1; i <= free.layers; ++i) free.attn_dims[i - 1] = free.dims[i - 1];
      return predict(free);
    }
    case ParamSpace::virtual_weights: return predict_virtual(arch, arch.model);
  }
  throw InvalidInputError("unknown parameter space");
}

Index parameter_count(const Architecture& arch, ParamSpace space) {
  arch.validate();
  Index n = 0;
  switch (space) {
    case ParamSpace::raw_qkv:
      for (int i = 1; i <= arch.layers; ++i) {
        n += Index(arch.dims[i - 1]) * (2 * arch.attn_dims[i - 1] + arch.dims[i]);
      }
      return n;
    case ParamSpace::attn_v:
      for (int i = 1; i <= arch.layers; ++i) n += Index(arch.dims[i - 1]) * (arch.dims[i - 1] + arch.dims[i]);
      return n;
    case ParamSpace::virtual_weights:
      return Index(arch.layers) * arch.dims[0] * arch.dims[0] + Index(arch.dims.back()) * arch.dims[0];
  }
  return 0;
}

namespace {

template <class S>
Mat<S> take(const S*& cursor, Index rows, Index cols) {
  using RowMajor = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat<S> m = Eigen::Map<const RowMajor>(cursor, rows, cols);
  cursor += rows * cols;
  return m;
}

void put(double*& cursor, const Matrix& m) {
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<RowMajor>(cursor, m.rows(), m.cols()) = m;
  cursor += m.size();
}

template <class S>
std::vector<detail::LayerMats<S>> layer_mats(const Architecture& arch, ParamSpace space, const S* cursor) {
  std::vector<detail::LayerMats<S>> out;
  for (int i = 1; i <= arch.layers; ++i) {
    const Index din = arch.dims[i - 1];
    const Index dout = arch.dims[i];
    if (space == ParamSpace::raw_qkv) {
      const Index a = arch.attn_dims[i - 1];
      Mat<S> Q = take(cursor, a, din);
      Mat<S> K = take(cursor, a, din);
      Mat<S> V = take(cursor, dout, din);
      out.push_back({K.transpose() * Q, std::move(V)});
    } else {
      Mat<S> A = take(cursor, din, din);
      Mat<S> V = take(cursor, dout, din);
      out.push_back({std::move(A), std::move(V)});
    }
  }
  return out;
}

template <class S>
Mat<S> eval_generic(const Architecture& arch, ParamSpace space, const S* theta, const Mat<S>& X, Model model,
                    double tau) {
  if (space == ParamSpace::virtual_weights) {
    const Index d0 = arch.dims[0];
    std::vector<Mat<S>> M;
    for (int i = 0; i < arch.layers; ++i) M.push_back(take(theta, d0, d0));
    Mat<S> L = take(theta, Index(arch.dims.back()), d0);
    return model == Model::lightning ? detail::virtual_lightning<S>(M, L, X)
                                     : detail::virtual_softmax<S>(M, L, X, tau);
  }
  const auto layers = layer_mats<S>(arch, space, theta);
  return model == Model::lightning ? detail::deep_lightning<S>(layers, X)
                                   : detail::deep_softmax<S>(layers, X, tau);
}

void check_point(const ParamPoint& p) {
  p.arch.validate();
  if (p.theta.size() != parameter_count(p.arch, p.space)) {
    throw DimensionError("parameter vector has " + std::to_string(p.theta.size()) + " entries, expected " +
                         std::to_string(parameter_count(p.arch, p.space)));
  }
}

void check_input(const ParamPoint& p, const TokenMatrix& x) {
  if (x.dim() != p.arch.dims[0]) throw DimensionError("input must have d_0 rows");
}

}  // namespace

ParamPoint flatten(const DeepWeights& w) {
  w.validate();
  ParamPoint p{w.arch, w.parametrization() == Parametrization::qkv ? ParamSpace::raw_qkv : ParamSpace::attn_v, {}};
  p.theta.resize(parameter_count(p.arch, p.space));
  double* cursor = p.theta.data();
  if (const auto* qkv = std::get_if<std::vector<QKVLayer>>(&w.layers)) {
    for (const auto& l : *qkv) {
      put(cursor, l.Q);
      put(cursor, l.K);
      put(cursor, l.V);
    }
  } else {
    for (const auto& l : std::get<std::vector<AttnLayer>>(w.layers)) {
      put(cursor, l.A);
      put(cursor, l.V);
    }
  }
  return p;
}

ParamPoint flatten(const VirtualWeights& vw, const Architecture& arch) {
  vw.validate();
  arch.validate();
  if (vw.layers() != arch.layers || vw.input_dim() != arch.dims.front() || vw.output_dim() != arch.dims.back()) {
    throw DimensionError("virtual weights do not match the architecture");
  }
  ParamPoint p{arch, ParamSpace::virtual_weights, Vector(parameter_count(arch, ParamSpace::virtual_weights))};
  double* cursor = p.theta.data();
  for (const auto& m : vw.M) put(cursor, m);
  put(cursor, vw.L);
  return p;
}

DeepWeights unflatten_weights(const ParamPoint& p) {
  check_point(p);
  if (p.space == ParamSpace::virtual_weights) throw InvalidInputError("virtual parameters have no layer weights");
  const double* cursor = p.theta.data();
  DeepWeights w{p.arch, {}};
  if (p.space == ParamSpace::raw_qkv) {
    std::vector<QKVLayer> layers;
    for (int i = 1; i <= p.arch.layers; ++i) {
      const Index din = p.arch.dims[i - 1];
      const Index a = p.arch.attn_dims[i - 1];
      Matrix Q = take(cursor, a, din);
      Matrix K = take(cursor, a, din);
      Matrix V = take(cursor, Index(p.arch.dims[i]), din);
      layers.push_back({std::move(Q), std::move(K), std::move(V)});
    }
    w.layers = std::move(layers);
  } else {
    std::vector<AttnLayer> layers;
    for (int i = 1; i <= p.arch.layers; ++i) {
      const Index din = p.arch.dims[i - 1];
      Matrix A = take(cursor, din, din);
      Matrix V = take(cursor, Index(p.arch.dims[i]), din);
      layers.push_back({std::move(A), std::move(V)});
    }
    w.layers = std::move(layers);
  }
  return w;
}

VirtualWeights unflatten_virtual(const ParamPoint& p) {
  check_point(p);
  if (p.space != ParamSpace::virtual_weights) throw InvalidInputError("not a virtual-weight parameter point");
  const double* cursor = p.theta.data();
  VirtualWeights vw;
  const Index d0 = p.arch.dims[0];
  for (int i = 0; i < p.arch.layers; ++i) vw.M.push_back(take(cursor, d0, d0));
  vw.L = take(cursor, Index(p.arch.dims.back()), d0);
  return vw;
}

ParamPoint sample_parameters(const Architecture& arch, ParamSpace space, std::uint64_t seed) {
  arch.validate();
  if (space == ParamSpace::virtual_weights) {
    const StreamKey key = stream_key(seed, "weights", 1);
    VirtualWeights vw;
    const Index d0 = arch.dims[0];
    for (int i = 0; i < arch.layers; ++i) vw.M.push_back(sample_gaussian_matrix(d0, d0, key.child(i)));
    vw.L = sample_gaussian_matrix(arch.dims.back(), d0, key.child(arch.layers));
    return flatten(vw, arch);
  }
  return flatten(random_deep_weights(
      arch, space == ParamSpace::raw_qkv ? Parametrization::qkv : Parametrization::attn, seed));
}

TokenMatrix evaluate(const ParamPoint& p, const TokenMatrix& x, Model model, const SoftmaxConfig& cfg) {
  check_point(p);
  check_input(p, x);
  cfg.validate();
  Matrix y = eval_generic<double>(p.arch, p.space, p.theta.data(), x.matrix(), model, cfg.tau);
  if (!all_finite(y)) throw OverflowError("forward pass produced non-finite values");
  return TokenMatrix(std::move(y));
}

Matrix directional_derivative(const ParamPoint& p, const Vector& direction, const TokenMatrix& x, Model model,
                              const SoftmaxConfig& cfg) {
  check_point(p);
  check_input(p, x);
  cfg.validate();
  if (direction.size() != p.theta.size()) throw DimensionError("direction must match the parameter count");
  std::vector<Dual> theta(static_cast<std::size_t>(p.theta.size()));
  for (Index k = 0; k < p.theta.size(); ++k) theta[k] = Dual(p.theta(k), direction(k));
  const Mat<Dual> X = x.matrix().cast<Dual>();
  const Mat<Dual> y = eval_generic<Dual>(p.arch, p.space, theta.data(), X, model, cfg.tau);
  Matrix out(y.rows(), y.cols());
  for (Index r = 0; r < y.rows(); ++r) {
    for (Index c = 0; c < y.cols(); ++c) {
      if (!isfinite(y(r, c))) throw OverflowError("derivative produced non-finite values");
      out(r, c) = y(r, c).eps;
    }
  }
  return out;
}

Matrix directional_derivative(const DeepWeights& w, const Vector& direction, const TokenMatrix& x, Model model,
                              const SoftmaxConfig& cfg) {
  return directional_derivative(flatten(w), direction, x, model, cfg);
}

JacobianMatrix assemble_jacobian(const ParamPoint& p, const std::vector<TokenMatrix>& inputs, Model model,
                                 const SoftmaxConfig& cfg, unsigned threads) {
  check_point(p);
  cfg.validate();
  if (inputs.empty()) throw InvalidInputError("need at least one input");
  const Index t = inputs.front().tokens();
  for (const auto& x : inputs) {
    check_input(p, x);
    if (x.tokens() != t) throw DimensionError("all inputs must share the token count");
  }
  JacobianMatrix J;
  J.space = p.space;
  J.inputs = static_cast<Index>(inputs.size());
  J.tokens = t;
  J.output_dim = p.arch.dims.back();
  const Index block = J.output_dim * t;
  const Index P = p.theta.size();
  J.entries = Matrix::Zero(J.inputs * block, P);

  std::vector<Mat<Dual>> xs;
  xs.reserve(inputs.size());
  for (const auto& x : inputs) xs.push_back(x.matrix().cast<Dual>());

  // Each worker owns a contiguous range of columns, so the result is independent
  // of the thread count.
  auto work = [&](Index begin, Index end, std::exception_ptr& error) {
    try {
      std::vector<Dual> theta(static_cast<std::size_t>(P));
      for (Index k = 0; k < P; ++k) theta[k] = Dual(p.theta(k));
      for (Index col = begin; col < end; ++col) {
        theta[col].eps = 1.0;
        for (Index n = 0; n < J.inputs; ++n) {
          const Mat<Dual> y = eval_generic<Dual>(p.arch, p.space, theta.data(), xs[n], model, cfg.tau);
          for (Index r = 0; r < y.rows(); ++r) {
            for (Index c = 0; c < t; ++c) {
              const Dual& v = y(r, c);
              if (!isfinite(v)) throw OverflowError("Jacobian entry is non-finite");
              J.entries(n * block + r * t + c, col) = v.eps;
            }
          }
        }
        theta[col].eps = 0.0;
      }
    } catch (...) {
      error = std::current_exception();
    }
  };

  unsigned n_threads = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
  n_threads = static_cast<unsigned>(std::min<Index>(n_threads, std::max<Index>(P, 1)));
  std::vector<std::exception_ptr> errors(n_threads);
  if (n_threads <= 1) {
    work(0, P, errors[0]);
  } else {
    std::vector<std::thread> pool;
    const Index chunk = (P + n_threads - 1) / n_threads;
    for (unsigned w = 0; w < n_threads; ++w) {
      const Index begin = std::min<Index>(P, w * chunk);
      const Index end = std::min<Index>(P, begin + chunk);
      pool.emplace_back(work, begin, end, std::ref(errors[w]));
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return J;
}

JacobianMatrix assemble_jacobian(const DeepWeights& w, const std::vector<TokenMatrix>& inputs, Model model,
                                 const SoftmaxConfig& cfg, unsigned threads) {
  return assemble_jacobian(flatten(w), inputs, model, cfg, threads);
}

std::vector<TokenMatrix> sample_inputs(const Architecture& arch, int count, std::uint64_t seed) {
  if (count < 1) throw InvalidInputError("need at least one input");
  std::vector<TokenMatrix> xs;
  xs.reserve(static_cast<std::size_t>(count));
  for (int n = 0; n < count; ++n) {
    xs.emplace_back(sample_gaussian_matrix(arch.dims[0], arch.tokens,
                                           stream_key(seed, "inputs", static_cast<std::uint64_t>(n))));
  }
  return xs;
}

DimensionReport estimate_dimension(const Architecture& arch, const EstimateOptions& opts) {
  arch.validate();
  if (opts.n_inputs < 1) throw InvalidInputError("N must be >= 1");
  DimensionReport r;
  r.arch = arch;
  r.space = opts.space;
  r.n_inputs = opts.n_inputs;
  r.seed = opts.seed;
  r.rel_tol = opts.rel_tol;
  r.parameter_count = parameter_count(arch, opts.space);

  try {
    r.prediction = predict_for(arch, opts.space);
  } catch (const UnsupportedArchitectureError& e) {
    r.prediction_unavailable = e.what();
  }

  const ParamPoint point = sample_parameters(arch, opts.space, opts.seed);
  const auto inputs = sample_inputs(arch, opts.n_inputs, opts.seed);
  const JacobianMatrix J = assemble_jacobian(point, inputs, arch.model, opts.softmax, opts.threads);
  r.estimate = numerical_rank(J.entries, opts.rel_tol);
  r.ill_separated = r.estimate.gap_ratio < kMinGapRatio;
  if (r.ill_separated) {
    r.warnings.push_back("ill-separated singular spectrum (gap ratio " + std::to_string(r.estimate.gap_ratio) +
                         " < 100)");
  }
  const Index max_rank = std::min(J.entries.rows(), J.entries.cols());
  if (r.prediction && r.prediction->value > max_rank) {
    r.warnings.push_back("Jacobian has only " + std::to_string(J.entries.rows()) +
                         " rows; increase N to resolve the predicted dimension");
  }
  r.agree = r.prediction && r.prediction->value == r.estimate.rank;
  return r;
}

nlohmann::json to_json(const DimensionReport& r) {
  nlohmann::json j{{"arch", to_json(r.arch)},
                   {"model", to_string(r.arch.model)},
                   {"param_space", to_string(r.space)},
                   {"N", r.n_inputs},
                   {"seed", r.seed},
                   {"rel_tol", r.rel_tol},
                   {"parameter_count", r.parameter_count},
                   {"estimated", r.estimate.rank},
                   {"agree", r.agree},
                   {"singular_values", r.estimate.singular_values},
                   {"warnings", r.warnings}};
  if (r.prediction) {
    j["expected"] = r.prediction->value;
    j["prediction"] = to_json(*r.prediction);
  } else {
    j["expected"] = nullptr;
    j["prediction_unavailable"] = r.prediction_unavailable;
  }
  // JSON has no infinity; an undiscarded spectrum is reported as null.
  j["gap_ratio"] = std::isfinite(r.estimate.gap_ratio) ? nlohmann::json(r.estimate.gap_ratio) : nlohmann::json(nullptr);
  return j;
}

}  // namespace neurodim
