#include "neurodim/core.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace neurodim {

bool all_finite(const Matrix& m) { return m.allFinite(); }

TokenMatrix::TokenMatrix(Matrix entries) : x_(std::move(entries)) {
  if (x_.rows() < 1 || x_.cols() < 1) {
    throw InvalidInputError("token matrix must have d >= 1 and t >= 1");
  }
  if (!all_finite(x_)) throw InvalidInputError("token matrix has non-finite entries");
}

std::string_view to_string(Model m) {
  return m == Model::lightning ? "lightning" : "softmax";
}

Model model_from_string(std::string_view s) {
  if (s == "lightning") return Model::lightning;
  if (s == "softmax") return Model::softmax;
  throw InvalidInputError("unknown model '" + std::string(s) + "'");
}

void Architecture::validate() const {
  if (layers < 1) throw InvalidInputError("layer count must be >= 1");
  if (static_cast<int>(dims.size()) != layers + 1) {
    throw InvalidInputError("expected " + std::to_string(layers + 1) + " embedding dims, got " +
                            std::to_string(dims.size()));
  }
  if (static_cast<int>(attn_dims.size()) != layers) {
    throw InvalidInputError("expected " + std::to_string(layers) + " attention dims, got " +
                            std::to_string(attn_dims.size()));
  }
  if (tokens < 1) throw InvalidInputError("token count must be >= 1");
  for (int d : dims) {
    if (d < 1) throw InvalidInputError("embedding dims must be >= 1");
  }
  for (int a : attn_dims) {
    if (a < 1) throw InvalidInputError("attention dims must be >= 1");
  }
}

int Architecture::alpha(int i) const {
  return std::min(attn_dims.at(i - 1), dims.at(i - 1));
}

bool Architecture::is_bottleneck() const {
  if (layers < 2) return false;
  const int delta = dims[1];
  for (int i = 1; i < layers; ++i) {
    if (dims[i] != delta) return false;
  }
  return dims.front() >= delta && dims.back() >= delta;
}

int Architecture::bottleneck_width() const { return layers >= 2 ? dims[1] : 0; }

nlohmann::json to_json(const Architecture& arch) {
  return {{"layers", arch.layers},
          {"dims", arch.dims},
          {"attn", arch.attn_dims},
          {"tokens", arch.tokens},
          {"model", to_string(arch.model)}};
}

Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture arch;
  try {
    arch.layers = j.at("layers").get<int>();
    arch.dims = j.at("dims").get<std::vector<int>>();
    arch.attn_dims = j.at("attn").get<std::vector<int>>();
    arch.tokens = j.value("tokens", 1);
    arch.model = model_from_string(j.value("model", std::string("lightning")));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInputError(std::string("malformed architecture: ") + e.what());
  }
  arch.validate();
  return arch;
}

RankResult numerical_rank(const Matrix& m, double rel_tol) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) throw InvalidInputError("rel_tol must lie in (0, 1)");
  if (!all_finite(m)) throw InvalidInputError("numerical_rank: matrix has non-finite entries");

  RankResult out;
  out.threshold_used = rel_tol;
  if (m.size() == 0) return out;

  Eigen::BDCSVD<Matrix> svd(m);
  const Vector& s = svd.singularValues();
  out.singular_values.assign(s.data(), s.data() + s.size());
  std::sort(out.singular_values.begin(), out.singular_values.end(), std::greater<>());

  const double smax = out.singular_values.empty() ? 0.0 : out.singular_values.front();
  const double cut = rel_tol * smax;
  int r = 0;
  for (double v : out.singular_values) {
    if (v > cut) ++r;
  }
  out.rank = r;

  if (r > 0 && r < static_cast<int>(out.singular_values.size())) {
    const double kept = out.singular_values[r - 1];
    const double dropped = out.singular_values[r];
    out.gap_ratio = dropped > 0.0 ? kept / dropped : std::numeric_limits<double>::infinity();
  }
  return out;
}

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t splitmix64(std::uint64_t z) {
  z += kGolden;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

StreamKey StreamKey::child(std::uint64_t sub) const {
  return {seed, stream, splitmix64(index ^ splitmix64(sub + 0x51ED27ULL))};
}

StreamKey stream_key(std::uint64_t seed, std::string_view name, std::uint64_t index) {
  return {seed, fnv1a(name), index};
}

CounterEngine::CounterEngine(const StreamKey& key)
    : key_(splitmix64(splitmix64(key.seed) ^ splitmix64(key.stream + 1) * 3 ^
                      splitmix64(key.index + 2) * 5)) {}

CounterEngine::result_type CounterEngine::operator()() {
  return splitmix64(key_ + kGolden * (counter_++));
}

Matrix sample_gaussian_matrix(Index rows, Index cols, const StreamKey& key) {
  if (rows < 1 || cols < 1) throw InvalidInputError("sample_gaussian_matrix: empty shape");
  CounterEngine eng(key);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = normal(eng);
  }
  return m;
}

nlohmann::json matrix_to_json(const Matrix& m) {
  if (!all_finite(m)) throw InvalidInputError("cannot encode non-finite matrix");
  nlohmann::json data = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    data.push_back(std::move(row));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  try {
    const auto rows = j.at("rows").get<Index>();
    const auto cols = j.at("cols").get<Index>();
    const auto& data = j.at("data");
    if (rows < 0 || cols < 0 || data.size() != static_cast<std::size_t>(rows)) {
      throw InvalidInputError("matrix row count does not match data");
    }
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const auto& row = data.at(r);
      if (row.size() != static_cast<std::size_t>(cols)) {
        throw InvalidInputError("matrix row " + std::to_string(r) + " has wrong length");
      }
      for (Index c = 0; c < cols; ++c) m(r, c) = row.at(c).get<double>();
    }
    if (!all_finite(m)) throw InvalidInputError("matrix has non-finite entries");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInputError(std::string("malformed matrix: ") + e.what());
  }
}

}  // namespace neurodim
