#include "neurodim/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "neurodim/dimension.hpp"
#include "neurodim/geometry.hpp"
#include "neurodim/verify.hpp"

namespace neurodim {

namespace {

constexpr const char* kVersion = "0.1.0";

struct ArchFlags {
  std::string model = "lightning";
  int layers = 1;
  std::vector<int> dims;
  std::vector<int> attn;
  int tokens = 2;

  Architecture build() const {
    Architecture a;
    a.model = model_from_string(model);
    a.layers = layers;
    a.dims = dims;
    a.attn_dims = attn;
    // A single --attn value is shared by every layer.
    if (a.attn_dims.size() == 1 && layers > 1) a.attn_dims.assign(static_cast<std::size_t>(layers), attn[0]);
    a.tokens = tokens;
    a.validate();
    return a;
  }
};

void add_arch_flags(CLI::App* cmd, ArchFlags& f, bool dims_required) {
  cmd->add_option("--model", f.model, "lightning or softmax")
      ->check(CLI::IsMember({"lightning", "softmax"}))
      ->capture_default_str();
  cmd->add_option("--layers", f.layers, "number of layers l")->capture_default_str();
  auto* dims = cmd->add_option("--dims", f.dims, "embedding dims d_0,...,d_l")->delimiter(',');
  if (dims_required) dims->required();
  auto* attn = cmd->add_option("--attn", f.attn, "query/key dims a_1,...,a_l (one value is shared)")->delimiter(',');
  if (dims_required) attn->required();
  cmd->add_option("--tokens", f.tokens, "token count t")->capture_default_str();
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Everything that may differ between identical runs lives here.
nlohmann::json meta_block() { return {{"tool", "neurodim"}, {"version", kVersion}, {"timestamp", utc_timestamp()}}; }

void emit_json(nlohmann::json j, const std::string& path, std::ostream& out) {
  j["meta"] = meta_block();
  const std::string text = j.dump(2) + "\n";
  if (path.empty()) {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ResourceError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw ResourceError("failed writing '" + path + "'");
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InvalidInputError("cannot read '" + path + "'");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInputError("'" + path + "' is not valid JSON: " + e.what());
  }
}

// Matrices may be given as {"rows", "cols", "data"} or as nested arrays.
Matrix matrix_arg(const nlohmann::json& j) {
  if (!j.is_array()) return matrix_from_json(j);
  const std::size_t rows = j.size();
  const std::size_t cols = rows ? j.at(0).size() : 0;
  return matrix_from_json({{"rows", rows}, {"cols", cols}, {"data", j}});
}

// A single layer: a weights file with one layer, or a bare {"A", "V"} or
// {"Q", "K", "V"} object.
AttnLayer single_layer_from_json(const nlohmann::json& j) {
  try {
    if (j.contains("layers")) {
      const DeepWeights w = deep_weights_from_json(j);
      if (w.layer_count() != 1) throw InvalidInputError("expected a single layer, got " + std::to_string(w.layer_count()));
      return w.attn_layers()[0];
    }
    if (j.contains("Q") && j.contains("K")) {
      return AttnLayer::from_qkv({matrix_arg(j.at("Q")), matrix_arg(j.at("K")), matrix_arg(j.at("V"))});
    }
    AttnLayer layer{matrix_arg(j.at("A")), matrix_arg(j.at("V"))};
    if (layer.A.rows() != layer.A.cols() || layer.V.cols() != layer.A.rows()) {
      throw DimensionError("A must be d x d and V d' x d");
    }
    return layer;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInputError(std::string("malformed layer: ") + e.what());
  }
}

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

struct EstimateFlags {
  int inputs = kDefaultInputs;
  std::uint64_t seed = 0;
  double tol = kDefaultRankTol;
  std::string space = "raw_qkv";
  double tau = 1.0;
  unsigned threads = 0;

  EstimateOptions build() const {
    EstimateOptions o;
    o.n_inputs = inputs;
    o.seed = seed;
    o.rel_tol = tol;
    o.space = param_space_from_string(space);
    o.softmax.tau = tau;
    o.softmax.validate();
    o.threads = threads;
    return o;
  }
};

void add_estimate_flags(CLI::App* cmd, EstimateFlags& f) {
  cmd->add_option("--inputs", f.inputs, "number of random inputs N")->capture_default_str();
  cmd->add_option("--seed", f.seed, "random seed")->envname("NEURODIM_SEED")->capture_default_str();
  cmd->add_option("--tol", f.tol, "relative singular value threshold")->capture_default_str();
  cmd->add_option("--param-space", f.space, "raw_qkv, attn_v or virtual")
      ->check(CLI::IsMember({"raw_qkv", "qkv", "attn_v", "attn", "virtual"}))
      ->capture_default_str();
  cmd->add_option("--tau", f.tau, "softmax temperature")->capture_default_str();
  cmd->add_option("--threads", f.threads, "worker threads (0 = all cores)")->capture_default_str();
}

int cmd_predict(const ArchFlags& af, std::ostream& out) {
  const Architecture arch = af.build();
  emit_json(to_json(predict(arch)), "", out);
  return kExitOk;
}

int cmd_estimate(const ArchFlags& af, const EstimateFlags& ef, const std::string& path, std::ostream& out) {
  const Architecture arch = af.build();
  const DimensionReport r = estimate_dimension(arch, ef.build());
  emit_json(to_json(r), path, out);
  return (!r.prediction || r.agree) ? kExitOk : kExitDisagree;
}

struct SweepFlags {
  std::string model = "softmax";
  int layers = 2;
  int tokens = 3;
  int attn = 2;
  int delta_min = 3;
  int delta_max = 10;
};

int cmd_sweep(const SweepFlags& sf, const EstimateFlags& ef, const std::string& path, std::ostream& out,
              std::ostream& err) {
  if (sf.delta_min < 1 || sf.delta_max < sf.delta_min) {
    throw InvalidInputError("need 1 <= delta-min <= delta-max");
  }
  if (sf.layers < 1 || sf.tokens < 1 || sf.attn < 1) throw InvalidInputError("layers, tokens and attn must be positive");
  const EstimateOptions opts = ef.build();
  const Model model = model_from_string(sf.model);

  std::ofstream file;
  if (!path.empty()) {
    file.open(path, std::ios::binary);
    if (!file) throw ResourceError("cannot open '" + path + "' for writing");
  }
  std::ostream& csv = path.empty() ? out : file;
  bool all_agree = true;
  int rows = 0;
  try {
    csv << "delta,estimated,expected,agree,gap_ratio,seconds\n";
    for (int delta = sf.delta_min; delta <= sf.delta_max; ++delta) {
      Architecture arch;
      arch.model = model;
      arch.layers = sf.layers;
      arch.dims.assign(static_cast<std::size_t>(sf.layers) + 1, delta);
      arch.attn_dims.assign(static_cast<std::size_t>(sf.layers), sf.attn);
      arch.tokens = sf.tokens;
      const auto start = std::chrono::steady_clock::now();
      const DimensionReport r = estimate_dimension(arch, opts);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      const bool agree = r.prediction && r.agree;
      all_agree = all_agree && agree;
      char seconds[32];
      std::snprintf(seconds, sizeof seconds, "%.3f", secs);
      csv << delta << ',' << r.estimate.rank << ',' << (r.prediction ? std::to_string(r.prediction->value) : "")
          << ',' << (agree ? "true" : "false") << ',' << csv_number(r.estimate.gap_ratio) << ',' << seconds << '\n';
      csv.flush();
      ++rows;
      if (!csv) throw ResourceError("failed writing sweep output");
    }
  } catch (const Error& e) {
    if (!path.empty()) {
      file.close();
      std::error_code ec;
      std::filesystem::remove(path, ec);
    }
    err << "sweep aborted: " << e.what() << "\n";
    return kExitAbort;
  }
  if (!path.empty()) {
    file.close();
    emit_json({{"out", path}, {"rows", rows}, {"all_agree", all_agree}}, "", out);
  }
  return all_agree ? kExitOk : kExitDisagree;
}

int cmd_verify(const std::string& suite, const VerifyOptions& vo, const ArchFlags& af, bool pin_arch,
               const std::string& path, std::ostream& out) {
  const Suite s = suite_from_string(suite);
  VerifyOptions o = vo;
  if (pin_arch) o.arch = af.build();
  const VerifyReport r = run_suite(s, o);
  emit_json(to_json(r), path, out);
  return r.passed() ? kExitOk : kExitDisagree;
}

int cmd_classify(const std::string& weights, double tol, std::ostream& out) {
  const AttnLayer layer = single_layer_from_json(read_json_file(weights));
  emit_json(to_json(classify_point(layer, tol)), "", out);
  return kExitOk;
}

int cmd_coeffs(const std::string& weights, int tokens, std::uint64_t budget, const std::string& path,
               std::ostream& out) {
  const AttnLayer layer = single_layer_from_json(read_json_file(weights));
  emit_json(to_json(extract_coefficients(layer, tokens, budget)), path, out);
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Function-space geometry of lightning and softmax self-attention networks", "neurodim"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  ArchFlags arch_flags;
  EstimateFlags est_flags;
  std::string out_path;

  auto* predict_cmd = app.add_subcommand("predict", "closed-form dimension prediction");
  add_arch_flags(predict_cmd, arch_flags, true);

  auto* estimate_cmd = app.add_subcommand("estimate", "Jacobian-rank dimension estimate");
  add_arch_flags(estimate_cmd, arch_flags, true);
  add_estimate_flags(estimate_cmd, est_flags);
  estimate_cmd->add_option("--out", out_path, "write the report here instead of stdout");

  SweepFlags sweep_flags;
  auto* sweep_cmd = app.add_subcommand("sweep", "estimated vs expected dimension over a range of widths delta");
  sweep_cmd->add_option("--model", sweep_flags.model)->check(CLI::IsMember({"lightning", "softmax"}))->capture_default_str();
  sweep_cmd->add_option("--layers", sweep_flags.layers)->capture_default_str();
  sweep_cmd->add_option("--tokens", sweep_flags.tokens)->capture_default_str();
  sweep_cmd->add_option("--attn", sweep_flags.attn, "shared query/key dim")->capture_default_str();
  sweep_cmd->add_option("--delta-min", sweep_flags.delta_min)->capture_default_str();
  sweep_cmd->add_option("--delta-max", sweep_flags.delta_max)->capture_default_str();
  add_estimate_flags(sweep_cmd, est_flags);
  sweep_cmd->add_option("--out", out_path, "CSV output path (stdout if omitted)");

  std::string suite;
  VerifyOptions verify_opts;
  auto* verify_cmd = app.add_subcommand("verify", "randomized symmetry and fiber checks");
  verify_cmd->add_option("--suite", suite, "evaluators|scaling|qk-gauge|interlayer-gauge|fiber-partner|skew|softmax-fiber")
      ->required();
  verify_cmd->add_option("--trials", verify_opts.trials)->capture_default_str();
  verify_cmd->add_option("--seed", verify_opts.seed)->envname("NEURODIM_SEED")->capture_default_str();
  verify_cmd->add_option("--inputs", verify_opts.inputs, "random inputs per trial")->capture_default_str();
  verify_cmd->add_flag("--plant-skew", verify_opts.plant_skew, "skew suite: make M_2 skew-symmetric");
  add_arch_flags(verify_cmd, arch_flags, false);
  verify_cmd->add_option("--out", out_path, "write the report here instead of stdout");

  std::string weights;
  double classify_tol = kDefaultRankTol;
  auto* classify_cmd = app.add_subcommand("classify", "classify a single-layer weight point");
  classify_cmd->add_option("--weights", weights, "JSON file with one layer")->required();
  classify_cmd->add_option("--tol", classify_tol)->capture_default_str();

  int coeff_tokens = 2;
  std::uint64_t budget = kDefaultCoefficientBudget;
  auto* coeffs_cmd = app.add_subcommand("coeffs", "monomial coefficients of a single lightning layer");
  coeffs_cmd->add_option("--weights", weights, "JSON file with one layer")->required();
  coeffs_cmd->add_option("--tokens", coeff_tokens)->capture_default_str();
  coeffs_cmd->add_option("--budget", budget, "maximum number of coefficient slots")->capture_default_str();
  coeffs_cmd->add_option("--out", out_path, "write the coefficients here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*predict_cmd) return cmd_predict(arch_flags, out);
    if (*estimate_cmd) return cmd_estimate(arch_flags, est_flags, out_path, out);
    if (*sweep_cmd) return cmd_sweep(sweep_flags, est_flags, out_path, out, err);
    if (*verify_cmd) {
      const bool pin = verify_cmd->count("--dims") > 0;
      return cmd_verify(suite, verify_opts, arch_flags, pin, out_path, out);
    }
    if (*classify_cmd) return cmd_classify(weights, classify_tol, out);
    if (*coeffs_cmd) return cmd_coeffs(weights, coeff_tokens, budget, out_path, out);
  } catch (const ResourceError& e) {
    err << "error: " << e.what() << "\n";
    return kExitAbort;
  } catch (const OverflowError& e) {
    err << "error: " << e.what() << "\n";
    return kExitAbort;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace neurodim
