#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "neurodim/attention.hpp"
#include "neurodim/cli.hpp"

using namespace neurodim;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;

  nlohmann::json json() const { return nlohmann::json::parse(out); }
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "neurodim");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "neurodim-cli-test";
  fs::create_directories(dir);
  return dir / name;
}

std::string write_json(const std::string& name, const nlohmann::json& j) {
  const fs::path p = temp_path(name);
  std::ofstream(p) << j.dump();
  return p.string();
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("predict") {
  const Run one = run({"predict", "--model", "lightning", "--layers", "1", "--dims", "2,1", "--attn", "2", "--tokens", "2"});
  CHECK(one.code == 0);
  CHECK(one.json()["value"] == 5);
  CHECK(one.json()["terms"].size() == 3);

  const Run soft = run({"predict", "--model", "softmax", "--layers", "2", "--dims", "3,3,3", "--attn", "2,2", "--tokens", "3"});
  CHECK(soft.code == 0);
  CHECK(soft.json()["value"] == 25);

  const Run shared = run({"predict", "--model", "softmax", "--layers", "2", "--dims", "3,3,3", "--attn", "2", "--tokens", "3"});
  CHECK(shared.json()["value"] == 25);

  const Run bad = run({"predict", "--layers", "2", "--dims", "3,5,3", "--attn", "2,2", "--tokens", "3"});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("bottleneck hypothesis violated") != std::string::npos);

  CHECK(run({"predict", "--layers", "2", "--dims", "3,3", "--attn", "2"}).code == 2);
  CHECK(run({"predict", "--dims", "x"}).code == 2);
  CHECK(run({}).code == 2);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("estimate") {
  const Run single = run({"estimate", "--layers", "1", "--dims", "2,1", "--attn", "2", "--tokens", "2", "--inputs", "50"});
  CHECK(single.code == 0);
  const auto j = single.json();
  CHECK(j["estimated"] == 5);
  CHECK(j["agree"] == true);
  CHECK(j["N"] == 50);
  CHECK(j.contains("gap_ratio"));
  CHECK(j.contains("singular_values"));

  const Run soft = run({"estimate", "--model", "softmax", "--layers", "2", "--dims", "4,4,4", "--attn", "2", "--tokens", "3"});
  CHECK(soft.code == 0);
  CHECK(soft.json()["estimated"] == 40);
  CHECK(soft.json()["expected"] == 40);

  const Run starved = run({"estimate", "--model", "softmax", "--layers", "2", "--dims", "8,8,8", "--attn", "2",
                           "--tokens", "3", "--inputs", "1"});
  CHECK(starved.code == 3);
  CHECK(starved.json()["agree"] == false);
  CHECK(starved.json()["estimated"].get<int>() <= 24);

  const Run no_prediction = run({"estimate", "--layers", "2", "--dims", "2,3,2", "--attn", "2", "--tokens", "3", "--inputs", "10"});
  CHECK(no_prediction.code == 0);
  CHECK(no_prediction.json()["expected"].is_null());

  CHECK(run({"estimate", "--layers", "1", "--dims", "2,1", "--attn", "2", "--param-space", "bogus"}).code == 2);
  CHECK(run({"estimate", "--layers", "1", "--dims", "2,1", "--attn", "2", "--tol", "5"}).code == 2);
}

TEST_CASE("output is deterministic apart from meta") {
  const std::vector<std::string> args = {"estimate", "--model", "softmax", "--layers", "2", "--dims", "3,3,3",
                                         "--attn", "2", "--tokens", "3", "--inputs", "40", "--seed", "9"};
  auto a = run(args).json();
  auto b = run(args).json();
  CHECK(a.contains("meta"));
  a.erase("meta");
  b.erase("meta");
  CHECK(a.dump() == b.dump());
}

TEST_CASE("seed from the environment") {
  const std::vector<std::string> args = {"estimate", "--layers", "1", "--dims", "2,1", "--attn", "2", "--inputs", "10"};
  ::setenv("NEURODIM_SEED", "1234", 1);
  const auto env = run(args).json();
  ::unsetenv("NEURODIM_SEED");
  CHECK(env["seed"] == 1234);
  auto explicit_args = args;
  explicit_args.insert(explicit_args.end(), {"--seed", "1234"});
  auto e1 = env;
  auto e2 = run(explicit_args).json();
  e1.erase("meta");
  e2.erase("meta");
  CHECK(e1 == e2);
  CHECK(run(args).json()["seed"] == 0);
}

TEST_CASE("sweep") {
  const fs::path csv = temp_path("sweep.csv");
  const Run r = run({"sweep", "--delta-min", "3", "--delta-max", "4", "--out", csv.string()});
  CHECK(r.code == 0);
  const std::string text = read_file(csv);
  CHECK(text.rfind("delta,estimated,expected,agree,gap_ratio,seconds\n", 0) == 0);
  CHECK(text.find('\r') == std::string::npos);
  std::istringstream lines(text);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(lines, line)) rows.push_back(line);
  REQUIRE(rows.size() == 3);
  CHECK(rows[1].rfind("3,25,25,true,", 0) == 0);
  CHECK(rows[2].rfind("4,40,40,true,", 0) == 0);

  const Run one = run({"sweep", "--delta-min", "3", "--delta-max", "3"});
  CHECK(one.code == 0);
  CHECK(std::count(one.out.begin(), one.out.end(), '\n') == 2);

  const Run lin = run({"sweep", "--model", "lightning", "--delta-min", "3", "--delta-max", "4"});
  CHECK(lin.out.find("\n3,23,23,true,") != std::string::npos);
  CHECK(lin.out.find("\n4,38,38,true,") != std::string::npos);

  CHECK(run({"sweep", "--delta-min", "5", "--delta-max", "4"}).code == 2);
}

TEST_CASE("sweep failure removes the partial file") {
  const fs::path csv = temp_path("broken.csv");
  fs::remove(csv);
  // The threshold is validated only once the first Jacobian is built.
  const Run r = run({"sweep", "--delta-min", "3", "--delta-max", "4", "--inputs", "20", "--tol", "2", "--out",
                     csv.string()});
  CHECK(r.code == 4);
  CHECK_FALSE(fs::exists(csv));
}

TEST_CASE("verify") {
  const Run ok = run({"verify", "--suite", "scaling", "--trials", "5"});
  CHECK(ok.code == 0);
  CHECK(ok.json()["passes"] == 5);
  CHECK(ok.json()["verdict"] == "pass");

  const Run skew = run({"verify", "--suite", "skew", "--trials", "3", "--plant-skew"});
  CHECK(skew.code == 0);
  CHECK(skew.json()["skipped"] == 3);

  const Run pinned = run({"verify", "--suite", "evaluators", "--trials", "3", "--layers", "2", "--dims", "2,3,2",
                          "--attn", "2", "--tokens", "4"});
  CHECK(pinned.code == 0);
  CHECK(pinned.json()["passes"] == 3);

  CHECK(run({"verify", "--suite", "nonsense"}).code == 2);
  CHECK(run({"verify"}).code == 2);
}

TEST_CASE("classify") {
  const Vector k = testing_util::gaussian(3, 1, 1, 0);
  const Vector q = testing_util::gaussian(3, 1, 1, 1);
  const Vector h = testing_util::gaussian(2, 1, 1, 2);
  const std::string boundary = write_json(
      "boundary.json", {{"A", matrix_to_json(k * q.transpose())}, {"V", matrix_to_json(h * k.transpose())}});
  const Run b = run({"classify", "--weights", boundary});
  CHECK(b.code == 0);
  CHECK(b.json()["klass"] == "boundary");

  const std::string zero = write_json("zero.json", {{"A", {{1.0, 2.0}, {3.0, 4.0}}}, {"V", {{0.0, 0.0}, {0.0, 0.0}}}});
  CHECK(run({"classify", "--weights", zero}).json()["klass"] == "zero_function");

  const std::string smooth = write_json("smooth.json", {{"A", {{1.0, 2.0}, {3.0, -4.0}}}, {"V", {{2.0, 0.5}, {1.0, 3.0}}}});
  CHECK(run({"classify", "--weights", smooth}).json()["klass"] == "smooth");

  // A full weights file with one layer is accepted too.
  const Architecture a = testing_util::arch({2, 2}, {2}, 2);
  const std::string full = write_json("full.json", to_json(random_deep_weights(a, Parametrization::qkv, 3)));
  CHECK(run({"classify", "--weights", full}).json()["klass"] == "smooth");

  const fs::path garbage = temp_path("garbage.json");
  std::ofstream(garbage) << "{not json";
  CHECK(run({"classify", "--weights", garbage.string()}).code == 2);
  CHECK(run({"classify", "--weights", temp_path("missing.json").string()}).code == 2);
  const std::string two = write_json("two.json", to_json(random_deep_weights(testing_util::arch({2, 2, 2}, {2, 2}, 2),
                                                                             Parametrization::attn, 3)));
  CHECK(run({"classify", "--weights", two}).code == 2);
}

TEST_CASE("coeffs") {
  const Matrix A = testing_util::gaussian(2, 2, 4, 0);
  const Matrix V = testing_util::gaussian(1, 2, 4, 1);
  const std::string path = write_json("layer.json", {{"A", matrix_to_json(A)}, {"V", matrix_to_json(V)}});
  const Run r = run({"coeffs", "--weights", path, "--tokens", "2"});
  CHECK(r.code == 0);
  const auto j = r.json();
  CHECK(j["total_slots"] == 40);
  CHECK(j["arch"] == nlohmann::json{2, 1, 2});

  // Evaluate the listed coefficients at a random X and compare with the layer.
  const Matrix X = testing_util::gaussian(2, 2, 4, 2);
  Matrix y = Matrix::Zero(1, 2);
  for (const auto& c : j["coeffs"]) {
    double mono = c["val"].get<double>();
    const auto e = c["expo"].get<std::vector<int>>();
    for (int u = 0; u < 4; ++u) mono *= std::pow(X(u / 2, u % 2), e[u]);
    y(c["out"][0].get<int>(), c["out"][1].get<int>()) += mono;
  }
  const Matrix expect = lightning_forward(AttnLayer{A, V}, TokenMatrix(X)).matrix();
  CHECK((y - expect).cwiseAbs().maxCoeff() < 1e-10);

  const std::string zero = write_json("zero_layer.json", {{"A", {{0.0, 0.0}, {0.0, 0.0}}}, {"V", {{0.0, 0.0}}}});
  const Run z = run({"coeffs", "--weights", zero, "--tokens", "2"});
  CHECK(z.json()["coeffs"].empty());
  CHECK(z.json()["total_slots"] == 40);

  CHECK(run({"coeffs", "--weights", path, "--tokens", "6", "--budget", "100"}).code == 4);
}
