#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "tlam/cli.hpp"
#include "tlam/labels.hpp"
#include "tlam/tensor_io.hpp"

using namespace tlam;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "tlam");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& s) const { return path_ / s; }
  std::string str(const std::string& s) const { return (path_ / s).string(); }

 private:
  fs::path path_;
};

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(run({"--help"}).code == kExitOk);
  CHECK(run({"merge", "--help"}).code == kExitOk);
  CHECK(run({}).code == kExitValidation);
  CHECK(run({"frobnicate"}).code == kExitValidation);
  CHECK(run({"merge"}).code == kExitValidation);
  CHECK(run({"train-toy", "--mode", "gan"}).code == kExitValidation);
}

TEST_CASE("synth, merge, visualize") {
  TempDir dir("tlam_test_cli_merge");
  REQUIRE(run({"synth", "--size", "8x6", "--regions", "3", "--out-manifest", dir.str("scene.json")}).code == 0);
  CHECK(fs::exists(dir / "scene_instances.tlt"));
  const auto labels = load_manifest(dir / "scene.json");
  CHECK(labels.size() == 5);

  SUBCASE("naive concat needs no parameters") {
    const auto r = run({"merge", "--manifest", dir.str("scene.json"), "--variant", "naive", "--out", dir.str("z.tlt")});
    CHECK(r.code == 0);
    const auto z = load_tensor(dir / "z.tlt");
    CHECK(z.dims() == Dims{8, 6, 3 + 1 + 3 + 1 + 1});
  }
  SUBCASE("missing params directory is named") {
    const auto r = run({"merge", "--manifest", dir.str("scene.json"), "--params", dir.str("nope"), "--out",
                        dir.str("z.tlt")});
    CHECK(r.code == kExitValidation);
    CHECK(r.err.find("params directory not found") != std::string::npos);
    CHECK(r.err.find(dir.str("nope")) != std::string::npos);
  }
  SUBCASE("missing manifest") {
    CHECK(run({"merge", "--manifest", dir.str("none.json"), "--variant", "naive", "--out", dir.str("z.tlt")}).code ==
          kExitValidation);
  }
  SUBCASE("tlam merge and visualize") {
    REQUIRE(run({"init-params", "--manifest", dir.str("scene.json"), "--d", "8", "--blocks", "1", "--heads", "2",
                 "--out", dir.str("params")})
                .code == 0);
    const auto r = run({"merge", "--manifest", dir.str("scene.json"), "--params", dir.str("params"), "--out",
                        dir.str("z.tlt")});
    CHECK(r.code == 0);
    // 48 pixels x 1 block x 2 heads x 2 x 5^2 x 4
    CHECK(r.out.find("attention_macs 19200") != std::string::npos);
    const auto z = load_tensor(dir / "z.tlt");
    CHECK(z.dims() == Dims{8, 6, 8});
    CHECK(z.dtype() == DType::f32);

    const auto v = run({"visualize", "--concept", dir.str("z.tlt"), "--out", dir.str("z.ppm"), "--basis-out",
                        dir.str("basis")});
    CHECK(v.code == 0);
    const auto ppm = slurp(dir / "z.ppm");
    CHECK(ppm.substr(0, 11) == "P6\n6 8\n255\n");
    CHECK(ppm.size() == 11 + 8 * 6 * 3);
    CHECK(fs::exists(dir / "basis" / "pca.json"));

    CHECK(run({"merge", "--manifest", dir.str("scene.json"), "--params", dir.str("params"), "--variant", "clam",
               "--out", dir.str("z.tlt")})
              .code == kExitValidation);
  }
  SUBCASE("visualize rejects d < 3") {
    save_tensor(Tensor({4, 4, 2}, DType::f32), dir / "thin.tlt");
    CHECK(run({"visualize", "--concept", dir.str("thin.tlt"), "--out", dir.str("t.ppm")}).code == kExitValidation);
  }
}

TEST_CASE("sparsify extremes") {
  TempDir dir("tlam_test_cli_sparsify");
  REQUIRE(run({"synth", "--size", "8x8", "--regions", "4", "--out-manifest", dir.str("in/scene.json"), "--instances",
               dir.str("inst.tlt")})
              .code == 0);
  REQUIRE(run({"sparsify", "--manifest", dir.str("in/scene.json"), "--instances", dir.str("inst.tlt"), "--sparsity",
               "0", "--out-manifest", dir.str("s0/scene.json")})
              .code == 0);
  CHECK(slurp(dir / "s0/scene.json") == slurp(dir / "in/scene.json"));
  for (const auto& l : nlohmann::json::parse(slurp(dir / "in/scene.json"))["labels"]) {
    for (const char* key : {"values", "mask"}) {
      const std::string f = l[key];
      CHECK(slurp(dir / "in" / f) == slurp(dir / "s0" / f));
    }
  }

  REQUIRE(run({"sparsify", "--manifest", dir.str("in/scene.json"), "--instances", dir.str("inst.tlt"), "--sparsity",
               "1", "--out-manifest", dir.str("s1/scene.json")})
              .code == 0);
  for (const auto& l : load_manifest(dir / "s1/scene.json").labels) {
    for (auto b : l.mask.data<std::uint8_t>()) CHECK(b == 0);
    for (auto v : l.values.data<float>()) CHECK(v == 0.0f);
  }

  CHECK(run({"sparsify", "--manifest", dir.str("in/scene.json"), "--instances", dir.str("inst.tlt"), "--sparsity",
             "1.5", "--out-manifest", dir.str("bad/scene.json")})
            .code == kExitValidation);
}

TEST_CASE("gradcheck exit codes") {
  const auto ok = run({"gradcheck", "--preset", "small"});
  CHECK(ok.code == kExitOk);
  CHECK(ok.out.find("gradcheck passed") != std::string::npos);
  const auto bad = run({"gradcheck", "--preset", "small", "--corrupt", "1.1"});
  CHECK(bad.code == kExitNumerical);
  CHECK(bad.out.find("FAIL") != std::string::npos);
}

TEST_CASE("train-toy") {
  TempDir dir("tlam_test_cli_train");
  SUBCASE("zero iterations") {
    const auto r = run({"--threads", "1", "train-toy", "--size", "8x8", "--regions", "3", "--iters", "0", "--d", "8",
                        "--blocks", "1", "--out", dir.str("r.json")});
    CHECK(r.code == 0);
    const auto j = nlohmann::json::parse(slurp(dir / "r.json"));
    CHECK(j["loss"].empty());
    CHECK(j["final_loss"].is_null());
    CHECK(j["eval"].size() == 4);
    CHECK(fs::exists(dir / "r_params" / "params.json"));
    CHECK(fs::exists(dir / "r_concept.ppm"));
  }
  SUBCASE("a huge learning rate exits 2") {
    const auto r = run({"--threads", "1", "train-toy", "--size", "8x8", "--iters", "30", "--d", "8", "--blocks", "1",
                        "--lr", "1e3", "--out", dir.str("r.json")});
    CHECK(r.code == kExitNumerical);
    CHECK(r.err.find("diverged at iteration") != std::string::npos);
    const auto j = nlohmann::json::parse(slurp(dir / "r.json"));
    CHECK(j["diverged"] == true);
  }
  SUBCASE("bad size") {
    CHECK(run({"train-toy", "--size", "8by8", "--out", dir.str("r.json")}).code == kExitValidation);
  }
}

TEST_CASE("bench reports the MAC scaling") {
  const auto r = run({"bench", "--labels", "2", "--size", "4x4", "--d", "8", "--blocks", "1", "--heads", "2",
                      "--repeat", "1"});
  CHECK(r.code == 0);
  CHECK(r.out.find("attention_macs") != std::string::npos);
}
