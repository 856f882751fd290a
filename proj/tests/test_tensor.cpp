#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <fstream>
#include <sstream>

#include "tlam/errors.hpp"
#include "tlam/parallel.hpp"
#include "tlam/rng.hpp"
#include "tlam/tensor.hpp"
#include "tlam/tensor_io.hpp"

using namespace tlam;

namespace {

std::string bytes_of(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(t, os);
  return os.str();
}

std::string hex_bytes(std::initializer_list<int> b) {
  std::string s;
  for (int v : b) s.push_back(static_cast<char>(v));
  return s;
}

Tensor random_tensor(Rng& rng) {
  const std::size_t rank = 1 + rng.next() % 4;
  Dims dims;
  for (std::size_t i = 0; i < rank; ++i) dims.push_back(1 + rng.next() % 5);
  const auto dt = static_cast<DType>(rng.next() % 3);
  Tensor t(dims, dt);
  switch (dt) {
    case DType::f32:
      for (auto& v : t.data<float>()) v = static_cast<float>(rng.normal() * 1e3);
      break;
    case DType::f64:
      for (auto& v : t.data<double>()) v = rng.normal() * 1e-3;
      break;
    case DType::u8:
      for (auto& v : t.data<std::uint8_t>()) v = static_cast<std::uint8_t>(rng.next());
      break;
  }
  return t;
}

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({}, DType::f32), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0}, DType::f32), ShapeError);
  CHECK_THROWS_AS(Tensor::from<double>({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  Tensor t({2, 3}, DType::f64);
  CHECK(t.size() == 6);
  CHECK_THROWS_AS(t.data<float>(), ShapeError);
  CHECK_NOTHROW(t.data<double>());
}

TEST_CASE("row-major index arithmetic, exhaustive on 3x4x2") {
  Tensor t({3, 4, 2}, DType::f64);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      for (std::size_t c = 0; c < 2; ++c) {
        CHECK(t.offset({i, j, c}) == (i * 4 + j) * 2 + c);
        t.at<double>({i, j, c}) = static_cast<double>(100 * i + 10 * j + c);
      }
    }
  }
  CHECK(t.data<double>()[(2 * 4 + 3) * 2 + 1] == 231.0);
  CHECK_THROWS(t.offset({3, 0, 0}));
  CHECK_THROWS(t.offset({0, 0}));
}

TEST_CASE("cast converts values") {
  auto t = Tensor::from<double>({3}, {1.5, -2.0, 300.0});
  auto f = t.cast(DType::f32);
  CHECK(f.dtype() == DType::f32);
  CHECK(f.data<float>()[0] == 1.5f);
  CHECK(t.cast(DType::f64).bit_equal(t));
}

TEST_CASE("TLT1 smallest file is 14 bytes") {
  const auto t = Tensor::from<float>({1}, {0.0f});
  CHECK(bytes_of(t) == hex_bytes({'T', 'L', 'T', '1', 1, 1, 0, 0, 0, 0, 0, 0, 0, 0}));
}

TEST_CASE("TLT1 2x2 u8 payload follows the header") {
  // Oracle: tests/oracles/derive.py. The header is 4 + 1 + 2*4 + 1 = 14 bytes.
  const auto t = Tensor::from<std::uint8_t>({2, 2}, {1, 2, 3, 4});
  const auto b = bytes_of(t);
  CHECK(b == hex_bytes({0x54, 0x4c, 0x54, 0x31, 0x02, 0x02, 0, 0, 0, 0x02, 0, 0, 0, 0x02, 1, 2, 3, 4}));
  CHECK(b.size() == 18);
}

TEST_CASE("TLT1 f64 payload is little-endian") {
  const auto t = Tensor::from<double>({3}, {1.5, -2.0, 0.25});
  CHECK(bytes_of(t) == hex_bytes({0x54, 0x4c, 0x54, 0x31, 0x01, 0x03, 0, 0, 0, 0x01, 0, 0, 0, 0, 0, 0, 0xf8, 0x3f,
                                  0, 0, 0, 0, 0, 0, 0, 0xc0, 0, 0, 0, 0, 0, 0, 0xd0, 0x3f}));
}

TEST_CASE("TLT1 round trip, 3x4x5 f64") {
  Rng rng(3);
  Tensor t({3, 4, 5}, DType::f64);
  for (auto& v : t.data<double>()) v = rng.normal();
  std::istringstream in(bytes_of(t));
  CHECK(read_tensor(in).bit_equal(t));
}

TEST_CASE("TLT1 round trip, 100 random tensors") {
  Rng rng(100);
  for (int i = 0; i < 100; ++i) {
    const auto t = random_tensor(rng);
    std::istringstream in(bytes_of(t));
    const auto back = read_tensor(in);
    REQUIRE(back.bit_equal(t));
  }
}

TEST_CASE("TLT1 read errors name the field") {
  SUBCASE("bad magic") {
    std::istringstream in(std::string("XXXX\x01\x01\x00\x00\x00\x02\x00", 11));
    CHECK_THROWS_WITH_AS(read_tensor(in), doctest::Contains("magic"), FormatError);
  }
  SUBCASE("truncated payload") {
    auto b = bytes_of(Tensor({10}, DType::u8));
    b.resize(b.size() - 5);
    std::istringstream in(b);
    CHECK_THROWS_WITH_AS(read_tensor(in), doctest::Contains("payload"), FormatError);
  }
  SUBCASE("unknown dtype") {
    auto b = bytes_of(Tensor({1}, DType::u8));
    b[9] = 7;
    std::istringstream in(b);
    CHECK_THROWS_WITH_AS(read_tensor(in), doctest::Contains("dtype"), FormatError);
  }
  SUBCASE("truncated dims") {
    std::istringstream in(std::string("TLT1\x02\x01\x00", 7));
    CHECK_THROWS_AS(read_tensor(in), FormatError);
  }
  SUBCASE("zero rank") {
    std::istringstream in(std::string("TLT1\x00\x02", 6));
    CHECK_THROWS_AS(read_tensor(in), FormatError);
  }
}

TEST_CASE("TLT1 file helpers") {
  const auto path = std::filesystem::temp_directory_path() / "tlam_test_tensor.tlt";
  const auto t = Tensor::from<float>({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(save_tensor(t, path) == 14 + 24);
  CHECK(load_tensor(path).bit_equal(t));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_tensor(path), IoError);
}

TEST_CASE("splitmix64 reference values") {
  Rng a(0);
  CHECK(a.next() == 0xE220A8397B1DCDAFULL);
  Rng b(1);
  CHECK(b.next() == 0x910A2DEC89025CC1ULL);
  Rng c(0), d(0);
  for (int i = 0; i < 100; ++i) CHECK(c.next() == d.next());
}

TEST_CASE("splitmix64 seed 42 matches the golden file") {
  std::ifstream f(TLAM_TEST_DATA_DIR "/splitmix64_seed42.txt");
  REQUIRE(f);
  Rng r(42);
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    REQUIRE(r.next() == std::stoull(line, nullptr, 16));
    ++n;
  }
  CHECK(n == 1000);
}

TEST_CASE("uniform and normal moments") {
  Rng r(2024);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  const double mean_u = sum / 1e5;
  CHECK(mean_u >= 0.49);
  CHECK(mean_u <= 0.51);

  Rng n(2025);
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double x = n.normal();
    s1 += x;
    s2 += x * x;
  }
  const double mean = s1 / 1e5, var = s2 / 1e5 - mean * mean;
  CHECK(std::abs(mean) <= 0.02);
  CHECK(var >= 0.97);
  CHECK(var <= 1.03);
  CHECK(Rng(5).uniform() == Rng(5).uniform());
}

TEST_CASE("parallel_chunks uses a fixed partition") {
  for (unsigned threads : {1u, 3u, 8u}) {
    set_num_threads(threads);
    std::vector<std::size_t> seen(chunk_count(1000, 64), 0);
    parallel_chunks(1000, 64, [&](std::size_t c, std::size_t b, std::size_t e) {
      CHECK(b == c * 64);
      CHECK(e == std::min<std::size_t>(1000, b + 64));
      seen[c] = e - b;
    });
    std::size_t total = 0;
    for (auto s : seen) total += s;
    CHECK(total == 1000);
  }
  set_num_threads(2);
  CHECK_THROWS_AS(parallel_chunks(100, 10,
                                  [](std::size_t c, std::size_t, std::size_t) {
                                    if (c == 3) throw ValidationError("boom");
                                  }),
                  ValidationError);
  set_num_threads(1);
}
