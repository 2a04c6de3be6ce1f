#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <sstream>

#include "helpers.hpp"
#include "vitidle/tensor.hpp"

using namespace vitidle;

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5, 0.0)), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::from_rows({{1, 2}, {3}}), ShapeError);
  Tensor t = Tensor::from_rows({{1, 2}, {3, 4}});
  CHECK(t.at(1, 0) == 3.0);
  CHECK(t.numel() == 4);
  CHECK_THROWS_AS(Tensor({4}).rows(), ShapeError);
}

TEST_CASE("binary format golden bytes") {
  Tensor t({2}, std::vector<double>{1.0, 2.0});
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t, Dtype::f64);
  const std::string got = os.str();

  std::string want;
  want += "TNSR";
  want += '\x01';  // version
  want += '\x01';  // dtype f64
  const char rank[4] = {1, 0, 0, 0};
  want.append(rank, 4);
  const char extent[8] = {2, 0, 0, 0, 0, 0, 0, 0};
  want.append(extent, 8);
  for (double v : t.data) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) want += static_cast<char>((bits >> (8 * i)) & 0xff);
  }
  CHECK(got == want);
}

TEST_CASE("binary round trip is bit exact") {
  Rng rng(11);
  for (int iter = 0; iter < 20; ++iter) {
    const std::size_t r = 1 + rng.index(5), c = 1 + rng.index(7);
    Tensor t = testutil::random_tensor(rng, r, c);
    std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
    write_tensor(ss, t, Dtype::f64);
    Tensor back = read_tensor(ss);
    CHECK(testutil::bit_equal(t, back));
  }
}

TEST_CASE("f32 payloads widen on read") {
  Tensor t({3}, std::vector<double>{1.5, -2.25, 1.0 / 3.0});
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_tensor(ss, t, Dtype::f32);
  Tensor back = read_tensor(ss);
  CHECK(back.data[0] == 1.5);    // exactly representable in f32
  CHECK(back.data[1] == -2.25);  // exactly representable in f32
  CHECK(back.data[2] == static_cast<double>(static_cast<float>(1.0 / 3.0)));
}

TEST_CASE("malformed tensor files are rejected") {
  Tensor t({2}, std::vector<double>{1.0, 2.0});
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t, Dtype::f64);
  const std::string good = os.str();

  {
    std::string bad = good;
    bad[0] = 'X';
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_tensor(is), ContractError);
  }
  {
    std::string bad = good;
    bad[4] = '\x02';  // unsupported version
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_tensor(is), ContractError);
  }
  {
    std::string bad = good;
    bad[5] = '\x07';  // unknown dtype
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_tensor(is), ContractError);
  }
  {
    std::string bad = good.substr(0, good.size() - 4);  // truncated payload
    std::istringstream is(bad, std::ios::binary);
    CHECK_THROWS_AS(read_tensor(is), ContractError);
  }
  CHECK_THROWS_AS(read_tensor("does_not_exist.tnsr"), ContractError);
}
