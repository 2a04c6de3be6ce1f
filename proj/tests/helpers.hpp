#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vitidle/engine.hpp"
#include "vitidle/rng.hpp"
#include "vitidle/tensor.hpp"
#include "vitidle/vit.hpp"

namespace testutil {

using vitidle::EagerEngine;
using vitidle::Rng;
using vitidle::Tape;
using vitidle::Tensor;

inline Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t({r, c});
  for (double& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.dims == b.dims &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

/// Central finite differences against tape gradients for a scalar-valued
/// builder. The builder must be a generic callable usable with both engines:
///   builder(engine, handles) -> scalar handle
/// Returns the max relative error over every coordinate of every input.
template <class Builder>
double max_grad_error(const std::vector<Tensor>& inputs, Builder&& builder,
                      double step = 1e-5) {
  Tape tape;
  std::vector<Tape::Handle> hs;
  for (const Tensor& t : inputs) hs.push_back(tape.input(t));
  const Tape::Handle loss = builder(tape, hs);
  tape.backward(loss);

  auto eval = [&](const std::vector<Tensor>& values) {
    EagerEngine eng;
    std::vector<Tensor> handles = values;
    return builder(eng, handles).data[0];
  };

  double max_rel = 0.0;
  std::vector<Tensor> work = inputs;
  for (std::size_t ti = 0; ti < work.size(); ++ti) {
    const Tensor& analytic = tape.grad(hs[ti]);
    for (std::size_t ci = 0; ci < work[ti].numel(); ++ci) {
      const double orig = work[ti].data[ci];
      work[ti].data[ci] = orig + step;
      const double fp = eval(work);
      work[ti].data[ci] = orig - step;
      const double fm = eval(work);
      work[ti].data[ci] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = analytic.data[ci];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-2});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Scratch directory unique to a test, wiped on creation.
inline std::string scratch_dir(const std::string& name) {
  const std::string dir = "test_scratch/" + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
