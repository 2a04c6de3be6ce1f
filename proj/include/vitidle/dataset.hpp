#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vitidle/errors.hpp"
#include "vitidle/rng.hpp"
#include "vitidle/tensor.hpp"
#include "vitidle/vit.hpp"

namespace vitidle {

/// Class-conditional toy images: a bright elongated blob on a noisy
/// background, whose position and orientation encode the label. Classifying
/// one requires attending to the patch subset under the blob.
struct SyntheticDataset {
  std::vector<Tensor> images;  // each image_size x image_size x channels_in
  std::vector<std::size_t> labels;
  std::uint64_t seed = 0;

  std::size_t size() const { return images.size(); }
};

inline SyntheticDataset gen_synthetic_dataset(std::uint64_t seed, std::size_t count,
                                              std::size_t num_classes, const ViTConfig& cfg) {
  cfg.validate();
  if (num_classes == 0) throw ContractError("dataset: num_classes must be positive");
  if (count < num_classes) throw ContractError("dataset: count must cover every class");

  const double side = static_cast<double>(cfg.image_size);
  const double center = side / 2.0;
  const double radius = side / 4.0;
  const double two_pi = 6.283185307179586476925286766559;

  SyntheticDataset ds;
  ds.seed = seed;
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % num_classes;  // balanced within +-1
    const double angle = two_pi * static_cast<double>(label) / static_cast<double>(num_classes);
    const double cx = center + radius * std::cos(angle) + rng.uniform(-1.0, 1.0);
    const double cy = center + radius * std::sin(angle) + rng.uniform(-1.0, 1.0);
    const double amp = 2.0 * rng.uniform(0.9, 1.1);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double sig_long = side / 8.0, sig_short = side / 20.0;

    Tensor img({cfg.image_size, cfg.image_size, cfg.channels_in});
    for (std::size_t y = 0; y < cfg.image_size; ++y) {
      for (std::size_t x = 0; x < cfg.image_size; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double dy = static_cast<double>(y) - cy;
        const double u = ca * dx + sa * dy;   // along the blob axis
        const double v = -sa * dx + ca * dy;  // across
        const double blob = amp * std::exp(-0.5 * (u * u / (sig_long * sig_long) +
                                                   v * v / (sig_short * sig_short)));
        for (std::size_t c = 0; c < cfg.channels_in; ++c) {
          img.data[(y * cfg.image_size + x) * cfg.channels_in + c] =
              blob + rng.normal(0.0, 0.15);
        }
      }
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
  }
  return ds;
}

/// On-disk form: one rank-4 tensor file (count x H x W x C) plus a labels CSV
/// with an "index,label" header.
inline void save_dataset(const std::string& dir, const SyntheticDataset& ds) {
  namespace fs = std::filesystem;
  if (ds.images.empty()) throw ContractError("dataset: nothing to save");
  fs::create_directories(dir);
  const Tensor& first = ds.images.front();
  Tensor packed({ds.images.size(), first.dims[0], first.dims[1], first.dims[2]});
  std::size_t offset = 0;
  for (const Tensor& img : ds.images) {
    if (img.dims != first.dims) throw ContractError("dataset: ragged image extents");
    std::copy(img.data.begin(), img.data.end(), packed.data.begin() + offset);
    offset += img.numel();
  }
  write_tensor((fs::path(dir) / "images.tnsr").string(), packed, Dtype::f64);
  std::ofstream os(fs::path(dir) / "labels.csv");
  if (!os) throw ContractError("dataset: cannot write labels in " + dir);
  os << "index,label\n";
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    os << i << ',' << ds.labels[i] << '\n';
  }
}

inline SyntheticDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  Tensor packed = read_tensor((fs::path(dir) / "images.tnsr").string());
  if (packed.rank() != 4) throw ContractError("dataset: images file must be rank 4");
  SyntheticDataset ds;
  const std::size_t count = packed.dims[0];
  const std::size_t per = packed.numel() / count;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor img({packed.dims[1], packed.dims[2], packed.dims[3]});
    std::copy_n(packed.data.begin() + i * per, per, img.data.begin());
    ds.images.push_back(std::move(img));
  }
  std::ifstream is(fs::path(dir) / "labels.csv");
  if (!is) throw ContractError("dataset: missing labels.csv in " + dir);
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ContractError("dataset: malformed labels.csv");
    ds.labels.push_back(static_cast<std::size_t>(std::stoull(line.substr(comma + 1))));
  }
  if (ds.labels.size() != ds.images.size()) {
    throw ContractError("dataset: image/label count mismatch");
  }
  return ds;
}

}  // namespace vitidle
