// SPDX-License-Identifier: Apache-2.0
//
// Dataset ingestion: MNIST (IDX), CIFAR-10 (binary batches) and a seeded
// synthetic image classification task. Everything is returned as normalized
// N x C x H x W tensors.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "dsa/error.hpp"
#include "dsa/nn.hpp"
#include "dsa/tensor.hpp"

namespace dsa::data {

template <typename T>
struct Dataset {
  Tensor<T> images;  // N x C x H x W
  std::vector<int> labels;
  int num_classes = 0;

  int size() const { return static_cast<int>(labels.size()); }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }
};

struct SyntheticOptions {
  int num_classes = 10;
  int channels = 1;
  int height = 16;
  int width = 16;
  int templates_per_class = 2;
  int blobs_per_template = 3;
  int max_shift = 2;
  double noise = 0.6;
};

struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | mnist | cifar10
  std::string path;
  int train_subset = 0;  // 0 = everything
  int test_subset = 0;
  std::uint64_t seed = 0;
  std::vector<double> mean;  // per channel; empty = dataset default
  std::vector<double> stddev;
  std::map<std::string, std::string> checksums;  // file name -> SHA-256 hex
  int synthetic_train = 5000;
  int synthetic_test = 2000;
  SyntheticOptions synthetic;
};

template <typename T>
struct DataSplits {
  Dataset<T> train;  // full training set
  Dataset<T> test;
  std::vector<int> train_idx;  // weight-update part of `train`
  std::vector<int> val_idx;    // held-out part of `train` for keep-ratio updates
};

// ---------------------------------------------------------------------------
// Raw file helpers

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw DataError("SHA-256 computation failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

inline void verify_checksum(const DatasetSpec& spec, const std::string& file,
                            std::span<const unsigned char> bytes) {
  auto it = spec.checksums.find(file);
  if (it == spec.checksums.end()) return;
  const auto actual = sha256_hex(bytes);
  if (actual != it->second) {
    throw DataError("checksum mismatch for '" + file + "': expected " + it->second + ", got " + actual);
  }
}

inline std::uint32_t read_be32(std::span<const unsigned char> b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

struct IdxImages {
  int count = 0, rows = 0, cols = 0;
  std::vector<unsigned char> pixels;
};

/// IDX3 image file: big-endian magic 0x00000803, count, rows, cols, pixels.
inline IdxImages parse_idx_images(std::span<const unsigned char> bytes) {
  if (bytes.size() < 16) throw DataError("IDX image file truncated (header)");
  const auto magic = read_be32(bytes, 0);
  if (magic != 0x00000803) {
    std::ostringstream m;
    m << "bad IDX image magic 0x" << std::hex << std::setw(8) << std::setfill('0') << magic;
    throw DataError(m.str());
  }
  IdxImages out;
  out.count = static_cast<int>(read_be32(bytes, 4));
  out.rows = static_cast<int>(read_be32(bytes, 8));
  out.cols = static_cast<int>(read_be32(bytes, 12));
  const std::size_t need = static_cast<std::size_t>(out.count) * out.rows * out.cols;
  if (bytes.size() - 16 < need) throw DataError("IDX image file truncated (payload)");
  out.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(need));
  return out;
}

/// IDX1 label file: big-endian magic 0x00000801, count, labels.
inline std::vector<int> parse_idx_labels(std::span<const unsigned char> bytes) {
  if (bytes.size() < 8) throw DataError("IDX label file truncated (header)");
  const auto magic = read_be32(bytes, 0);
  if (magic != 0x00000801) {
    std::ostringstream m;
    m << "bad IDX label magic 0x" << std::hex << std::setw(8) << std::setfill('0') << magic;
    throw DataError(m.str());
  }
  const auto count = read_be32(bytes, 4);
  if (bytes.size() - 8 < count) throw DataError("IDX label file truncated (payload)");
  return std::vector<int>(bytes.begin() + 8, bytes.begin() + 8 + count);
}

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

/// CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes
/// (1024 red, 1024 green, 1024 blue, row-major 32x32).
inline void parse_cifar10(std::span<const unsigned char> bytes, std::vector<unsigned char>& pixels,
                          std::vector<int>& labels) {
  if (bytes.size() % kCifarRecordBytes != 0) throw DataError("CIFAR-10 batch truncated (partial record)");
  const std::size_t records = bytes.size() / kCifarRecordBytes;
  for (std::size_t r = 0; r < records; ++r) {
    const auto* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) throw DataError("CIFAR-10 label out of range");
    labels.push_back(rec[0]);
    pixels.insert(pixels.end(), rec + 1, rec + kCifarRecordBytes);
  }
}

template <typename T>
Dataset<T> from_bytes(const std::vector<unsigned char>& pixels, std::vector<int> labels, int c, int h, int w,
                      int num_classes, const std::vector<double>& mean, const std::vector<double>& stddev) {
  Dataset<T> ds;
  const int n = static_cast<int>(labels.size());
  ds.images = Tensor<T>({n, c, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double mu = mean.at(ch), sd = stddev.at(ch);
      for (std::size_t j = 0; j < plane; ++j) {
        const std::size_t idx = (static_cast<std::size_t>(i) * c + ch) * plane + j;
        ds.images[idx] = static_cast<T>((pixels[idx] / 255.0 - mu) / sd);
      }
    }
  }
  ds.labels = std::move(labels);
  ds.num_classes = num_classes;
  return ds;
}

template <typename T>
Dataset<T> take_prefix(Dataset<T> ds, int n) {
  if (n <= 0 || n >= ds.size()) return ds;
  const std::size_t per = ds.images.size() / ds.size();
  ds.images.shape[0] = n;
  ds.images.data.resize(per * n);
  ds.labels.resize(n);
  return ds;
}

// ---------------------------------------------------------------------------
// Loaders

template <typename T>
Dataset<T> load_mnist_files(const std::string& images_path, const std::string& labels_path, const DatasetSpec& spec) {
  const auto img_bytes = read_file(images_path);
  verify_checksum(spec, std::filesystem::path(images_path).filename().string(), img_bytes);
  const auto lbl_bytes = read_file(labels_path);
  verify_checksum(spec, std::filesystem::path(labels_path).filename().string(), lbl_bytes);
  auto images = parse_idx_images(img_bytes);
  auto labels = parse_idx_labels(lbl_bytes);
  if (static_cast<int>(labels.size()) != images.count) throw DataError("MNIST image/label counts differ");
  const std::vector<double> mean = spec.mean.empty() ? std::vector<double>{0.1307} : spec.mean;
  const std::vector<double> sd = spec.stddev.empty() ? std::vector<double>{0.3081} : spec.stddev;
  return from_bytes<T>(images.pixels, std::move(labels), 1, images.rows, images.cols, 10, mean, sd);
}

template <typename T>
Dataset<T> load_cifar10_files(const std::vector<std::string>& paths, const DatasetSpec& spec) {
  std::vector<unsigned char> pixels;
  std::vector<int> labels;
  for (const auto& p : paths) {
    const auto bytes = read_file(p);
    verify_checksum(spec, std::filesystem::path(p).filename().string(), bytes);
    parse_cifar10(bytes, pixels, labels);
  }
  const std::vector<double> mean = spec.mean.empty() ? std::vector<double>{0.4914, 0.4822, 0.4465} : spec.mean;
  const std::vector<double> sd = spec.stddev.empty() ? std::vector<double>{0.2470, 0.2435, 0.2616} : spec.stddev;
  return from_bytes<T>(pixels, std::move(labels), 3, 32, 32, 10, mean, sd);
}

/// Class templates are sums of Gaussian blobs; samples are randomly shifted,
/// rescaled templates plus white noise. Fully determined by the seed.
template <typename T>
std::pair<Dataset<T>, Dataset<T>> make_synthetic(const SyntheticOptions& opt, int train_n, int test_n,
                                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int c = opt.channels, h = opt.height, w = opt.width;
  const int n_templates = opt.num_classes * opt.templates_per_class;
  std::vector<std::vector<double>> templates(n_templates, std::vector<double>(static_cast<std::size_t>(c) * h * w));
  for (auto& tpl : templates) {
    for (int blob = 0; blob < opt.blobs_per_template; ++blob) {
      const int ch = static_cast<int>(unit(rng) * c);
      const double cy = 2.0 + unit(rng) * (h - 4.0), cx = 2.0 + unit(rng) * (w - 4.0);
      const double sy = 1.0 + 2.0 * unit(rng), sx = 1.0 + 2.0 * unit(rng);
      const double amp = (unit(rng) < 0.5 ? -1.0 : 1.0) * (1.0 + unit(rng));
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double dy = (y - cy) / sy, dx = (x - cx) / sx;
          tpl[(static_cast<std::size_t>(ch) * h + y) * w + x] += amp * std::exp(-0.5 * (dy * dy + dx * dx));
        }
      }
    }
  }
  auto generate = [&](int n) {
    Dataset<T> ds;
    ds.num_classes = opt.num_classes;
    ds.images = Tensor<T>({n, c, h, w});
    ds.labels.resize(n);
    const int span = 2 * opt.max_shift + 1;
    for (int i = 0; i < n; ++i) {
      const int label = static_cast<int>(unit(rng) * opt.num_classes);
      const int t = label * opt.templates_per_class + static_cast<int>(unit(rng) * opt.templates_per_class);
      const int sy = static_cast<int>(unit(rng) * span) - opt.max_shift;
      const int sx = static_cast<int>(unit(rng) * span) - opt.max_shift;
      const double scale = 0.7 + 0.6 * unit(rng);
      ds.labels[i] = label;
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            const int ty = y - sy, tx = x - sx;
            double v = 0.0;
            if (ty >= 0 && ty < h && tx >= 0 && tx < w) v = scale * templates[t][(static_cast<std::size_t>(ch) * h + ty) * w + tx];
            v += opt.noise * gauss(rng);
            ds.images[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x] = static_cast<T>(v);
          }
        }
      }
    }
    return ds;
  };
  auto train = generate(train_n);
  auto test = generate(test_n);
  return {std::move(train), std::move(test)};
}

/// Deterministic permutation split of [0, n) into (train, val).
inline std::pair<std::vector<int>, std::vector<int>> split_indices(int n, double val_fraction, std::uint64_t seed) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const int n_val = static_cast<int>(std::lround(val_fraction * n));
  std::vector<int> val(idx.begin(), idx.begin() + n_val);
  std::vector<int> train(idx.begin() + n_val, idx.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {std::move(train), std::move(val)};
}

template <typename T>
DataSplits<T> load_dataset(const DatasetSpec& spec, double val_fraction) {
  namespace fs = std::filesystem;
  DataSplits<T> out;
  if (spec.kind == "synthetic") {
    auto [train, test] = make_synthetic<T>(spec.synthetic, spec.synthetic_train, spec.synthetic_test, spec.seed);
    out.train = std::move(train);
    out.test = std::move(test);
  } else if (spec.kind == "mnist") {
    const fs::path dir(spec.path);
    out.train = load_mnist_files<T>((dir / "train-images-idx3-ubyte").string(),
                                    (dir / "train-labels-idx1-ubyte").string(), spec);
    out.test = load_mnist_files<T>((dir / "t10k-images-idx3-ubyte").string(),
                                   (dir / "t10k-labels-idx1-ubyte").string(), spec);
  } else if (spec.kind == "cifar10") {
    const fs::path dir(spec.path);
    std::vector<std::string> train_files;
    for (int i = 1; i <= 5; ++i) train_files.push_back((dir / ("data_batch_" + std::to_string(i) + ".bin")).string());
    out.train = load_cifar10_files<T>(train_files, spec);
    out.test = load_cifar10_files<T>({(dir / "test_batch.bin").string()}, spec);
  } else {
    throw DataError("unknown dataset kind '" + spec.kind + "'");
  }
  out.train = take_prefix(std::move(out.train), spec.train_subset);
  out.test = take_prefix(std::move(out.test), spec.test_subset);
  std::tie(out.train_idx, out.val_idx) = split_indices(out.train.size(), val_fraction, spec.seed);
  return out;
}

template <typename T>
nn::Batch<T> make_batch(const Dataset<T>& ds, std::span<const int> indices) {
  nn::Batch<T> batch;
  const int n = static_cast<int>(indices.size());
  const std::size_t per = ds.images.size() / ds.size();
  batch.inputs = Tensor<T>({n, ds.channels(), ds.height(), ds.width()});
  batch.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    std::copy_n(ds.images.ptr() + per * indices[i], per, batch.inputs.ptr() + per * i);
    batch.labels[i] = ds.labels[indices[i]];
  }
  return batch;
}

}  // namespace dsa::data
