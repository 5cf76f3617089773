#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfdr/tensor.hpp"

namespace cfdr {

// Dataset / file-format problems map to CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 32x32x3 byte images stored in CIFAR-10 plane order (1024 R, 1024 G, 1024 B,
// row-major). Labels are optional; unlabeled datasets carry none at all.
struct Dataset {
  static constexpr int64_t kImageBytes = 3072;

  std::vector<uint8_t> images;  // size() * kImageBytes
  std::vector<uint8_t> labels;  // empty when unlabeled
  std::string split = "train";  // "train" | "test"
  std::string provenance;       // "cifar10-binary" | "synthetic-blobs"

  int64_t size() const { return static_cast<int64_t>(images.size()) / kImageBytes; }
  bool labeled() const { return !labels.empty(); }

  // [B,3,32,32] float tensor, pixels normalized to [0,1]
  Tensor to_tensor(const std::vector<int64_t>& indices) const;
  Tensor to_tensor() const;
  std::vector<int> label_subset(const std::vector<int64_t>& indices) const;

  Dataset subset(const std::vector<int64_t>& indices) const;
  Dataset without_labels() const;
};

// Reads the CIFAR-10 binary batches (data_batch_1..5.bin for train,
// test_batch.bin for test). Each 3073-byte record is one label byte followed
// by 3072 pixel bytes.
Dataset load_cifar10(const std::string& dir, const std::string& split);

// Re-emits a labeled dataset in the CIFAR-10 binary record layout.
std::vector<uint8_t> serialize_cifar10(const Dataset& ds);

// Fast training substitute: class-colored blobs on noise backgrounds,
// deterministic per seed and linearly separable by design.
Dataset make_synthetic_blobs(int64_t n, int classes, uint64_t seed);

}  // namespace cfdr
