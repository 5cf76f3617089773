#include "cfdr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "cfdr/rng.hpp"

namespace cfdr {

namespace {
constexpr int64_t kRecordBytes = 3073;  // 1 label byte + 3072 pixels
}

Tensor Dataset::to_tensor(const std::vector<int64_t>& indices) const {
  int64_t b = static_cast<int64_t>(indices.size());
  if (b == 0) throw std::invalid_argument("to_tensor: empty index list");
  std::vector<float> data(static_cast<size_t>(b) * kImageBytes);
  for (int64_t i = 0; i < b; ++i) {
    int64_t idx = indices[i];
    if (idx < 0 || idx >= size())
      throw std::out_of_range("dataset index " + std::to_string(idx) + " out of range [0," +
                              std::to_string(size()) + ")");
    const uint8_t* src = images.data() + idx * kImageBytes;
    float* dst = data.data() + i * kImageBytes;
    for (int64_t j = 0; j < kImageBytes; ++j) dst[j] = static_cast<float>(src[j]) / 255.0f;
  }
  return Tensor::from_data({b, 3, 32, 32}, std::move(data));
}

Tensor Dataset::to_tensor() const {
  std::vector<int64_t> all(size());
  for (int64_t i = 0; i < size(); ++i) all[i] = i;
  return to_tensor(all);
}

std::vector<int> Dataset::label_subset(const std::vector<int64_t>& indices) const {
  if (!labeled()) throw std::runtime_error("label_subset on unlabeled dataset");
  std::vector<int> out(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) out[i] = labels.at(indices[i]);
  return out;
}

Dataset Dataset::subset(const std::vector<int64_t>& indices) const {
  Dataset out;
  out.split = split;
  out.provenance = provenance;
  out.images.reserve(indices.size() * kImageBytes);
  if (labeled()) out.labels.reserve(indices.size());
  for (int64_t idx : indices) {
    if (idx < 0 || idx >= size())
      throw std::out_of_range("dataset index " + std::to_string(idx) + " out of range [0," +
                              std::to_string(size()) + ")");
    out.images.insert(out.images.end(), images.begin() + idx * kImageBytes,
                      images.begin() + (idx + 1) * kImageBytes);
    if (labeled()) out.labels.push_back(labels[idx]);
  }
  return out;
}

Dataset Dataset::without_labels() const {
  Dataset out = *this;
  out.labels.clear();
  return out;
}

namespace {

void load_cifar_file(const std::string& path, Dataset& ds) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cifar10: missing file " + path);
  f.seekg(0, std::ios::end);
  int64_t bytes = static_cast<int64_t>(f.tellg());
  f.seekg(0);
  if (bytes % kRecordBytes != 0) {
    int64_t records = bytes / kRecordBytes;
    throw DataError("cifar10: " + path + " has " + std::to_string(bytes) +
                    " bytes, not a multiple of 3073 (nearest: " +
                    std::to_string(records * kRecordBytes) + " or " +
                    std::to_string((records + 1) * kRecordBytes) + ")");
  }
  int64_t n = bytes / kRecordBytes;
  std::vector<uint8_t> buf(static_cast<size_t>(bytes));
  f.read(reinterpret_cast<char*>(buf.data()), bytes);
  if (!f) throw DataError("cifar10: short read from " + path);
  for (int64_t i = 0; i < n; ++i) {
    uint8_t label = buf[i * kRecordBytes];
    if (label > 9)
      throw DataError("cifar10: " + path + " record " + std::to_string(i) + " has label " +
                      std::to_string(label) + ", valid range is 0-9");
    ds.labels.push_back(label);
    ds.images.insert(ds.images.end(), buf.begin() + i * kRecordBytes + 1,
                     buf.begin() + (i + 1) * kRecordBytes);
  }
}

}  // namespace

Dataset load_cifar10(const std::string& dir, const std::string& split) {
  Dataset ds;
  ds.split = split;
  ds.provenance = "cifar10-binary";
  namespace fs = std::filesystem;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i)
      load_cifar_file((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string(), ds);
  } else if (split == "test") {
    load_cifar_file((fs::path(dir) / "test_batch.bin").string(), ds);
  } else {
    throw DataError("cifar10: unknown split '" + split + "' (expected train or test)");
  }
  return ds;
}

std::vector<uint8_t> serialize_cifar10(const Dataset& ds) {
  if (!ds.labeled()) throw DataError("serialize_cifar10 requires labels");
  std::vector<uint8_t> out;
  out.reserve(ds.size() * kRecordBytes);
  for (int64_t i = 0; i < ds.size(); ++i) {
    out.push_back(ds.labels[i]);
    out.insert(out.end(), ds.images.begin() + i * Dataset::kImageBytes,
               ds.images.begin() + (i + 1) * Dataset::kImageBytes);
  }
  return out;
}

namespace {

// 10 well-separated RGB anchors, one per class
constexpr uint8_t kPalette[10][3] = {
    {220, 30, 30},  {30, 200, 30},   {40, 40, 230},  {230, 220, 30}, {220, 40, 220},
    {30, 220, 220}, {240, 130, 20},  {130, 20, 240}, {20, 240, 130}, {245, 245, 245},
};

}  // namespace

Dataset make_synthetic_blobs(int64_t n, int classes, uint64_t seed) {
  if (n <= 0) throw DataError("make_synthetic_blobs: n must be positive");
  if (classes <= 0 || classes > 10)
    throw DataError("make_synthetic_blobs: classes must be in 1..10");
  if (n < classes) throw DataError("make_synthetic_blobs: n must be >= classes");

  Dataset ds;
  ds.provenance = "synthetic-blobs";
  ds.images.resize(static_cast<size_t>(n) * Dataset::kImageBytes);
  ds.labels.resize(static_cast<size_t>(n));

  for (int64_t i = 0; i < n; ++i) {
    int cls = static_cast<int>(i % classes);
    ds.labels[i] = static_cast<uint8_t>(cls);
    Rng rng = substream(seed, "blobs", static_cast<uint64_t>(i));
    float cx = rng.uniform(10.0f, 22.0f);
    float cy = rng.uniform(10.0f, 22.0f);
    float radius = rng.uniform(7.0f, 11.0f);
    uint8_t* img = ds.images.data() + i * Dataset::kImageBytes;
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        // dim gray noise background, class-colored disc with a soft edge
        float noise = rng.uniform(0.0f, 60.0f);
        float dx = static_cast<float>(x) - cx;
        float dy = static_cast<float>(y) - cy;
        float dist = std::sqrt(dx * dx + dy * dy);
        float blend = 1.0f / (1.0f + std::exp((dist - radius) * 2.0f));
        for (int c = 0; c < 3; ++c) {
          float v = noise * (1.0f - blend) + static_cast<float>(kPalette[cls][c]) * blend;
          img[c * 1024 + y * 32 + x] = static_cast<uint8_t>(std::clamp(v, 0.0f, 255.0f));
        }
      }
    }
  }
  return ds;
}

}  // namespace cfdr
