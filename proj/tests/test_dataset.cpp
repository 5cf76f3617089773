#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cfdr/dataset.hpp"
#include "cfdr/rng.hpp"

using namespace cfdr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("cfdr_test_" + std::to_string(Rng(::getpid()).next_u64()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_records(const fs::path& file, int n, uint64_t seed, uint8_t force_label = 255) {
  Rng rng(seed);
  std::ofstream f(file, std::ios::binary);
  for (int i = 0; i < n; ++i) {
    uint8_t label = force_label != 255 ? force_label : static_cast<uint8_t>(rng.below(10));
    f.put(static_cast<char>(label));
    for (int j = 0; j < 3072; ++j) f.put(static_cast<char>(rng.below(256)));
  }
}

}  // namespace

TEST_CASE("blobs are deterministic and validated") {
  Dataset a = make_synthetic_blobs(20, 10, 3);
  Dataset b = make_synthetic_blobs(20, 10, 3);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  Dataset c = make_synthetic_blobs(20, 10, 4);
  CHECK(a.images != c.images);

  CHECK_THROWS_AS(make_synthetic_blobs(0, 10, 1), DataError);
  CHECK_THROWS_AS(make_synthetic_blobs(5, 10, 1), DataError);
}

TEST_CASE("to_tensor normalizes to [0,1] in CIFAR plane order") {
  Dataset ds = make_synthetic_blobs(4, 4, 9);
  Tensor t = ds.to_tensor({1, 3});
  CHECK(t.shape() == Shape{2, 3, 32, 32});
  for (float v : t.data()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK(t.data()[0] == doctest::Approx(ds.images[1 * 3072] / 255.0f));
}

TEST_CASE("cifar10 loader parses 3073-byte records") {
  TempDir dir;
  for (int i = 1; i <= 5; ++i)
    write_records(dir.path / ("data_batch_" + std::to_string(i) + ".bin"), 7, i);
  write_records(dir.path / "test_batch.bin", 11, 99);

  Dataset train = load_cifar10(dir.path.string(), "train");
  CHECK(train.size() == 35);
  CHECK(train.labeled());
  CHECK(train.provenance == "cifar10-binary");

  Dataset test = load_cifar10(dir.path.string(), "test");
  CHECK(test.size() == 11);
}

TEST_CASE("cifar10 loader error cases") {
  TempDir dir;
  CHECK_THROWS_WITH_AS(load_cifar10(dir.path.string(), "test"), doctest::Contains("missing file"),
                       DataError);

  // truncated: not a multiple of 3073
  {
    std::ofstream f(dir.path / "test_batch.bin", std::ios::binary);
    std::vector<char> junk(3073 * 2 + 100, 0);
    f.write(junk.data(), junk.size());
  }
  try {
    load_cifar10(dir.path.string(), "test");
    FAIL("expected throw");
  } catch (const DataError& e) {
    std::string msg = e.what();
    CHECK(msg.find("6246") != std::string::npos);   // actual size
    CHECK(msg.find("3073") != std::string::npos);
  }

  // label out of range
  write_records(dir.path / "test_batch.bin", 3, 1, /*force_label=*/10);
  CHECK_THROWS_WITH_AS(load_cifar10(dir.path.string(), "test"), doctest::Contains("label 10"),
                       DataError);

  CHECK_THROWS_AS(load_cifar10(dir.path.string(), "validation"), DataError);
}

TEST_CASE("cifar10 round trip reproduces the input bytes") {
  TempDir dir;
  write_records(dir.path / "test_batch.bin", 13, 42);
  std::ifstream f(dir.path / "test_batch.bin", std::ios::binary);
  std::vector<uint8_t> original((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  Dataset ds = load_cifar10(dir.path.string(), "test");
  CHECK(serialize_cifar10(ds) == original);
}

TEST_CASE("subset and label stripping") {
  Dataset ds = make_synthetic_blobs(10, 5, 1);
  Dataset sub = ds.subset({0, 2, 4});
  CHECK(sub.size() == 3);
  CHECK(sub.labels[1] == ds.labels[2]);
  Dataset unl = sub.without_labels();
  CHECK_FALSE(unl.labeled());
  CHECK(unl.images == sub.images);
  CHECK_THROWS_AS(ds.subset({99}), std::out_of_range);
  CHECK_THROWS_AS(serialize_cifar10(unl), DataError);
}
