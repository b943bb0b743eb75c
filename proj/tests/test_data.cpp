#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <set>

#include "odenet/odenet.hpp"

using namespace odenet;
using namespace odenet::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("odenet_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Dataset cifar_like(std::size_t n, std::uint64_t seed) {
  Dataset d = make_synthetic(n, 3, 32, 10, seed);
  d.name = "cifar10";
  return d;
}

Image ramp_image(std::size_t c, std::size_t hw) {
  Image img{c, hw, std::vector<float>(c * hw * hw)};
  std::iota(img.values.begin(), img.values.end(), 1.0f);
  return img;
}

}  // namespace

TEST(Cifar, RecordArithmetic) {
  auto d = cifar_like(10000, 1);
  auto bytes = encode_cifar10(d);
  EXPECT_EQ(bytes.size(), 30730000u);
  auto back = parse_cifar10(bytes, "mem", kCifarRecordsPerFile);
  EXPECT_EQ(back.size(), 10000u);
  EXPECT_EQ(back.pixels, d.pixels);
  EXPECT_EQ(back.labels, d.labels);
}

TEST(Cifar, SingleBlackRecord) {
  std::vector<std::uint8_t> rec(kCifarRecord, 0);
  rec[0] = 3;
  auto d = parse_cifar10(rec, "one");
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.labels[0], 3);
  EXPECT_EQ(d.channels, 3u);
  EXPECT_EQ(d.hw, 32u);
  for (auto p : d.pixels) EXPECT_EQ(p, 0);
}

TEST(Cifar, SizeAndLabelErrors) {
  std::vector<std::uint8_t> bytes(kCifarRecord * 2, 0);
  try {
    parse_cifar10(bytes, "short.bin", 3);
    FAIL();
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("9219"), std::string::npos) << msg;
    EXPECT_NE(msg.find("6146"), std::string::npos) << msg;
  }
  bytes.push_back(0);
  EXPECT_THROW(parse_cifar10(bytes, "odd.bin"), DataError);
  bytes.pop_back();
  bytes[kCifarRecord] = 10;
  try {
    parse_cifar10(bytes, "bad.bin");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("corrupt"), std::string::npos);
  }
}

TEST(Cifar, DirectoryRoundTrip) {
  auto dir = scratch_dir("cifar");
  Dataset all_train = cifar_like(0, 0), test = cifar_like(10000, 99);
  for (int b = 1; b <= 5; ++b) {
    auto part = cifar_like(10000, static_cast<std::uint64_t>(b));
    write_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), encode_cifar10(part));
    append(all_train, part);
  }
  write_file(dir / "test_batch.bin", encode_cifar10(test));
  auto [tr, te] = load_cifar10(dir);
  EXPECT_EQ(tr.size(), 50000u);
  EXPECT_EQ(te.size(), 10000u);
  EXPECT_EQ(te.split, Split::test);
  EXPECT_EQ(tr.pixels, all_train.pixels);
  EXPECT_EQ(te.labels, test.labels);
  std::vector<int> hist(10, 0);
  for (int l : tr.labels) ++hist[static_cast<std::size_t>(l)];
  for (int h : hist) EXPECT_EQ(h, 5000);
  fs::remove(dir / "data_batch_3.bin");
  EXPECT_THROW(load_cifar10(dir), DataError);
  fs::remove_all(dir);
}

TEST(Mnist, HeaderOnlyIsEmpty) {
  Dataset empty{"mnist", Split::train, 1, 32, 10, {}, {}};
  auto [img, lab] = encode_mnist(empty);
  EXPECT_EQ(img.size(), 16u);
  EXPECT_EQ(lab.size(), 8u);
  auto d = parse_mnist(img, lab, "empty");
  EXPECT_EQ(d.size(), 0u);
  EXPECT_EQ(d.hw, 32u);
}

TEST(Mnist, SingleImageGetsZeroBorder) {
  std::vector<std::uint8_t> img, lab;
  put_be32(img, kIdxImagesMagic);
  put_be32(img, 1);
  put_be32(img, 28);
  put_be32(img, 28);
  for (int i = 0; i < 28 * 28; ++i) img.push_back(200);
  put_be32(lab, kIdxLabelsMagic);
  put_be32(lab, 1);
  lab.push_back(7);
  auto d = parse_mnist(img, lab, "one");
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.labels[0], 7);
  EXPECT_EQ(d.channels, 1u);
  EXPECT_EQ(d.hw, 32u);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const bool inside = y >= 2 && y < 30 && x >= 2 && x < 30;
      EXPECT_EQ(d.pixels[y * 32 + x], inside ? 200 : 0) << y << "," << x;
    }
}

TEST(Mnist, MagicAndCountErrors) {
  Dataset one{"mnist", Split::train, 1, 32, 10, std::vector<std::uint8_t>(1024, 0), {4}};
  auto [img, lab] = encode_mnist(one);
  auto bad = img;
  bad[3] = 0x04;
  try {
    parse_mnist(bad, lab, "x");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("2051"), std::string::npos);
  }
  auto bad_lab = lab;
  bad_lab[3] = 0x02;
  EXPECT_THROW(parse_mnist(img, bad_lab, "x"), DataError);
  auto short_img = img;
  short_img.pop_back();
  EXPECT_THROW(parse_mnist(short_img, lab, "x"), DataError);
  EXPECT_THROW(parse_mnist(std::span<const std::uint8_t>(img.data(), 10), lab, "x"), DataError);
}

TEST(Mnist, DirectoryRoundTripWithGzipFallback) {
  auto dir = scratch_dir("mnist");
  auto tr = make_synthetic(30, 1, 32, 10, 3);
  auto te = make_synthetic(10, 1, 32, 10, 4);
  // the border must be zero for a lossless round trip
  for (auto* d : {&tr, &te})
    for (std::size_t i = 0; i < d->size(); ++i)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x)
          if (y < 2 || y >= 30 || x < 2 || x >= 30) d->pixels[i * 1024 + y * 32 + x] = 0;
  auto [ti, tl] = encode_mnist(tr);
  auto [ei, el] = encode_mnist(te);
  write_file(dir / "train-images-idx3-ubyte", ti);
  write_file(dir / "train-labels-idx1-ubyte", tl);
  write_file(dir / "t10k-images-idx3-ubyte", ei);
  write_file(dir / "t10k-labels-idx1-ubyte", el);
  auto [a, b] = load_mnist(dir);
  EXPECT_EQ(a.pixels, tr.pixels);
  EXPECT_EQ(a.labels, tr.labels);
  EXPECT_EQ(b.pixels, te.pixels);
  EXPECT_EQ(b.split, Split::test);
  fs::remove_all(dir);
}

TEST(Mnist, BundledSubsetLoads) {
  auto [tr, te] = load_mnist(fs::path(ODENET_SOURCE_DIR) / "data" / "mnist5k");
  EXPECT_EQ(tr.size(), 4000u);
  EXPECT_EQ(te.size(), 1000u);
  EXPECT_EQ(tr.hw, 32u);
  std::vector<int> hist(10, 0);
  for (int l : te.labels) ++hist[static_cast<std::size_t>(l)];
  for (int h : hist) EXPECT_EQ(h, 100);
}

TEST(Stl10, ColumnMajorTransposeAndLabels) {
  constexpr std::size_t side = 96, bytes = 3 * side * side;
  std::vector<std::uint8_t> img(bytes), lab{10};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t x = 0; x < side; ++x)
      for (std::size_t y = 0; y < side; ++y) img[(c * side + x) * side + y] = static_cast<std::uint8_t>((x + 3 * y) % 251);
  auto d = parse_stl10(img, lab, "stl");
  EXPECT_EQ(d.labels[0], 9);
  EXPECT_EQ(d.pixels[(1 * side + 5) * side + 7], (7 + 3 * 5) % 251);
  lab[0] = 0;
  EXPECT_THROW(parse_stl10(img, lab, "stl"), DataError);
  img.pop_back();
  EXPECT_THROW(parse_stl10(img, std::vector<std::uint8_t>{1}, "stl"), DataError);
}

TEST(Dataset, ValidationAndSubsets) {
  auto d = make_synthetic(100, 3, 8, 10, 1);
  EXPECT_NO_THROW(d.validate());
  auto sub = d.balanced_subset(25);
  EXPECT_EQ(sub.size(), 25u);
  std::vector<int> hist(10, 0);
  for (int l : sub.labels) ++hist[static_cast<std::size_t>(l)];
  for (int h : hist) EXPECT_LE(h, 3);
  EXPECT_EQ(d.head(7).size(), 7u);
  EXPECT_EQ(d.head(0).size(), 100u);
  d.labels[0] = 10;
  EXPECT_THROW(d.validate(), DataError);
  d.labels[0] = 0;
  d.pixels.pop_back();
  EXPECT_THROW(d.validate(), DataError);
}

TEST(Synthetic, DeterministicInSeed) {
  auto a = make_synthetic(20, 3, 8, 10, 5), b = make_synthetic(20, 3, 8, 10, 5), c = make_synthetic(20, 3, 8, 10, 6);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_NE(a.pixels, c.pixels);
  EXPECT_NO_THROW(a.validate());
}

TEST(Augment, ConstantImageStandardizesToZero) {
  AugmentConfig cfg;
  cfg.pad = 0;
  cfg.hflip = false;
  Image img{3, 4, std::vector<float>(48, 77.0f)};
  std::mt19937_64 rng(1);
  auto out = augment(img, cfg, rng);
  for (float v : out.values) EXPECT_EQ(v, 0.0f);
  auto ev = preprocess_eval(img, cfg);
  for (float v : ev.values) EXPECT_EQ(v, 0.0f);
}

TEST(Augment, CropOffsetsCoverPaddedRange) {
  AugmentConfig cfg;
  cfg.pad = 4;
  std::mt19937_64 rng(2);
  std::set<std::size_t> dys, dxs;
  int flips = 0;
  for (int i = 0; i < 2000; ++i) {
    auto cf = draw_crop_flip(cfg, rng);
    EXPECT_LE(cf.dy, 8u);
    EXPECT_LE(cf.dx, 8u);
    dys.insert(cf.dy);
    dxs.insert(cf.dx);
    flips += cf.flip;
  }
  EXPECT_EQ(dys.size(), 9u);
  EXPECT_EQ(dxs.size(), 9u);
  EXPECT_GT(flips, 850);
  EXPECT_LT(flips, 1150);
}

TEST(Augment, CentredCropWithoutFlipIsIdentity) {
  AugmentConfig cfg;
  cfg.random_crop = false;
  cfg.hflip = false;
  cfg.standardize = Standardize::none;
  auto img = ramp_image(3, 8);
  std::mt19937_64 rng(3);
  EXPECT_EQ(augment(img, cfg, rng).values, img.values);
}

TEST(Augment, ShiftAndFlipMoveTheExpectedPixels) {
  AugmentConfig cfg;
  cfg.pad = 2;
  cfg.standardize = Standardize::none;
  auto img = ramp_image(1, 6);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 a(seed), b(seed);
    const auto cf = draw_crop_flip(cfg, a);
    const auto out = augment(img, cfg, b);
    ASSERT_EQ(out.values.size(), img.values.size());
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x) {
        const long sy = static_cast<long>(y + cf.dy) - 2;
        const long sx = static_cast<long>((cf.flip ? 5 - x : x) + cf.dx) - 2;
        const float want = (sy < 0 || sx < 0 || sy >= 6 || sx >= 6) ? 0.0f : img.values[static_cast<std::size_t>(sy * 6 + sx)];
        EXPECT_EQ(out.values[y * 6 + x], want);
      }
  }
}

TEST(Augment, SameSeedReplays) {
  AugmentConfig cfg;
  auto img = ramp_image(3, 8);
  std::mt19937_64 a(9), b(9);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(augment(img, cfg, a).values, augment(img, cfg, b).values);
}

TEST(Augment, PerImageStandardizationMoments) {
  AugmentConfig cfg;
  auto d = make_synthetic(5, 3, 8, 10, 7);
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto out = preprocess_eval(to_image(d.image(i), 3, 8), cfg);
    double m = 0, v = 0;
    for (float x : out.values) m += x;
    m /= out.values.size();
    for (float x : out.values) v += (x - m) * (x - m);
    v /= out.values.size();
    EXPECT_NEAR(m, 0.0, 1e-4);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Augment, GlobalStandardizationUsesChannelStats) {
  auto d = make_synthetic(20, 3, 8, 10, 8);
  AugmentConfig cfg;
  cfg.standardize = Standardize::global;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  fit_global_stats(d, cfg);
  ASSERT_EQ(cfg.global_mean.size(), 3u);
  double m = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto out = preprocess_eval(to_image(d.image(i), 3, 8), cfg);
    for (std::size_t k = 0; k < 64; ++k) m += out.values[k];
  }
  EXPECT_NEAR(m / (20 * 64), 0.0, 1e-5);
  EXPECT_EQ(parse_standardize("global"), Standardize::global);
  EXPECT_THROW(parse_standardize("zca"), std::invalid_argument);
}

TEST(Batches, TrainDropsTailEvalKeepsIt) {
  auto train = batches(10, 3, 1, 0, Split::train);
  EXPECT_EQ(train.size(), 3u);
  for (const auto& b : train) EXPECT_EQ(b.size(), 3u);
  auto eval = batches(10, 3, 1, 0, Split::test);
  ASSERT_EQ(eval.size(), 4u);
  EXPECT_EQ(eval.back().size(), 1u);
  EXPECT_EQ(eval[0], (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(batches(10, 0, 1, 0, Split::train), std::invalid_argument);
}

TEST(Batches, EpochShuffleIsKeyedAndCovering) {
  EXPECT_EQ(batches(50, 5, 7, 2, Split::train), batches(50, 5, 7, 2, Split::train));
  EXPECT_NE(batches(50, 5, 7, 2, Split::train), batches(50, 5, 7, 3, Split::train));
  EXPECT_NE(batches(50, 5, 7, 2, Split::train), batches(50, 5, 8, 2, Split::train));
  for (std::uint64_t epoch = 0; epoch < 5; ++epoch) {
    std::vector<int> seen(50, 0);
    for (const auto& b : batches(50, 5, 7, epoch, Split::train))
      for (auto i : b) ++seen[i];
    for (int s : seen) EXPECT_EQ(s, 1);
  }
}

TEST(MakeBatch, GeometryLabelsAndDeterminism) {
  auto d = make_synthetic(12, 3, 8, 10, 9);
  AugmentConfig cfg;
  cfg.pad = 1;
  std::vector<std::size_t> idx{4, 0, 11};
  auto a = make_batch<float>(d, idx, cfg, true, 5, 1, 3);
  auto b = make_batch<float>(d, idx, cfg, true, 5, 1, 3);
  EXPECT_EQ(a.images.shape(), (Shape{3, 3, 8, 8}));
  EXPECT_EQ(a.labels, (std::vector<int>{d.labels[4], d.labels[0], d.labels[11]}));
  EXPECT_EQ(a.images, b.images);
  auto e = make_batch<double>(d, idx, cfg, false, 0, 0, 0);
  auto ref = preprocess_eval(to_image(d.image(0), 3, 8), cfg);
  for (std::size_t k = 0; k < ref.values.size(); ++k) EXPECT_EQ(e.images[192 + k], static_cast<double>(ref.values[k]));
}

TEST(Prefetcher, DeliversInOrderAndPropagatesErrors) {
  Prefetcher<int> p(20, 3, [](std::size_t i) { return static_cast<int>(i * i); });
  for (int i = 0; i < 20; ++i) EXPECT_EQ(*p.next(), i * i);
  EXPECT_FALSE(p.next().has_value());
  Prefetcher<int> bad(5, 2, [](std::size_t i) -> int {
    if (i == 2) throw DataError("boom");
    return 1;
  });
  EXPECT_EQ(*bad.next(), 1);
  EXPECT_EQ(*bad.next(), 1);
  EXPECT_THROW(bad.next(), DataError);
}

TEST(Prefetcher, EarlyDestructionDoesNotHang) {
  Prefetcher<int> p(1000, 2, [](std::size_t i) { return static_cast<int>(i); });
  EXPECT_EQ(*p.next(), 0);
}
