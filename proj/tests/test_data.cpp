#include <gtest/gtest.h>

#include <zlib.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "phanes/data.hpp"
#include "phanes/errors.hpp"
#include "phanes/io.hpp"

using namespace phanes;
namespace fs = std::filesystem;

namespace {

Image random_image(int h, int w, Rng& rng) {
  Image img(h, w);
  for (auto& v : img) v = rng.uniform();
  return img;
}

AugmentParams degenerate_augment() {
  AugmentParams p;
  p.max_rotation_deg = 0;
  p.max_translation_frac = 0;
  p.scale_min = p.scale_max = 1;
  p.hflip_prob = 0;
  return p;
}

// Reference warp: builds the forward map as a matrix, inverts it, and samples
// the source with zero outside the grid.
Image reference_warp(const Image& src, const AffineParams& a) {
  const int h = src.height(), w = src.width();
  const Eigen::Vector2d centre((w - 1) / 2.0, (h - 1) / 2.0);
  const double t = a.rotation_deg * std::numbers::pi / 180.0;
  Eigen::Matrix2d rot;
  rot << std::cos(t), -std::sin(t), std::sin(t), std::cos(t);
  Eigen::Matrix2d flip = Eigen::Matrix2d::Identity();
  if (a.hflip) flip(0, 0) = -1;
  const Eigen::Matrix2d forward = rot * a.scale * flip;
  const Eigen::Matrix2d inverse = forward.inverse();
  const Eigen::Vector2d shift(a.translate_x, a.translate_y);
  auto pixel = [&](int r, int c) { return (r < 0 || c < 0 || r >= h || c >= w) ? 0.0 : src(r, c); };
  Image out(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const Eigen::Vector2d p = inverse * (Eigen::Vector2d(c, r) - centre - shift) + centre;
      const int x0 = static_cast<int>(std::floor(p.x())), y0 = static_cast<int>(std::floor(p.y()));
      double v = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double wx = dx ? p.x() - x0 : 1 - (p.x() - x0);
          const double wy = dy ? p.y() - y0 : 1 - (p.y() - y0);
          v += wx * wy * pixel(y0 + dy, x0 + dx);
        }
      out(r, c) = std::clamp(v, 0.0, 1.0);
    }
  return out;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("phanes_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Minimal NIfTI-1 header: dims, datatype, bitpix, vox_offset, slope, intercept.
std::vector<unsigned char> nifti_header(int nx, int ny, int nz, int datatype, int bitpix, float slope, float inter) {
  std::vector<unsigned char> h(352, 0);
  auto put32 = [&](int off, std::int32_t v) { std::memcpy(h.data() + off, &v, 4); };
  auto put16 = [&](int off, std::int16_t v) { std::memcpy(h.data() + off, &v, 2); };
  auto putf = [&](int off, float v) { std::memcpy(h.data() + off, &v, 4); };
  put32(0, 348);
  put16(40, 3);
  put16(42, static_cast<std::int16_t>(nx));
  put16(44, static_cast<std::int16_t>(ny));
  put16(46, static_cast<std::int16_t>(nz));
  put16(70, static_cast<std::int16_t>(datatype));
  put16(72, static_cast<std::int16_t>(bitpix));
  putf(108, 352.0f);
  putf(112, slope);
  putf(116, inter);
  std::memcpy(h.data() + 344, "n+1", 4);
  return h;
}

}  // namespace

TEST(NormalizePercentile, HandExample) {
  Grid<double> g(2, 2, std::vector<double>{0, 1, 2, 4});
  auto n = normalize_percentile(g, 50);
  EXPECT_DOUBLE_EQ(n[0], 0.0);
  EXPECT_NEAR(n[1], 1.0 / 1.5, 1e-15);
  EXPECT_DOUBLE_EQ(n[2], 1.0);
  EXPECT_DOUBLE_EQ(n[3], 1.0);
}

TEST(NormalizePercentile, ConstantAndFixedPoint) {
  for (double v : normalize_percentile(Grid<double>(4, 4, 0.5))) EXPECT_EQ(v, 1.0);
  Rng rng(1);
  // Top 4% of pixels at the maximum, so the 98th percentile is the maximum.
  auto fixed = random_image(16, 16, rng);
  for (std::size_t i = 0; i < 10; ++i) fixed[i * 25] = 1.0;
  EXPECT_EQ(normalize_percentile(fixed), fixed);
}

TEST(NormalizePercentile, ScaleInvariant) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_image(12, 9, rng);
    const double c = std::exp(rng.uniform(-5, 5));
    Grid<double> scaled = x;
    for (auto& v : scaled) v *= c;
    const double p = rng.uniform(1, 100);
    auto a = normalize_percentile(x, p), b = normalize_percentile(scaled, p);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
  }
}

TEST(NormalizePercentile, Errors) {
  EXPECT_THROW(normalize_percentile(Grid<double>(3, 3, 0.0)), std::invalid_argument);
  try {
    normalize_percentile(Grid<double>(3, 3, 0.0));
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "degenerate image");
  }
  EXPECT_THROW(normalize_percentile(Grid<double>(3, 3, 1.0), 0.0), std::invalid_argument);
  EXPECT_THROW(normalize_percentile(Grid<double>(3, 3, 1.0), 100.5), std::invalid_argument);
}

TEST(ResizePad, IdentityAtTargetSize) {
  Rng rng(3);
  auto x = random_image(16, 16, rng);
  EXPECT_EQ(resize_pad(x, 16), x);
  EXPECT_THROW(resize_pad(x, 0), std::invalid_argument);
}

TEST(ResizePad, PadOnlyPath) {
  Rng rng(4);
  auto x = random_image(64, 32, rng);
  auto y = resize_pad(x, 64);
  ASSERT_EQ(y.height(), 64);
  ASSERT_EQ(y.width(), 64);
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) EXPECT_EQ(y(r, c), (c >= 16 && c < 48) ? x(r, c - 16) : 0.0);
}

TEST(ResizePad, CheckerboardAveragesToHalf) {
  Image board(4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) board(r, c) = (r + c) % 2;
  auto y = resize_pad(board, 2);
  for (double v : y) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Augment, DegenerateParamsAreIdentity) {
  Rng rng(5), data_rng(6);
  for (int i = 0; i < 20; ++i) {
    auto x = random_image(17, 17, data_rng);
    EXPECT_EQ(augment(x, degenerate_augment(), rng), x);
  }
}

TEST(Augment, FlipIsAnInvolution) {
  auto p = degenerate_augment();
  p.hflip_prob = 1;
  Rng rng(7), data_rng(8);
  auto x = random_image(12, 15, data_rng);
  auto once = augment(x, p, rng);
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 15; ++c) EXPECT_EQ(once(r, c), x(r, 14 - c));
  EXPECT_EQ(augment(once, p, rng), x);
}

TEST(Augment, RotationMatchesReferenceWarp) {
  Rng data_rng(9);
  auto x = random_image(32, 32, data_rng);
  AffineParams fixed;
  fixed.rotation_deg = 10;
  auto a = apply_affine(x, fixed), b = reference_warp(x, fixed);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);

  auto p = degenerate_augment();
  p.max_rotation_deg = 10;
  Rng rng(10);
  Rng replay(10);
  auto drawn = sample_affine(p, 32, 32, replay);
  EXPECT_LE(std::abs(drawn.rotation_deg), 10.0);
  auto c = augment(x, p, rng), d = reference_warp(x, drawn);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(c[i], d[i], 1e-6);
}

TEST(Augment, FullTransformMatchesReferenceWarp) {
  Rng rng(11), data_rng(12);
  AugmentParams p;
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_image(20, 24, data_rng);
    auto a = sample_affine(p, 20, 24, rng);
    EXPECT_LE(std::abs(a.translate_x), 0.1 * 24 + 1e-12);
    EXPECT_GE(a.scale, 0.9);
    EXPECT_LE(a.scale, 1.1);
    auto got = apply_affine(x, a), want = reference_warp(x, a);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
  }
}

TEST(Augment, InvalidParams) {
  AugmentParams p;
  p.hflip_prob = 1.5;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = AugmentParams{};
  p.scale_min = 1.2;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(Phantoms, Deterministic) {
  auto a = generate_phantom_dataset(1, 64, 42);
  auto b = generate_phantom_dataset(1, 64, 42);
  EXPECT_EQ(a[0], b[0]);
  EXPECT_NE(generate_phantom_dataset(1, 64, 43)[0], a[0]);
  // Sample i does not depend on how many samples are drawn.
  EXPECT_EQ(generate_phantom_dataset(5, 64, 42)[0], a[0]);
}

TEST(Phantoms, RangeAndNormalization) {
  auto set = generate_phantom_dataset(1000, 32, 7);
  for (const auto& img : set) {
    ASSERT_EQ(img.height(), 32);
    for (double v : img) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    EXPECT_NEAR(percentile(img.values(), 98), 1.0, 0.02);
    EXPECT_NEAR(percentile(normalize_percentile(img).values(), 98), 1.0, 0.02);
  }
}

TEST(Phantoms, LoadNormalizeResizePathKeepsInvariants) {
  const auto dir = scratch("path");
  auto set = generate_phantom_dataset(5, 48, 3);
  for (const auto& img : set) {
    Grid<double> raw = img;
    for (auto& v : raw) v *= 0.4;
    io::write_png(dir / "a.png", raw, 16);
    auto out = resize_pad(normalize_percentile(io::read_png(dir / "a.png")), 32);
    ASSERT_EQ(out.height(), 32);
    ASSERT_EQ(out.width(), 32);
    for (double v : out) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
  fs::remove_all(dir);
}

TEST(Injection, UnchangedOutsideMaskAndChangedInside) {
  auto set = generate_phantom_dataset(200, 32, 13);
  AnomalyConfig config;
  for (std::size_t i = 0; i < set.size(); ++i) {
    Rng rng(100 + i);
    auto s = inject_synthetic_anomaly(set[i], config, rng);
    ASSERT_TRUE(s.gt_mask && s.healthy_reference);
    EXPECT_EQ(*s.healthy_reference, set[i]);
    EXPECT_GT(s.gt_mask->count(), 0u);
    EXPECT_LE(s.gt_mask->fraction(), config.max_area_frac);
    for (std::size_t k = 0; k < s.image.size(); ++k) {
      if ((*s.gt_mask)[k])
        ASSERT_NE(s.image[k], set[i][k]);
      else
        ASSERT_EQ(s.image[k], set[i][k]);
      ASSERT_GE(s.image[k], 0.0);
      ASSERT_LE(s.image[k], 1.0);
    }
  }
}

TEST(Injection, SingleKindsAndQuantization) {
  auto img = generate_phantom_dataset(1, 32, 14)[0];
  for (auto kind : {AnomalyKind::hypo, AnomalyKind::hyper, AnomalyKind::scramble}) {
    AnomalyConfig config;
    config.kinds = {kind};
    config.quantize_levels = 65535;
    Rng rng(15);
    auto s = inject_synthetic_anomaly(img, config, rng);
    double signed_sum = 0;
    for (std::size_t k = 0; k < img.size(); ++k) {
      if (!(*s.gt_mask)[k]) {
        ASSERT_EQ(s.image[k], img[k]);
        continue;
      }
      signed_sum += s.image[k] - img[k];
      EXPECT_NEAR(s.image[k] * 65535, std::round(s.image[k] * 65535), 1e-6);
    }
    if (kind == AnomalyKind::hypo) EXPECT_LT(signed_sum, 0);
    if (kind == AnomalyKind::hyper) EXPECT_GT(signed_sum, 0);
  }
}

TEST(Injection, Deterministic) {
  auto img = generate_phantom_dataset(1, 32, 16)[0];
  Rng a(17), b(17);
  auto s1 = inject_synthetic_anomaly(img, AnomalyConfig{}, a);
  auto s2 = inject_synthetic_anomaly(img, AnomalyConfig{}, b);
  EXPECT_EQ(s1.image, s2.image);
  EXPECT_EQ(*s1.gt_mask, *s2.gt_mask);
}

TEST(Injection, ConfigErrors) {
  auto img = generate_phantom_dataset(1, 32, 18)[0];
  Rng rng(1);
  AnomalyConfig zero;
  zero.min_radius_frac = zero.max_radius_frac = 0;
  EXPECT_THROW(inject_synthetic_anomaly(img, zero, rng), std::invalid_argument);
  AnomalyConfig zero_area;
  zero_area.max_area_frac = 0;
  EXPECT_THROW(inject_synthetic_anomaly(img, zero_area, rng), std::invalid_argument);
  AnomalyConfig huge;
  huge.max_area_frac = 0.6;
  EXPECT_THROW(inject_synthetic_anomaly(img, huge, rng), std::invalid_argument);
}

TEST(Io, Png16RoundTripIsExactOnTheGrid) {
  const auto dir = scratch("png");
  Rng rng(19);
  Image x(9, 13);
  for (auto& v : x) v = rng.uniform_int(0, 65535) / 65535.0;
  io::write_png(dir / "x.png", x, 16);
  auto y = io::read_png(dir / "x.png");
  ASSERT_TRUE(x.same_shape(y));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);

  io::write_png(dir / "x8.png", x, 8);
  auto z = io::read_png(dir / "x8.png");
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(z[i], x[i], 0.5 / 255 + 1e-12);
  EXPECT_THROW(io::read_png(dir / "missing.png"), Error);
  fs::remove_all(dir);
}

TEST(Io, MaskAndRawGridRoundTrip) {
  const auto dir = scratch("mask");
  Rng rng(20);
  BinaryMask m(7, 5);
  for (auto& v : m) v = rng.bernoulli(0.5);
  io::write_mask_png(dir / "m.png", m);
  EXPECT_EQ(io::read_mask_png(dir / "m.png"), m);

  Grid<double> g(6, 4);
  for (auto& v : g) v = rng.normal() * 1e-7;
  io::write_raw_grid(dir / "g.raw", g);
  EXPECT_EQ(io::read_raw_grid(dir / "g.raw"), g);
  fs::remove_all(dir);
}

TEST(Io, ManifestRoundTrip) {
  const auto dir = scratch("manifest");
  std::vector<io::ManifestRecord> recs{{"images/a.png", std::nullopt, std::nullopt},
                                       {"images/b.png", "masks/b.png", std::nullopt},
                                       {"images/c d.png", "masks/c.png", "ref/c.png"}};
  io::write_manifest(dir / "train.tsv", recs);
  auto back = io::read_manifest(dir / "train.tsv");
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].image, recs[i].image);
    EXPECT_EQ(back[i].mask, recs[i].mask);
    EXPECT_EQ(back[i].reference, recs[i].reference);
  }
  fs::remove_all(dir);
}

TEST(Io, NiftiCentreSlice) {
  const auto dir = scratch("nifti");
  const int nx = 4, ny = 3, nz = 5;
  // float32 volume with voxel value 100*z + 10*y + x
  {
    auto hdr = nifti_header(nx, ny, nz, 16, 32, 0.0f, 0.0f);
    std::ofstream out(dir / "v.nii", std::ios::binary);
    out.write(reinterpret_cast<const char*>(hdr.data()), static_cast<std::streamsize>(hdr.size()));
    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
          const float v = static_cast<float>(100 * z + 10 * y + x);
          out.write(reinterpret_cast<const char*>(&v), 4);
        }
  }
  auto s = io::read_nifti_center_slice(dir / "v.nii");
  ASSERT_EQ(s.height(), ny);
  ASSERT_EQ(s.width(), nx);
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) EXPECT_EQ(s(y, x), 200 + 10 * y + x);

  // int16, gzip-compressed, with slope and intercept
  {
    auto hdr = nifti_header(nx, ny, nz, 4, 16, 0.5f, 3.0f);
    gzFile gz = gzopen((dir / "v.nii.gz").c_str(), "wb");
    gzwrite(gz, hdr.data(), static_cast<unsigned>(hdr.size()));
    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
          const auto v = static_cast<std::int16_t>(z * 20 - y * 7 + x);
          gzwrite(gz, &v, 2);
        }
    gzclose(gz);
  }
  auto t = io::read_nifti_center_slice(dir / "v.nii.gz");
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) EXPECT_DOUBLE_EQ(t(y, x), 0.5 * (40 - 7 * y + x) + 3.0);

  io::write_text(dir / "bad.nii", std::string(400, 'x'));
  EXPECT_THROW(io::read_nifti_center_slice(dir / "bad.nii"), Error);
  fs::remove_all(dir);
}
