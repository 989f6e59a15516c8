// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "slpt/data.hpp"
#include "testing.hpp"

using namespace slpt;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("slpt_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path write(const std::string& name, const std::string& text) const {
    std::ofstream(path_ / name) << text;
    return path_ / name;
  }

 private:
  fs::path path_;
};

std::string pts_text(std::size_t n, std::size_t declared, bool close = true) {
  std::ostringstream os;
  os << "version: 1\nn_points: " << declared << "\n{\n";
  for (std::size_t i = 0; i < n; ++i) os << 2.0 * double(i) << ' ' << 0.5 * double(i) + 1 << '\n';
  if (close) os << "}\n";
  return os.str();
}

std::string row(std::size_t points, std::size_t extra_numbers, const std::string& image,
                const std::string& prefix = "") {
  std::ostringstream os;
  for (std::size_t i = 0; i < points; ++i) os << double(i) << ',' << double(i) + 0.5 << ',';
  os << prefix;
  for (std::size_t i = 0; i < extra_numbers; ++i) os << (i % 2) << ',';
  os << image << '\n';
  return os.str();
}

Tensor dyadic_image(std::size_t h, std::size_t w, Rng& rng) {
  std::uniform_int_distribution<int> u(0, 255);
  std::vector<double> v(3 * h * w);
  for (double& x : v) x = u(rng) / 255.0;
  return Tensor::from({3, h, w}, std::move(v));
}

}  // namespace

TEST(Synthetic, DeterministicInSpecAndIndex) {
  SyntheticSpec spec;
  spec.seed = 7;
  auto a = generate_synthetic(spec, 3), b = generate_synthetic(spec, 3), c = generate_synthetic(spec, 4);
  EXPECT_EQ(a.image.values(), b.image.values());
  EXPECT_EQ(a.landmarks, b.landmarks);
  EXPECT_EQ(a.tags, b.tags);
  EXPECT_NE(a.landmarks, c.landmarks);
  spec.seed = 8;
  EXPECT_NE(generate_synthetic(spec, 3).landmarks, a.landmarks);
}

TEST(Synthetic, ShapesAndRange) {
  SyntheticSpec spec;
  auto s = generate_synthetic(spec, 0);
  EXPECT_EQ(s.image.shape(), (Shape{3, 64, 64}));
  EXPECT_EQ(s.landmarks.size(), 10u);
  for (double v : s.image.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  for (const auto& p : s.landmarks.points) {
    EXPECT_GE(p.x, 0.0);
    EXPECT_LE(p.x, 63.0);
    EXPECT_GE(p.y, 0.0);
    EXPECT_LE(p.y, 63.0);
  }
}

TEST(Synthetic, NoPerturbationGivesCanonicalLayout) {
  SyntheticSpec spec;
  spec.max_translate = spec.max_scale = spec.max_rotate_deg = spec.landmark_jitter = 0.0;
  auto s = generate_synthetic(spec, 11);
  const auto c = synthetic_canonical(spec);
  for (std::size_t k = 0; k < 10; ++k) {
    EXPECT_NEAR(s.landmarks[k].x, c[k].x, 1e-12);
    EXPECT_NEAR(s.landmarks[k].y, c[k].y, 1e-12);
  }
  // eye corners at the horizontal extremes of the ring
  EXPECT_NEAR(c[spec.eye_right()].y, 31.5, 1e-12);
  EXPECT_NEAR(c[spec.eye_left()].y, 31.5, 1e-12);
  EXPECT_GT(c[spec.eye_right()].x, c[spec.eye_left()].x);
}

TEST(Synthetic, MeanLandmarksConvergeToCanonical) {
  // Rotation and scale are off so the expected position is exactly canonical.
  SyntheticSpec spec;
  spec.max_scale = spec.max_rotate_deg = 0.0;
  const std::size_t n = 2000;
  const auto c = synthetic_canonical(spec);
  std::vector<double> mx(10, 0.0), my(10, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto s = generate_synthetic(spec, i);
    for (std::size_t k = 0; k < 10; ++k) {
      mx[k] += s.landmarks[k].x / double(n);
      my[k] += s.landmarks[k].y / double(n);
    }
  }
  // Per axis: uniform translation (variance t^2/3) plus normal jitter.
  const double sd = std::sqrt(spec.max_translate * spec.max_translate / 3.0 +
                              spec.landmark_jitter * spec.landmark_jitter);
  for (std::size_t k = 0; k < 10; ++k) {
    EXPECT_NEAR(mx[k], c[k].x, 3.0 * sd / std::sqrt(double(n)));
    EXPECT_NEAR(my[k], c[k].y, 3.0 * sd / std::sqrt(double(n)));
  }
}

TEST(Synthetic, BlobPeaksSitOnLandmarks) {
  SyntheticSpec spec;
  spec.noise = 0.0;
  spec.hide_prob = 0.0;
  spec.distractors = 0;
  spec.landmark_jitter = 0.0;  // keeps neighbouring blobs out of the search window
  for (std::uint64_t idx = 0; idx < 20; ++idx) {
    auto s = generate_synthetic(spec, idx);
    for (std::size_t k = 0; k < 10; ++k) {
      const auto p = s.landmarks[k];
      double best = -1;
      long bx = 0, by = 0;
      for (long y = long(p.y) - 2; y <= long(p.y) + 2; ++y)
        for (long x = long(p.x) - 2; x <= long(p.x) + 2; ++x) {
          if (x < 0 || y < 0 || x > 63 || y > 63) continue;
          double v = 0;
          for (std::size_t ch = 0; ch < 3; ++ch) v += s.image[(ch * 64 + std::size_t(y)) * 64 + std::size_t(x)];
          if (v > best) {
            best = v;
            bx = x;
            by = y;
          }
        }
      EXPECT_LE(std::abs(double(bx) - p.x), 1.0) << "sample " << idx << " landmark " << k;
      EXPECT_LE(std::abs(double(by) - p.y), 1.0) << "sample " << idx << " landmark " << k;
    }
  }
}

TEST(Synthetic, HiddenBlobsAreTagged) {
  SyntheticSpec spec;
  spec.hide_prob = 1.0;
  spec.distractors = 0;
  spec.noise = 0.0;
  auto s = generate_synthetic(spec, 0);
  EXPECT_EQ(s.tags.size(), 10u);
  EXPECT_EQ(s.tags[3], "hidden:3");
  for (double v : s.image.values()) EXPECT_NEAR(v, 0.1, 1e-15);
}

TEST(Synthetic, OddLandmarkCountIsInputError) {
  SyntheticSpec spec;
  spec.num_landmarks = 7;
  EXPECT_THROW(synthetic_canonical(spec), InputError);
}

TEST(Layouts, FlipMapsAreInvolutionsPairingTheEyes) {
  SyntheticSpec spec;
  for (const auto& l : {layout_300w(), layout_wflw(), layout_cofw(), spec.layout()}) {
    ASSERT_EQ(l.flip_map.size(), l.num_landmarks);
    for (std::size_t i = 0; i < l.num_landmarks; ++i) EXPECT_EQ(l.flip_map[l.flip_map[i]], i);
    EXPECT_EQ(l.flip_map[l.eye_left], l.eye_right);
  }
  EXPECT_EQ(layout_300w().flip_map[0], 16u);
  EXPECT_EQ(layout_300w().flip_map[8], 8u);
  EXPECT_EQ(layout_wflw().flip_map[0], 32u);
  EXPECT_EQ(layout_wflw().flip_map[16], 16u);
}

TEST(Loaders, Pts68WithSiblingImage) {
  TempDir dir;
  auto pts = dir.write("face.pts", pts_text(68, 68));
  Rng rng(1);
  Tensor img = dyadic_image(9, 11, rng);
  write_ppm(dir.path() / "face.ppm", img);
  auto samples = load_annotations(pts, AnnotationFormat::kPts68);
  ASSERT_EQ(samples.size(), 1u);
  EXPECT_EQ(samples[0].landmarks.size(), 68u);
  EXPECT_EQ(samples[0].landmarks[5], (Point{10.0, 3.5}));
  EXPECT_EQ(samples[0].image.values(), img.values());
  // directory form
  EXPECT_EQ(load_annotations(dir.path(), AnnotationFormat::kPts68).size(), 1u);
}

TEST(Loaders, ResizeScalesLandmarks) {
  TempDir dir;
  auto pts = dir.write("face.pts", pts_text(68, 68));
  Rng rng(2);
  write_ppm(dir.path() / "face.ppm", dyadic_image(11, 21, rng));
  LoadOptions opt;
  opt.input_h = 21;
  opt.input_w = 41;
  auto s = load_annotations(pts, AnnotationFormat::kPts68, opt)[0];
  EXPECT_EQ(s.image.shape(), (Shape{3, 21, 41}));
  EXPECT_NEAR(s.landmarks[5].x, 10.0 * 2.0, 1e-12);
  EXPECT_NEAR(s.landmarks[5].y, 3.5 * 2.0, 1e-12);
}

TEST(Loaders, PtsErrors) {
  TempDir dir;
  LoadOptions noimg;
  noimg.load_images = false;
  EXPECT_THROW(load_annotations(dir.write("a.pts", pts_text(68, 68, false)), AnnotationFormat::kPts68, noimg),
               ParseError);
  EXPECT_THROW(load_annotations(dir.write("b.pts", pts_text(40, 68)), AnnotationFormat::kPts68, noimg), ParseError);
  EXPECT_THROW(load_annotations(dir.write("c.pts", pts_text(10, 10)), AnnotationFormat::kPts68, noimg), FormatError);
  EXPECT_THROW(load_annotations(dir.write("d.pts", "{\n1 abc\n}\n"), AnnotationFormat::kPts68, noimg), ParseError);
  EXPECT_THROW(load_annotations(dir.write("e.pts", "{\n1 2 3\n}\n"), AnnotationFormat::kPts68, noimg), ParseError);
  EXPECT_THROW(load_annotations(dir.path() / "missing.pts", AnnotationFormat::kPts68, noimg), InputError);
  EXPECT_THROW(load_annotations(dir.write("f.pts", pts_text(68, 68)), AnnotationFormat::kPts68), InputError);
}

TEST(Loaders, WflwRowsWithAndWithoutBox) {
  TempDir dir;
  Rng rng(3);
  write_ppm(dir.path() / "img.ppm", dyadic_image(8, 8, rng));
  auto path = dir.write("list.txt", row(98, 6, "img.ppm") + "# comment\n" + row(98, 6, "img.ppm", "3,4,50,60,"));
  auto s = load_annotations(path, AnnotationFormat::kWflw98);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].landmarks.size(), 98u);
  EXPECT_EQ(s[0].landmarks[97], (Point{97, 97.5}));
  EXPECT_EQ(s[0].tags, (std::vector<std::string>{"expression", "make-up", "blur"}));
  // with a box the flags follow the 4 box values
  EXPECT_EQ(s[1].tags, s[0].tags);
  EXPECT_EQ(s[1].image.shape(), (Shape{3, 8, 8}));
  EXPECT_THROW(load_annotations(dir.write("bad.txt", row(98, 5, "img.ppm")), AnnotationFormat::kWflw98), ParseError);
  EXPECT_THROW(load_annotations(dir.write("nan.txt", "x" + row(98, 6, "img.ppm")), AnnotationFormat::kWflw98),
               ParseError);
}

TEST(Loaders, Cofw29Rows) {
  TempDir dir;
  LoadOptions noimg;
  noimg.load_images = false;
  auto s = load_annotations(dir.write("cofw.txt", row(29, 29, "a.ppm")), AnnotationFormat::kCofw29, noimg);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].landmarks.size(), 29u);
  EXPECT_EQ(s[0].tags.size(), 14u);
  EXPECT_EQ(s[0].tags[0], "occluded:1");
  EXPECT_FALSE(s[0].image.defined());
  EXPECT_THROW(load_annotations(dir.write("bad.txt", row(29, 33, "a.ppm")), AnnotationFormat::kCofw29, noimg),
               ParseError);
}

TEST(Loaders, FormatNames) {
  EXPECT_EQ(parse_annotation_format("pts68"), AnnotationFormat::kPts68);
  EXPECT_EQ(parse_annotation_format("wflw98-csv"), AnnotationFormat::kWflw98);
  EXPECT_EQ(parse_annotation_format("cofw29"), AnnotationFormat::kCofw29);
  EXPECT_THROW(parse_annotation_format("aflw"), InputError);
}

TEST(Netpbm, RoundTripAndAsciiGray) {
  TempDir dir;
  Rng rng(4);
  Tensor img = dyadic_image(5, 7, rng);
  write_ppm(dir.path() / "x.ppm", img);
  EXPECT_EQ(read_netpbm(dir.path() / "x.ppm").values(), img.values());
  auto gray = read_netpbm(dir.write("g.pgm", "P2\n# c\n2 1\n4\n0 4\n"));
  EXPECT_EQ(gray.values(), (std::vector<double>{0, 1, 0, 1, 0, 1}));
  EXPECT_THROW(read_netpbm(dir.write("bad.ppm", "P7\n1 1\n255\n")), ParseError);
  EXPECT_THROW(read_netpbm(dir.write("short.ppm", "P6\n4 4\n255\nab")), ParseError);
}

TEST(Augment, NoneIsIdentity) {
  auto s = generate_synthetic(SyntheticSpec{}, 0);
  Rng rng(5);
  auto cfg = AugmentConfig::none();
  auto out = augment(s, cfg, rng);
  EXPECT_EQ(out.image.values(), s.image.values());
  EXPECT_EQ(out.landmarks, s.landmarks);
}

TEST(Augment, FlipIsAnExactInvolution) {
  SyntheticSpec spec;
  auto s = generate_synthetic(spec, 1);
  for (auto& p : s.landmarks.points) p = {std::round(p.x * 8) / 8, std::round(p.y * 8) / 8};
  const auto map = spec.layout().flip_map;
  auto once = flip_horizontal(s, map);
  auto twice = flip_horizontal(once, map);
  EXPECT_EQ(twice.image.values(), s.image.values());
  EXPECT_EQ(twice.landmarks, s.landmarks);
  EXPECT_NE(once.landmarks, s.landmarks);
  // landmark k of the flipped sample mirrors landmark flip[k]
  EXPECT_EQ(once.landmarks[0].x, 63.0 - s.landmarks[map[0]].x);
  EXPECT_EQ(once.image[5], s.image[63 - 5]);
}

TEST(Augment, FlippedBlobColorsMatchTheirPairs) {
  SyntheticSpec spec;
  spec.noise = 0.0;
  spec.hide_prob = 0.0;
  spec.distractors = 0;
  spec.intensity_jitter = 0.0;
  spec.max_translate = spec.max_scale = spec.max_rotate_deg = spec.landmark_jitter = 0.0;
  auto s = generate_synthetic(spec, 0);
  auto f = flip_horizontal(s, spec.layout().flip_map);
  // With a symmetric layout the mirrored image equals the original one.
  for (std::size_t i = 0; i < s.image.numel(); ++i) EXPECT_NEAR(f.image[i], s.image[i], 1e-9);
}

TEST(Augment, RotationThenInverseRestoresLandmarks) {
  auto s = generate_synthetic(SyntheticSpec{}, 2);
  for (double deg : {-30.0, 7.5, 29.0}) {
    SimilarityTransform t{1.04, deg * std::numbers::pi / 180.0, 0.0, 0.0};
    SimilarityTransform inv{1.0 / 1.04, -t.rotation_rad, 0.0, 0.0};
    auto back = apply_similarity(apply_similarity(s, t), inv);
    for (std::size_t k = 0; k < s.landmarks.size(); ++k) {
      EXPECT_NEAR(back.landmarks[k].x, s.landmarks[k].x, 1e-9);
      EXPECT_NEAR(back.landmarks[k].y, s.landmarks[k].y, 1e-9);
    }
  }
}

TEST(Augment, TranslationMovesImageAndLandmarksTogether) {
  SyntheticSpec spec;
  auto s = generate_synthetic(spec, 3);
  auto out = apply_similarity(s, SimilarityTransform{1.0, 0.0, 3.0, -2.0});
  EXPECT_EQ(out.landmarks[0], (Point{s.landmarks[0].x + 3.0, s.landmarks[0].y - 2.0}));
  EXPECT_EQ(out.image[(0 * 64 + 20) * 64 + 30], s.image[(0 * 64 + 22) * 64 + 27]);
}

TEST(Augment, KeepsEyeCornersInFrame) {
  SyntheticSpec spec;
  AugmentConfig cfg;
  cfg.flip_map = spec.layout().flip_map;
  cfg.eye_left = spec.eye_left();
  cfg.eye_right = spec.eye_right();
  cfg.translation_px = 30.0;
  Rng rng(6);
  for (std::uint64_t i = 0; i < 50; ++i) {
    auto out = augment(generate_synthetic(spec, i), cfg, rng);
    EXPECT_EQ(out.image.shape(), (Shape{3, 64, 64}));
    for (std::size_t e : {cfg.eye_left, cfg.eye_right}) {
      EXPECT_GE(out.landmarks[e].x, 0.0);
      EXPECT_LE(out.landmarks[e].x, 63.0);
      EXPECT_GE(out.landmarks[e].y, 0.0);
      EXPECT_LE(out.landmarks[e].y, 63.0);
    }
  }
}

TEST(Augment, GrayAndOcclusion) {
  Rng rng(7);
  Tensor img = dyadic_image(4, 4, rng);
  Tensor g = to_gray(img);
  EXPECT_EQ(g[3], g[16 + 3]);
  EXPECT_NEAR(g[3], 0.299 * img[3] + 0.587 * img[16 + 3] + 0.114 * img[32 + 3], 1e-15);
  Tensor o = occlude(img, 1, 1, 3, 2);
  EXPECT_EQ(o[(0 * 4 + 1) * 4 + 1], 0.0);
  EXPECT_EQ(o[(2 * 4 + 1) * 4 + 2], 0.0);
  EXPECT_EQ(o[(0 * 4 + 2) * 4 + 1], img[(0 * 4 + 2) * 4 + 1]);
}

TEST(Augment, RejectsNonInvolutionFlipMap) {
  AugmentConfig cfg;
  cfg.flip_map = {1, 2, 0};
  EXPECT_THROW(cfg.validate(), InputError);
  cfg.flip_prob = 1.5;
  EXPECT_THROW(cfg.validate(), InputError);
}

TEST(MeanFace, Examples) {
  Sample a, b;
  a.landmarks = LandmarkSet({{0, 0}, {2, 2}});
  b.landmarks = LandmarkSet({{2, 4}, {4, 6}});
  EXPECT_EQ(mean_face({a, b}), LandmarkSet({{1, 2}, {3, 4}}));
  EXPECT_EQ(mean_face({a}), a.landmarks);
  EXPECT_THROW(mean_face({}), InputError);
  Sample c;
  c.landmarks = LandmarkSet({{1, 1}});
  EXPECT_THROW(mean_face({a, c}), InputError);
}
