#include <array>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "hpgn/data.hpp"
#include "tiny_run.hpp"

using namespace hpgn;
namespace fs = std::filesystem;

namespace {

using tiny::TempDir;

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::size_t parse_error_line(const std::string& text) {
  std::istringstream is(text);
  try {
    read_manifest(is);
  } catch (const ParseError& e) {
    return e.line;
  }
  return 0;
}

}  // namespace

TEST(Manifest, ParsesRowsAndOptionalSplit) {
  std::istringstream is("path,identity,camera,split\r\na.ppm,3,1,train\n\nb.ppm,4,0,\nc.ppm,4,2,probe\n");
  const auto m = read_manifest(is);
  ASSERT_EQ(m.rows.size(), 3u);
  EXPECT_EQ(m.rows[0].path, "a.ppm");
  EXPECT_EQ(m.rows[0].identity, 3);
  EXPECT_EQ(m.rows[1].split, "");
  EXPECT_EQ(m.rows[2].split, "probe");
  std::istringstream three("path,identity,camera\nx.pgm,0,0\n");
  EXPECT_EQ(read_manifest(three).rows.size(), 1u);
}

TEST(Manifest, ErrorsCarryLineNumbers) {
  EXPECT_EQ(parse_error_line(""), 1u);
  EXPECT_EQ(parse_error_line("file,id,cam\n"), 1u);
  EXPECT_EQ(parse_error_line("path,identity,camera\na.ppm,1,0\nb.ppm,x,0\n"), 3u);
  EXPECT_EQ(parse_error_line("path,identity,camera\na.ppm,1\n"), 2u);
  EXPECT_EQ(parse_error_line("path,identity,camera\na.ppm,1,-2\n"), 2u);
  EXPECT_EQ(parse_error_line("path,identity,camera,split\n\na.ppm,1,0,test\n"), 3u);
  EXPECT_EQ(parse_error_line("path,identity,camera\n,1,0\n"), 2u);
}

TEST(Manifest, WriteReadRoundTrip) {
  Manifest m;
  m.rows = {{"images/a.ppm", 1, 2, "train"}, {"images/b.ppm", 7, 0, "gallery"}, {"c.ppm", 0, 0, ""}};
  std::stringstream ss;
  write_manifest(ss, m);
  EXPECT_EQ(ss.str().substr(0, 27), "path,identity,camera,split\n");
  EXPECT_EQ(read_manifest(ss).rows, m.rows);
}

TEST(Pnm, GrayscaleExpandsToThreeChannels) {
  std::string pgm = "P5\n# comment\n3 2\n255\n";
  for (unsigned char v : {0, 51, 102, 153, 204, 255}) pgm.push_back(static_cast<char>(v));
  std::istringstream is(pgm);
  const Image img = read_pnm(is);
  ASSERT_EQ(img.shape(), (Shape{3, 2, 3}));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_FLOAT_EQ(img[c * 6 + 1], 0.2f);
    EXPECT_FLOAT_EQ(img[c * 6 + 5], 1.0f);
  }
  std::istringstream bad("P3\n1 1\n255\n0 0 0\n");
  EXPECT_THROW(read_pnm(bad), FormatError);
  std::istringstream truncated("P6\n2 2\n255\nabc");
  EXPECT_THROW(read_pnm(truncated), FormatError);
}

TEST(Pnm, PpmRoundTripAndResize) {
  Image img(Shape{3, 4, 4});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i % 17) / 16.0f;
  std::stringstream ss;
  write_ppm(ss, img);
  const Image back = read_pnm(ss);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 255.0 + 1e-7);
  const Image same = resize_bilinear(img, 4, 4);
  EXPECT_EQ(same, img);
  const Image c = resize_bilinear(Image(Shape{3, 5, 7}, 0.4f), 9, 3);
  EXPECT_EQ(c.shape(), (Shape{3, 9, 3}));
  for (float v : c.data()) EXPECT_NEAR(v, 0.4f, 1e-6);
}

TEST(Synthetic, DefaultSizesAndSplits) {
  const auto sd = render_synthetic(SynthSpec{});
  const auto& ds = sd.dataset;
  ASSERT_EQ(ds.size(), 1000u);
  EXPECT_EQ(ds.images[0].shape(), (Shape{3, 32, 32}));
  std::map<std::int64_t, std::set<std::int64_t>> cams;
  std::map<std::string, std::size_t> splits;
  for (const auto& s : ds.samples) {
    cams[s.identity].insert(s.camera);
    ++splits[s.split];
  }
  EXPECT_EQ(cams.size(), 50u);
  for (const auto& [id, c] : cams) EXPECT_GE(c.size(), 2u) << id;
  EXPECT_EQ(splits["train"], 500u);
  EXPECT_EQ(splits["probe"], 25u * 4);  // first image per camera for each test identity
  EXPECT_EQ(splits["gallery"], 500u - 100);
  for (const auto& img : ds.images)
    for (float v : img.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Synthetic, IdentitiesWithinAGroupHaveDistinctGlyphs) {
  const auto sd = render_synthetic(SynthSpec{});
  std::set<std::array<std::size_t, 4>> seen;
  for (const auto& id : sd.identities) EXPECT_TRUE(seen.insert({id.group, id.pattern, id.bin_row, id.bin_col}).second);
  // Both glyph patterns cover the same number of pixels at every marker size.
  for (std::size_t m = 3; m <= 8; ++m) {
    std::size_t a = 0, b = 0;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < m; ++c) {
        a += detail::glyph_mask(0, r * 3 / m, c * 3 / m);
        b += detail::glyph_mask(1, r * 3 / m, c * 3 / m);
      }
    EXPECT_EQ(a, b) << m;
  }
}

TEST(Synthetic, MeanColourDoesNotSeparateIdentitiesButGlyphLocationDoes) {
  SynthSpec spec;
  const auto sd = render_synthetic(spec);
  const auto& ds = sd.dataset;
  const std::size_t s = 32, plane = s * s, cell = 8;
  std::vector<std::array<double, 3>> rgb(ds.size());
  std::vector<std::array<double, 3>> centroid(spec.identities);
  std::size_t bins_found = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& img = ds.images[i];
    for (std::size_t c = 0; c < 3; ++c) {
      double acc = 0;
      for (std::size_t k = 0; k < plane; ++k) acc += img[c * plane + k];
      rgb[i][c] = acc / plane;
      centroid[ds.samples[i].identity][c] += rgb[i][c] / spec.images_per_identity;
    }
    // The brightest cell relative to the image's own colour is the glyph bin.
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t br = 0; br < 4; ++br)
      for (std::size_t bc = 0; bc < 4; ++bc) {
        double acc = 0;
        for (std::size_t y = br * cell; y < (br + 1) * cell; ++y)
          for (std::size_t x = bc * cell; x < (bc + 1) * cell; ++x)
            for (std::size_t c = 0; c < 3; ++c) acc += img[c * plane + y * s + x] / rgb[i][c];
        if (acc > best) best = acc, arg = br * 4 + bc;
      }
    const auto& id = sd.identities[ds.samples[i].identity];
    bins_found += arg == id.bin_row * 4 + id.bin_col;
  }
  std::size_t colour_hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto group = sd.identities[ds.samples[i].identity].group;
    double best = 1e300;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < spec.identities; ++j) {
      if (sd.identities[j].group != group) continue;
      double d = 0;
      for (std::size_t c = 0; c < 3; ++c) d += (rgb[i][c] - centroid[j][c]) * (rgb[i][c] - centroid[j][c]);
      if (d < best) best = d, arg = j;
    }
    colour_hits += static_cast<std::int64_t>(arg) == ds.samples[i].identity;
  }
  // Ten identities per group: chance is 0.1. The glyph bin has 16 options.
  EXPECT_LT(static_cast<double>(colour_hits) / ds.size(), 0.2);
  EXPECT_GT(static_cast<double>(bins_found) / ds.size(), 0.6);
}

TEST(Synthetic, ValidatesSpec) {
  SynthSpec s;
  s.image_size = 8;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.identities = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.marker_min = 7;
  s.marker_max = 6;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.identities = 200;
  s.color_groups = 2;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Synthetic, FilesAreByteDeterministicPerSeed) {
  SynthSpec spec;
  spec.identities = 6;
  spec.images_per_identity = 3;
  spec.color_groups = 2;
  TempDir a("synth_a"), b("synth_b"), c("synth_c");
  generate_synthetic(spec, a.path);
  generate_synthetic(spec, b.path);
  spec.seed = 2;
  generate_synthetic(spec, c.path);
  EXPECT_EQ(slurp(a.path / "manifest.csv"), slurp(b.path / "manifest.csv"));
  bool differs = false;
  for (const auto& e : fs::directory_iterator(a.path / "images")) {
    const auto name = e.path().filename();
    EXPECT_EQ(slurp(e.path()), slurp(b.path / "images" / name)) << name;
    differs = differs || slurp(e.path()) != slurp(c.path / "images" / name);
  }
  EXPECT_TRUE(differs);
}

TEST(LoadManifest, RoundTripsGeneratedDataAndReportsMissingFiles) {
  SynthSpec spec;
  spec.identities = 4;
  spec.images_per_identity = 2;
  spec.color_groups = 2;
  TempDir d("load_manifest");
  const auto m = generate_synthetic(spec, d.path);
  const auto ds = load_manifest(d.path, 32);
  ASSERT_EQ(ds.size(), 8u);
  EXPECT_EQ(ds.samples, m.rows);
  const auto ref = render_synthetic(spec).dataset;
  for (std::size_t i = 0; i < ref.images[3].size(); ++i)  // pixels are already 8-bit quantised
    ASSERT_NEAR(ds.images[3][i], ref.images[3][i], 1e-6);
  EXPECT_EQ(load_manifest(d.path, 16).images[0].shape(), (Shape{3, 16, 16}));
  EXPECT_TRUE(ds.has_split("train"));
  EXPECT_EQ(ds.select("train").size(), 4u);

  fs::remove(d.path / m.rows[5].path);
  try {
    load_manifest(d.path, 32);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(m.rows[5].path), std::string::npos);
  }
  EXPECT_THROW(load_manifest(d.path / "nowhere", 32), IoError);
}

TEST(StackImages, BatchesInIndexOrder) {
  std::vector<Image> imgs{Image(Shape{3, 2, 2}, 1.0f), Image(Shape{3, 2, 2}, 2.0f)};
  const std::vector<std::size_t> idx{1, 0, 1};
  const auto t = stack_images(imgs, idx);
  EXPECT_EQ(t.shape(), (Shape{3, 3, 2, 2}));
  EXPECT_EQ(t[0], 2.0f);
  EXPECT_EQ(t[12], 1.0f);
  imgs.push_back(Image(Shape{3, 4, 4}));
  const std::vector<std::size_t> mixed{0, 2};
  EXPECT_THROW(stack_images(imgs, mixed), ShapeError);
}
