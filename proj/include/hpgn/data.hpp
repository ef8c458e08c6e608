#pragma once

// Image codecs (binary PGM/PPM), the CSV manifest, dataset loading and the
// synthetic identity generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hpgn/errors.hpp"
#include "hpgn/sample.hpp"
#include "hpgn/tensor.hpp"

namespace hpgn {

using Image = Tensor<float>;  // [3, h, w], values in [0, 1]

namespace detail {

inline std::string pnm_token(std::istream& is) {
  std::string tok;
  char ch;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace detail

// Decodes binary P5 (grey, replicated to 3 channels) or P6 with maxval <= 255.
inline Image read_pnm(std::istream& is, const std::string& label = "image") {
  const std::string magic = detail::pnm_token(is);
  if (magic != "P5" && magic != "P6") throw FormatError(label + ": not a binary PGM/PPM file");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(detail::pnm_token(is));
    h = std::stoul(detail::pnm_token(is));
    maxval = std::stoul(detail::pnm_token(is));
  } catch (const std::exception&) {
    throw FormatError(label + ": malformed header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw FormatError(label + ": unsupported header");
  const std::size_t channels = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> raw(w * h * channels);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw FormatError(label + ": truncated pixel data");
  Image img(Shape{3, h, w});
  const float inv = 1.0f / static_cast<float>(maxval);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      img[c * h * w + i] = static_cast<float>(raw[i * channels + (channels == 3 ? c : 0)]) * inv;
  return img;
}

inline Image read_pnm_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image " + path.string());
  return read_pnm(is, path.string());
}

inline unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void write_ppm(std::ostream& os, const Image& img) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  os << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) os.put(static_cast<char>(to_byte(img[c * h * w + i])));
}

// Bilinear resampling with half-pixel centres.
inline Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  if (h == out_h && w == out_w) return img;
  Image out(Shape{3, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const float* p = img.raw() + c * h * w;
        const double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
        const double bot = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
        out[(c * out_h + y) * out_w + x] = static_cast<float>(top * (1 - ty) + bot * ty);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- manifest

struct Manifest {
  std::vector<Sample> rows;
};

inline Manifest read_manifest(std::istream& is) {
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (!line.empty() && line.back() == ',') cols.emplace_back();
    if (!header) {
      if (cols.size() < 3 || cols[0] != "path" || cols[1] != "identity" || cols[2] != "camera" ||
          (cols.size() == 4 && cols[3] != "split") || cols.size() > 4)
        throw ParseError("manifest header must be 'path,identity,camera[,split]'", lineno);
      header = true;
      continue;
    }
    if (cols.size() < 3 || cols.size() > 4)
      throw ParseError("manifest row needs 3 or 4 comma-separated fields", lineno);
    Sample s;
    s.path = cols[0];
    if (s.path.empty()) throw ParseError("manifest row has an empty path", lineno);
    auto parse_id = [&](const std::string& text, const char* what) {
      std::size_t used = 0;
      long long v = -1;
      try {
        v = std::stoll(text, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != text.size() || text.empty() || v < 0)
        throw ParseError(std::string("manifest ") + what + " '" + text +
                             "' is not a nonnegative integer",
                         lineno);
      return static_cast<std::int64_t>(v);
    };
    s.identity = parse_id(cols[1], "identity");
    s.camera = parse_id(cols[2], "camera");
    if (cols.size() == 4) {
      s.split = cols[3];
      if (!s.split.empty() && s.split != "train" && s.split != "probe" && s.split != "gallery")
        throw ParseError("manifest split '" + s.split + "' is not train/probe/gallery", lineno);
    }
    m.rows.push_back(std::move(s));
  }
  if (!header) throw ParseError("manifest is empty", lineno == 0 ? 1 : lineno);
  return m;
}

inline void write_manifest(std::ostream& os, const Manifest& m) {
  os << "path,identity,camera,split\n";
  for (const auto& s : m.rows) os << s.path << ',' << s.identity << ',' << s.camera << ',' << s.split << '\n';
}

struct Dataset {
  std::vector<Image> images;  // each [3, s, s]
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }

  // Subset whose split tag equals `split` ("" selects untagged rows).
  Dataset select(const std::string& split) const {
    Dataset out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == split) {
        out.images.push_back(images[i]);
        out.samples.push_back(samples[i]);
      }
    return out;
  }

  bool has_split(const std::string& split) const {
    return std::any_of(samples.begin(), samples.end(), [&](const Sample& s) { return s.split == split; });
  }
};

// Reads dir/manifest.csv and decodes every referenced image, resized to
// input_size x input_size.
inline Dataset load_manifest(const std::filesystem::path& dir, std::size_t input_size) {
  const auto manifest_path = dir / "manifest.csv";
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open manifest " + manifest_path.string());
  Manifest m = read_manifest(is);
  Dataset ds;
  ds.images.reserve(m.rows.size());
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    const auto path = dir / m.rows[r].path;
    if (!std::filesystem::exists(path))
      throw IoError("manifest row " + std::to_string(r + 1) + ": missing image " + path.string());
    ds.images.push_back(resize_bilinear(read_pnm_file(path), input_size, input_size));
  }
  ds.samples = std::move(m.rows);
  return ds;
}

// Stacks images [3,s,s] into a batch [n,3,s,s].
inline Tensor<float> stack_images(const std::vector<Image>& images, std::span<const std::size_t> index) {
  if (index.empty()) throw InvalidArgument("stack_images: empty selection");
  const Shape& s = images.at(index[0]).shape();
  Tensor<float> out(Shape{index.size(), s[0], s[1], s[2]});
  const std::size_t per = shape_size(s);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& img = images.at(index[i]);
    require_shape(img.shape(), s, "stack_images");
    std::copy_n(img.raw(), per, out.raw() + i * per);
  }
  return out;
}

inline Tensor<float> stack_images(const std::vector<Image>& images) {
  std::vector<std::size_t> all(images.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return stack_images(images, all);
}

// ---------------------------------------------------------------- synthetic

// Identities share a base colour within a colour group; within a group the
// only stable difference is a small glyph (pattern + location on a 4x4 bin
// grid), so the identity signal is local.
struct SynthSpec {
  std::size_t identities = 50;
  std::size_t images_per_identity = 20;
  std::size_t image_size = 32;
  std::size_t cameras = 4;
  std::size_t marker_min = 4;
  std::size_t marker_max = 6;
  std::size_t color_groups = 5;
  double train_fraction = 0.5;  // leading identities tagged "train"
  std::uint64_t seed = 1;

  void validate() const {
    if (image_size < 16) throw ConfigError("synthetic image size must be >= 16");
    if (identities < 2) throw ConfigError("synthetic set needs at least 2 identities");
    if (images_per_identity < 1) throw ConfigError("need at least one image per identity");
    if (cameras < 1) throw ConfigError("need at least one camera");
    if (color_groups < 1 || color_groups > identities) throw ConfigError("color groups must lie in [1, identities]");
    if (marker_min < 3 || marker_min > marker_max || marker_max > image_size / 4)
      throw ConfigError("marker size range must satisfy 3 <= min <= max <= image_size/4");
    if (!(train_fraction >= 0 && train_fraction <= 1)) throw ConfigError("train fraction must lie in [0,1]");
    const std::size_t per_group = (identities + color_groups - 1) / color_groups;
    if (per_group > 2 * 16) throw ConfigError("too many identities per colour group (max 32)");
  }
};

struct SynthIdentity {
  std::size_t group;
  std::size_t pattern;  // 0: horizontal bars, 1: vertical bars
  std::size_t bin_row;
  std::size_t bin_col;
};

struct SynthData {
  Dataset dataset;
  std::vector<SynthIdentity> identities;
};

namespace detail {

// 3x3 masks with equal area so a glyph's pixel mass does not depend on its pattern.
inline bool glyph_mask(std::size_t pattern, std::size_t r, std::size_t c) {
  return pattern == 0 ? (r != 1) : (c != 1);
}

inline std::array<float, 3> group_color(std::size_t g, std::size_t groups) {
  // Evenly spaced hues at moderate saturation.
  const double h = 6.0 * static_cast<double>(g) / static_cast<double>(groups);
  const double x = 1 - std::abs(std::fmod(h, 2.0) - 1);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h) % 6) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x}; break;
  }
  std::array<float, 3> out{};
  for (int c = 0; c < 3; ++c) out[c] = static_cast<float>(0.25 + 0.4 * rgb[c]);
  return out;
}

inline float quantize(float v) { return static_cast<float>(to_byte(v)) / 255.0f; }

}  // namespace detail

inline SynthData render_synthetic(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t s = spec.image_size, cell = s / 4;

  // Distinct (pattern, bin) combination per identity inside its group.
  std::vector<std::vector<std::size_t>> combos(spec.color_groups);
  for (auto& c : combos) {
    c.resize(32);
    std::iota(c.begin(), c.end(), std::size_t{0});
    std::shuffle(c.begin(), c.end(), rng);
  }
  std::vector<std::size_t> used(spec.color_groups, 0);
  SynthData out;
  for (std::size_t id = 0; id < spec.identities; ++id) {
    const std::size_t g = id % spec.color_groups;
    const std::size_t combo = combos[g][used[g]++];
    out.identities.push_back({g, combo / 16, (combo % 16) / 4, combo % 4});
  }

  std::uniform_real_distribution<double> cam_gain(0.8, 1.2);
  std::vector<double> gains(spec.cameras);
  for (auto& gval : gains) gval = cam_gain(rng);
  std::vector<std::array<float, 3>> tints(spec.cameras);
  std::uniform_real_distribution<double> tint(-0.04, 0.04);
  for (auto& t : tints)
    for (auto& v : t) v = static_cast<float>(tint(rng));

  std::uniform_int_distribution<int> shift(-2, 2);
  std::uniform_int_distribution<int> jitter(-1, 1);
  std::uniform_int_distribution<std::size_t> marker(spec.marker_min, spec.marker_max);
  std::normal_distribution<double> noise(0.0, 0.03);
  const std::size_t n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * spec.identities));

  for (std::size_t id = 0; id < spec.identities; ++id) {
    const auto& ident = out.identities[id];
    const auto base = detail::group_color(ident.group, spec.color_groups);
    std::vector<bool> seen_cam(spec.cameras, false);
    for (std::size_t j = 0; j < spec.images_per_identity; ++j) {
      const std::size_t cam = (j + id) % spec.cameras;
      const int dx = shift(rng), dy = shift(rng);
      const std::size_t msize = marker(rng);
      const float gain = static_cast<float>(gains[cam]);
      Image img(Shape{3, s, s});
      // Body: vertical shading inside a margin, darker road around it.
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          const int yy = static_cast<int>(y) - dy, xx = static_cast<int>(x) - dx;
          const bool body = yy >= 1 && yy < static_cast<int>(s) - 1 && xx >= 1 && xx < static_cast<int>(s) - 1;
          const float shade = 0.85f + 0.3f * static_cast<float>(y) / static_cast<float>(s);
          for (std::size_t c = 0; c < 3; ++c)
            img[(c * s + y) * s + x] = body ? base[c] * shade : 0.12f;
        }
      const int top = static_cast<int>(ident.bin_row * cell + (cell - msize) / 2) + dy + jitter(rng);
      const int left = static_cast<int>(ident.bin_col * cell + (cell - msize) / 2) + dx + jitter(rng);
      for (std::size_t r = 0; r < msize; ++r)
        for (std::size_t c = 0; c < msize; ++c) {
          if (!detail::glyph_mask(ident.pattern, r * 3 / msize, c * 3 / msize)) continue;
          const int y = top + static_cast<int>(r), x = left + static_cast<int>(c);
          if (y < 0 || x < 0 || y >= static_cast<int>(s) || x >= static_cast<int>(s)) continue;
          for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * s + y) * s + x] = 0.95f;
        }
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < s * s; ++i) {
          float& v = img[c * s * s + i];
          v = detail::quantize(v * gain + tints[cam][c] + static_cast<float>(noise(rng)));
        }

      Sample smp;
      char name[64];
      std::snprintf(name, sizeof name, "images/id%04zu_%03zu.ppm", id, j);
      smp.path = name;
      smp.identity = static_cast<std::int64_t>(id);
      smp.camera = static_cast<std::int64_t>(cam);
      if (id < n_train) {
        smp.split = "train";
      } else {
        smp.split = seen_cam[cam] ? "gallery" : "probe";
        seen_cam[cam] = true;
      }
      out.dataset.images.push_back(std::move(img));
      out.dataset.samples.push_back(std::move(smp));
    }
  }
  return out;
}

// Renders the synthetic set and writes images/ + manifest.csv under out_dir.
inline Manifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  SynthData data = render_synthetic(spec);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());
  for (std::size_t i = 0; i < data.dataset.size(); ++i) {
    const auto path = out_dir / data.dataset.samples[i].path;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    write_ppm(os, data.dataset.images[i]);
    if (!os) throw IoError("write failed for " + path.string());
  }
  Manifest m{data.dataset.samples};
  std::ofstream os(out_dir / "manifest.csv");
  if (!os) throw IoError("cannot write " + (out_dir / "manifest.csv").string());
  write_manifest(os, m);
  return m;
}

}  // namespace hpgn
