#include "abm/episodes.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "abm/error.hpp"
#include "abm/num/random.hpp"
#include "json_util.hpp"

namespace fs = std::filesystem;

namespace abm {

std::size_t Dataset::image_count() const {
  std::size_t n = 0;
  for (const auto& c : classes) n += c.images.size();
  return n;
}

void Dataset::validate() const {
  if (height == 0 || width == 0 || channels == 0) fail(ErrorCode::format, "dataset has empty image dims");
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const ClassRecord& c = classes[i];
    if (c.id != i) fail(ErrorCode::state, "dataset class ids are not dense from 0");
    if (c.images.empty()) fail(ErrorCode::format, "class '" + c.name + "' has no images");
    for (const auto& img : c.images) {
      if (img.size() != image_size()) {
        fail(ErrorCode::format, "class '" + c.name + "' holds an image of " +
                                    std::to_string(img.size()) + " values, expected " +
                                    std::to_string(image_size()));
      }
    }
  }
}

void Dataset::renumber() {
  for (std::size_t i = 0; i < classes.size(); ++i) classes[i].id = i;
}

std::string to_string(DatasetFormat f) {
  switch (f) {
    case DatasetFormat::idx: return "idx";
    case DatasetFormat::image_dirs: return "image-dirs";
    case DatasetFormat::synthetic: return "synthetic";
  }
  return "?";
}

DatasetFormat dataset_format_from_string(const std::string& s) {
  if (s == "idx") return DatasetFormat::idx;
  if (s == "image-dirs") return DatasetFormat::image_dirs;
  if (s == "synthetic") return DatasetFormat::synthetic;
  fail(ErrorCode::config, "unknown dataset format '" + s + "' (expected idx, image-dirs or synthetic)");
}

nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"seed", s.seed},         {"classes", s.classes}, {"images_per_class", s.images_per_class},
          {"size", s.size},         {"strokes", s.strokes}, {"jitter", s.jitter},
          {"thickness", s.thickness}};
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, const std::string& path) {
  detail::reject_unknown_keys(
      j, path, {"seed", "classes", "images_per_class", "size", "strokes", "jitter", "thickness"});
  SyntheticSpec s;
  detail::read_optional(j, "seed", path, s.seed);
  detail::read_optional(j, "classes", path, s.classes);
  detail::read_optional(j, "images_per_class", path, s.images_per_class);
  detail::read_optional(j, "size", path, s.size);
  detail::read_optional(j, "strokes", path, s.strokes);
  detail::read_optional(j, "jitter", path, s.jitter);
  detail::read_optional(j, "thickness", path, s.thickness);
  if (s.classes == 0 || s.images_per_class == 0 || s.size < 8 || s.strokes == 0) {
    fail(ErrorCode::config, "'" + path + "' needs classes, images_per_class, strokes >= 1 and size >= 8");
  }
  return s;
}

// IDX

namespace {

std::vector<unsigned char> read_gz_file(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) fail(ErrorCode::io, "cannot open '" + path.string() + "'");
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) fail(ErrorCode::io, "read error in '" + path.string() + "'");
  return out;
}

std::uint32_t big_endian32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<unsigned char> bytes;
  std::size_t offset = 0;
};

IdxArray parse_idx(const fs::path& path, std::uint32_t expected_magic) {
  IdxArray a;
  a.bytes = read_gz_file(path);
  if (a.bytes.size() < 4) fail(ErrorCode::format, "'" + path.string() + "' is too short for an IDX header");
  const std::uint32_t magic = big_endian32(a.bytes.data());
  if (magic != expected_magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad magic number 0x%08x (expected 0x%08x)", magic, expected_magic);
    fail(ErrorCode::format, "'" + path.string() + "': " + buf);
  }
  const std::size_t rank = expected_magic & 0xff;
  a.offset = 4 + 4 * rank;
  if (a.bytes.size() < a.offset) fail(ErrorCode::format, "'" + path.string() + "' has a truncated IDX header");
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    a.dims.push_back(big_endian32(a.bytes.data() + 4 + 4 * i));
    count *= a.dims.back();
  }
  if (a.bytes.size() - a.offset != count) {
    fail(ErrorCode::format, "inconsistent dims in '" + path.string() + "': header promises " +
                                std::to_string(count) + " bytes, file holds " +
                                std::to_string(a.bytes.size() - a.offset));
  }
  return a;
}

bool contains(const fs::path& p, const char* needle) {
  return p.filename().string().find(needle) != std::string::npos;
}

}  // namespace

Dataset load_idx(const fs::path& images, const fs::path& labels) {
  const IdxArray img = parse_idx(images, 0x00000803);
  const IdxArray lab = parse_idx(labels, 0x00000801);
  if (img.dims[0] != lab.dims[0]) {
    fail(ErrorCode::format, "inconsistent dims: " + std::to_string(img.dims[0]) + " images but " +
                                std::to_string(lab.dims[0]) + " labels");
  }
  if (img.dims[1] == 0 || img.dims[2] == 0) fail(ErrorCode::format, "inconsistent dims: empty images");
  Dataset d;
  d.height = img.dims[1];
  d.width = img.dims[2];
  d.channels = 1;
  const std::size_t per = d.height * d.width;
  std::map<unsigned, std::vector<std::vector<float>>> by_label;
  for (std::size_t i = 0; i < img.dims[0]; ++i) {
    const unsigned char* src = img.bytes.data() + img.offset + i * per;
    std::vector<float> pixels(per);
    for (std::size_t p = 0; p < per; ++p) pixels[p] = static_cast<float>(src[p]) / 255.0f;
    by_label[lab.bytes[lab.offset + i]].push_back(std::move(pixels));
  }
  for (auto& [label, imgs] : by_label) {
    d.classes.push_back({d.classes.size(), std::to_string(label), std::move(imgs)});
  }
  return d;
}

Dataset load_idx(const fs::path& path) {
  if (fs::is_directory(path)) {
    std::vector<fs::path> images, labels;
    for (const auto& e : fs::directory_iterator(path)) {
      if (!e.is_regular_file()) continue;
      if (contains(e.path(), "images-idx3")) images.push_back(e.path());
      if (contains(e.path(), "labels-idx1")) labels.push_back(e.path());
    }
    if (images.size() != 1 || labels.size() != 1) {
      fail(ErrorCode::io, "'" + path.string() +
                              "' must hold exactly one *images-idx3* and one *labels-idx1* file");
    }
    return load_idx(images[0], labels[0]);
  }
  if (!fs::exists(path)) fail(ErrorCode::io, "dataset path '" + path.string() + "' does not exist");
  std::string name = path.filename().string();
  const auto at = name.find("images-idx3");
  if (at == std::string::npos) {
    fail(ErrorCode::io, "cannot locate the labels file for '" + path.string() + "'");
  }
  name.replace(at, 11, "labels-idx1");
  return load_idx(path, path.parent_path() / name);
}

// Image directories

namespace {

struct Raster {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<unsigned char> pixels;  // interleaved
};

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".pgm" || ext == ".ppm";
}

Raster read_png(const fs::path& path, bool want_color) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    fail(ErrorCode::format, "cannot decode '" + path.string() + "': " + image.message);
  }
  image.format = want_color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Raster r{image.height, image.width, want_color ? 3u : 1u, {}};
  r.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, r.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    fail(ErrorCode::format, "cannot decode '" + path.string() + "': " + image.message);
  }
  return r;
}

bool png_is_color(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    fail(ErrorCode::format, "cannot decode '" + path.string() + "': " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png_image_free(&image);
  return color;
}

// Binary P5 / P6 with maxval <= 255.
Raster read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open '" + path.string() + "'");
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
      } else {
        t.push_back(c);
      }
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") fail(ErrorCode::format, "'" + path.string() + "' is not a binary PGM/PPM");
  Raster r;
  try {
    r.width = std::stoul(token());
    r.height = std::stoul(token());
    const unsigned long maxval = std::stoul(token());
    if (maxval == 0 || maxval > 255) throw std::invalid_argument("maxval");
  } catch (const std::exception&) {
    fail(ErrorCode::format, "'" + path.string() + "' has a malformed header");
  }
  r.channels = magic == "P6" ? 3 : 1;
  r.pixels.resize(r.width * r.height * r.channels);
  in.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(r.pixels.size())) {
    fail(ErrorCode::format, "'" + path.string() + "' is truncated");
  }
  return r;
}

bool file_is_color(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return png_is_color(p);
  return read_pnm(p).channels == 3;
}

// Planar [C, H, W] floats in [0, 1], converting to `channels`.
std::vector<float> to_planar(const Raster& r, std::size_t channels) {
  const std::size_t plane = r.height * r.width;
  std::vector<float> out(channels * plane);
  for (std::size_t p = 0; p < plane; ++p) {
    const unsigned char* px = r.pixels.data() + p * r.channels;
    if (channels == r.channels) {
      for (std::size_t c = 0; c < channels; ++c) out[c * plane + p] = px[c] / 255.0f;
    } else if (channels == 1) {
      out[p] = (0.299f * px[0] + 0.587f * px[1] + 0.114f * px[2]) / 255.0f;
    } else {
      for (std::size_t c = 0; c < channels; ++c) out[c * plane + p] = px[0] / 255.0f;
    }
  }
  return out;
}

}  // namespace

Image read_image(const fs::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) fail(ErrorCode::invalid_argument, "images have 1 or 3 channels");
  if (!fs::is_regular_file(path)) fail(ErrorCode::io, "cannot open '" + path.string() + "'");
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (!is_image_file(path)) fail(ErrorCode::format, "'" + path.string() + "' is not a PNG, PGM or PPM file");
  const Raster r = ext == ".png" ? read_png(path, channels == 3) : read_pnm(path);
  return {r.height, r.width, channels, to_planar(r, channels)};
}

Dataset load_image_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) fail(ErrorCode::io, "'" + root.string() + "' is not a directory");
  std::vector<fs::path> leaves;
  std::vector<fs::path> dirs{root};
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  for (const auto& d : dirs) {
    bool has_subdir = false;
    for (const auto& e : fs::directory_iterator(d)) has_subdir = has_subdir || e.is_directory();
    if (!has_subdir && d != root) leaves.push_back(d);
  }
  if (leaves.empty()) fail(ErrorCode::io, "no class directories under '" + root.string() + "'");
  std::sort(leaves.begin(), leaves.end());

  Dataset d;
  bool first = true;
  for (const auto& leaf : leaves) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(leaf)) {
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    }
    if (files.empty()) fail(ErrorCode::format, "empty class directory '" + leaf.string() + "'");
    std::sort(files.begin(), files.end());
    ClassRecord rec;
    rec.id = d.classes.size();
    rec.name = fs::relative(leaf, root).generic_string();
    for (const auto& f : files) {
      if (first) {
        d.channels = file_is_color(f) ? 3 : 1;
      }
      std::string ext = f.extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      const Raster r = ext == ".png" ? read_png(f, d.channels == 3) : read_pnm(f);
      if (first) {
        d.height = r.height;
        d.width = r.width;
        first = false;
      } else if (r.height != d.height || r.width != d.width) {
        fail(ErrorCode::format, "inconsistent dims: '" + f.string() + "' is " +
                                    std::to_string(r.height) + "x" + std::to_string(r.width) +
                                    ", expected " + std::to_string(d.height) + "x" +
                                    std::to_string(d.width));
      }
      rec.images.push_back(to_planar(r, d.channels));
    }
    d.classes.push_back(std::move(rec));
  }
  return d;
}

// Synthetic glyphs

namespace {

struct Point {
  double x, y;
};

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.images_per_class == 0 || spec.size < 8 || spec.strokes == 0) {
    fail(ErrorCode::invalid_argument, "synthetic dataset needs classes, images, strokes >= 1 and size >= 8");
  }
  Dataset d;
  d.height = d.width = spec.size;
  d.channels = 1;
  const double n = static_cast<double>(spec.size);
  const double margin = 0.18 * n;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    Rng rng(derive_seed(spec.seed, 0x91u, c));
    std::uniform_real_distribution<double> coord(margin, n - 1 - margin);
    std::uniform_int_distribution<int> vertices(2, 4);
    std::vector<std::vector<Point>> strokes(spec.strokes);
    for (auto& s : strokes) {
      const int k = vertices(rng);
      for (int v = 0; v < k; ++v) s.push_back({coord(rng), coord(rng)});
    }
    ClassRecord rec{c, "glyph" + std::to_string(c), {}};
    for (std::size_t i = 0; i < spec.images_per_class; ++i) {
      Rng irng(derive_seed(spec.seed, 0x92u, c, i));
      std::normal_distribution<double> noise(0.0, spec.jitter);
      const Point shift{noise(irng), noise(irng)};
      std::vector<std::vector<Point>> drawn = strokes;
      for (auto& s : drawn)
        for (auto& p : s) p = {p.x + shift.x + noise(irng), p.y + shift.y + noise(irng)};
      std::vector<float> img(spec.size * spec.size, 0.0f);
      for (std::size_t y = 0; y < spec.size; ++y)
        for (std::size_t x = 0; x < spec.size; ++x) {
          const Point p{static_cast<double>(x), static_cast<double>(y)};
          double best = INFINITY;
          for (const auto& s : drawn)
            for (std::size_t v = 0; v + 1 < s.size(); ++v) best = std::min(best, segment_distance(p, s[v], s[v + 1]));
          img[y * spec.size + x] = static_cast<float>(std::clamp(1.0 + spec.thickness - best, 0.0, 1.0));
        }
      rec.images.push_back(std::move(img));
    }
    d.classes.push_back(std::move(rec));
  }
  return d;
}

Dataset load_dataset(const fs::path& path, DatasetFormat format, const SyntheticSpec& synthetic) {
  Dataset d;
  switch (format) {
    case DatasetFormat::idx: d = load_idx(path); break;
    case DatasetFormat::image_dirs: d = load_image_dirs(path); break;
    case DatasetFormat::synthetic: d = make_synthetic(synthetic); break;
  }
  d.validate();
  return d;
}

std::vector<float> rotate90(std::span<const float> image, std::size_t channels, std::size_t n) {
  if (image.size() != channels * n * n) fail(ErrorCode::shape, "rotate90 needs a square [C, n, n] image");
  std::vector<float> out(image.size());
  for (std::size_t c = 0; c < channels; ++c) {
    const float* src = image.data() + c * n * n;
    float* dst = out.data() + c * n * n;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) dst[i * n + j] = src[(n - 1 - j) * n + i];
  }
  return out;
}

Dataset augment_rotations(const Dataset& dataset) {
  if (dataset.height != dataset.width) {
    fail(ErrorCode::invalid_argument, "rotation augmentation needs square images, got " +
                                          std::to_string(dataset.height) + "x" +
                                          std::to_string(dataset.width));
  }
  Dataset out;
  out.height = dataset.height;
  out.width = dataset.width;
  out.channels = dataset.channels;
  for (const auto& c : dataset.classes) {
    ClassRecord cur{0, c.name, c.images};
    for (int r = 0; r < 4; ++r) {
      if (r > 0) {
        for (auto& img : cur.images) img = rotate90(img, dataset.channels, dataset.height);
        cur.name = c.name + "@rot" + std::to_string(90 * r);
      }
      out.classes.push_back(cur);
    }
  }
  out.renumber();
  return out;
}

// Splits

nlohmann::json to_json(const SplitSpec& s) {
  nlohmann::json j = nlohmann::json::object();
  if (s.train) j["train"] = *s.train;
  if (s.validation) j["validation"] = *s.validation;
  if (s.test) j["test"] = *s.test;
  if (s.train_count) j["train_count"] = *s.train_count;
  if (s.validation_count) j["validation_count"] = *s.validation_count;
  if (s.test_count) j["test_count"] = *s.test_count;
  if (s.train_fraction) j["train_fraction"] = *s.train_fraction;
  if (s.validation_fraction) j["validation_fraction"] = *s.validation_fraction;
  return j;
}

SplitSpec split_spec_from_json(const nlohmann::json& j, const std::string& path) {
  detail::reject_unknown_keys(j, path,
                              {"train", "validation", "test", "train_count", "validation_count",
                               "test_count", "train_fraction", "validation_fraction"});
  SplitSpec s;
  auto opt = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    typename std::remove_reference_t<decltype(field)>::value_type v{};
    detail::read_optional(j, key, path, v);
    field = v;
  };
  opt("train", s.train);
  opt("validation", s.validation);
  opt("test", s.test);
  opt("train_count", s.train_count);
  opt("validation_count", s.validation_count);
  opt("test_count", s.test_count);
  opt("train_fraction", s.train_fraction);
  opt("validation_fraction", s.validation_fraction);
  return s;
}

namespace {

Dataset subset(const Dataset& d, const std::vector<std::size_t>& ids) {
  Dataset out;
  out.height = d.height;
  out.width = d.width;
  out.channels = d.channels;
  for (std::size_t id : ids) out.classes.push_back(d.classes[id]);
  out.renumber();
  return out;
}

}  // namespace

Splits split_classes(const Dataset& dataset, const SplitSpec& spec, std::uint64_t seed) {
  const std::size_t n = dataset.classes.size();
  std::vector<std::size_t> train, val, test;
  const bool explicit_lists = spec.train || spec.validation || spec.test;
  if (explicit_lists) {
    if (spec.train) train = *spec.train;
    if (spec.validation) val = *spec.validation;
    if (spec.test) test = *spec.test;
  } else {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, 0x5u));
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t nt = 0, nv = 0, ns = 0;
    if (spec.train_count || spec.validation_count || spec.test_count) {
      nt = spec.train_count.value_or(0);
      nv = spec.validation_count.value_or(0);
      if (nt + nv > n) fail(ErrorCode::config, "split counts exceed the " + std::to_string(n) + " classes");
      ns = spec.test_count.value_or(n - nt - nv);
    } else {
      const double ft = spec.train_fraction.value_or(0.6);
      const double fv = spec.validation_fraction.value_or(0.2);
      if (ft < 0 || fv < 0 || ft + fv > 1.0 + 1e-12) fail(ErrorCode::config, "split fractions must be >= 0 and sum to <= 1");
      nt = static_cast<std::size_t>(std::llround(ft * static_cast<double>(n)));
      nv = std::min(n - nt, static_cast<std::size_t>(std::llround(fv * static_cast<double>(n))));
      ns = n - nt - nv;
    }
    if (nt + nv + ns > n) fail(ErrorCode::config, "split counts exceed the " + std::to_string(n) + " classes");
    train.assign(order.begin(), order.begin() + nt);
    val.assign(order.begin() + nt, order.begin() + nt + nv);
    test.assign(order.begin() + nt + nv, order.begin() + nt + nv + ns);
  }

  for (const auto* list : {&train, &val, &test}) {
    std::set<std::size_t> seen;
    for (std::size_t id : *list) {
      if (id >= n) fail(ErrorCode::config, "split class id " + std::to_string(id) + " out of range (dataset has " + std::to_string(n) + " classes)");
      if (!seen.insert(id).second) fail(ErrorCode::config, "split lists class " + std::to_string(id) + " twice");
    }
  }
  const bool shared_pool = !val.empty() && val == test;
  auto overlap = [](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    for (std::size_t x : a)
      if (std::find(b.begin(), b.end(), x) != b.end()) return true;
    return false;
  };
  if (overlap(train, val) || overlap(train, test) || (!shared_pool && overlap(val, test))) {
    fail(ErrorCode::config, "overlapping class lists in the split");
  }

  Splits s{subset(dataset, train), subset(dataset, val), subset(dataset, test)};
  if (shared_pool) {
    // Disjoint halves of each held-out class's images.
    for (std::size_t c = 0; c < s.validation.classes.size(); ++c) {
      auto images = s.validation.classes[c].images;
      if (images.size() < 2) fail(ErrorCode::config, "shared validation/test class needs >= 2 images");
      Rng rng(derive_seed(seed, 0x6u, val[c]));
      std::shuffle(images.begin(), images.end(), rng);
      const std::size_t half = images.size() / 2;
      s.validation.classes[c].images.assign(images.begin(), images.begin() + half);
      s.test.classes[c].images.assign(images.begin() + half, images.end());
    }
  }
  return s;
}

// Episodes

Episode sample_episode(const Dataset& dataset, const EpisodeSpec& spec, std::uint64_t seed) {
  if (spec.way < (spec.open_set ? 2u : 1u)) {
    fail(ErrorCode::invalid_argument, spec.open_set ? "open-set episodes need way >= 2" : "episodes need way >= 1");
  }
  if (spec.shot == 0 || spec.queries == 0) fail(ErrorCode::invalid_argument, "episodes need shot and queries >= 1");
  if (dataset.classes.size() < spec.way) {
    fail(ErrorCode::invalid_argument, "episode needs " + std::to_string(spec.way) + " classes, dataset has " +
                                          std::to_string(dataset.classes.size()));
  }
  Rng rng(seed);
  std::vector<std::size_t> all(dataset.classes.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> chosen;
  std::sample(all.begin(), all.end(), std::back_inserter(chosen), spec.way, rng);
  std::shuffle(chosen.begin(), chosen.end(), rng);

  Episode e;
  e.way = spec.way;
  e.shot = spec.shot;
  e.seed = seed;
  if (spec.open_set) {
    e.open_class = chosen[std::uniform_int_distribution<std::size_t>(0, spec.way - 1)(rng)];
  }
  std::vector<std::size_t> query_classes(spec.queries);
  std::uniform_int_distribution<std::size_t> pick(0, spec.way - 1);
  for (auto& q : query_classes) q = chosen[pick(rng)];

  std::size_t label = 0;
  for (std::size_t cls : chosen) {
    const bool open = e.open_class && *e.open_class == cls;
    const std::size_t nq = static_cast<std::size_t>(std::count(query_classes.begin(), query_classes.end(), cls));
    const std::size_t need = (open ? 0 : spec.shot) + nq;
    const ClassRecord& rec = dataset.classes[cls];
    if (rec.images.size() < need) {
      fail(ErrorCode::invalid_argument, "class '" + rec.name + "' has " + std::to_string(rec.images.size()) +
                                            " images, the episode needs " + std::to_string(need));
    }
    std::vector<std::size_t> idx(rec.images.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<std::size_t> picked;
    std::sample(idx.begin(), idx.end(), std::back_inserter(picked), need, rng);
    std::shuffle(picked.begin(), picked.end(), rng);
    const std::size_t support_label = open ? 0 : ++label;
    std::size_t next = 0;
    if (!open) {
      for (; next < spec.shot; ++next) {
        e.support.push_back({rec.images[picked[next]], support_label, cls, picked[next]});
      }
    }
    for (std::size_t q = 0; q < nq; ++q, ++next) {
      e.queries.push_back({rec.images[picked[next]], support_label, cls, picked[next]});
    }
  }
  // Restore draw order of the queries.
  std::vector<EpisodeImage> ordered;
  std::vector<bool> used(e.queries.size(), false);
  for (std::size_t cls : query_classes) {
    for (std::size_t i = 0; i < e.queries.size(); ++i) {
      if (!used[i] && e.queries[i].class_id == cls) {
        used[i] = true;
        ordered.push_back(e.queries[i]);
        break;
      }
    }
  }
  e.queries = std::move(ordered);
  return e;
}

void validate_episode(const Episode& e) {
  const std::size_t n = e.support_labels();
  if (e.support.size() != n * e.shot) fail(ErrorCode::state, "episode support size does not match way and shot");
  std::map<std::size_t, std::size_t> label_of;
  std::vector<std::size_t> per_label(n + 1, 0);
  std::set<std::pair<std::size_t, std::size_t>> support_images;
  for (const auto& s : e.support) {
    if (s.label < 1 || s.label > n) fail(ErrorCode::state, "support label out of range");
    if (e.open_class && s.class_id == *e.open_class) fail(ErrorCode::state, "open-set class leaked into the support set");
    auto [it, inserted] = label_of.emplace(s.class_id, s.label);
    if (!inserted && it->second != s.label) fail(ErrorCode::state, "support class carries two labels");
    ++per_label[s.label];
    support_images.insert({s.class_id, s.image_index});
  }
  if (label_of.size() != n) fail(ErrorCode::state, "support classes are not distinct");
  for (std::size_t l = 1; l <= n; ++l) {
    if (per_label[l] != e.shot) fail(ErrorCode::state, "support label " + std::to_string(l) + " lacks " + std::to_string(e.shot) + " shots");
  }
  std::set<std::pair<std::size_t, std::size_t>> query_images;
  for (const auto& q : e.queries) {
    if (support_images.count({q.class_id, q.image_index})) fail(ErrorCode::state, "query image appears in the support set");
    if (!query_images.insert({q.class_id, q.image_index}).second) fail(ErrorCode::state, "query image repeated");
    if (e.open_class && q.class_id == *e.open_class) {
      if (q.label != 0) fail(ErrorCode::state, "open-set query must carry label 0");
    } else {
      auto it = label_of.find(q.class_id);
      if (it == label_of.end() || it->second != q.label) fail(ErrorCode::state, "query label does not match its support class");
    }
  }
}

}  // namespace abm
