#include "vitbd/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "vitbd/bytes.hpp"
#include "vitbd/errors.hpp"
#include "vitbd/fsio.hpp"
#include "vitbd/rng.hpp"

namespace vitbd {

namespace {

const std::vector<std::string> kGeometric{"geo/disc", "geo/cross", "geo/bars",
                                          "geo/ring"};
const std::vector<std::string> kTexture{"tex/checker", "tex/stripes",
                                        "tex/triangle", "tex/dots"};

double frac(double v) { return v - std::floor(v); }

// One shape instance. Coordinates are normalized to [0,1).
struct ShapeParams {
  int kind = 0;
  bool texture = false;
  double cx, cy, r, w, l, phase, period, px, py;
};

bool inside(const ShapeParams& sp, double x, double y) {
  const double dx = x - sp.cx;
  const double dy = y - sp.cy;
  if (!sp.texture) {
    switch (sp.kind) {
      case 0:  // disc
        return dx * dx + dy * dy <= sp.r * sp.r;
      case 1:  // cross
        return (std::fabs(dx) <= sp.w && std::fabs(dy) <= sp.l) ||
               (std::fabs(dy) <= sp.w && std::fabs(dx) <= sp.l);
      case 2:  // bars
        return frac((y + sp.phase) / sp.period) < 0.45;
      default: {  // ring
        const double d2 = dx * dx + dy * dy;
        const double inner = 0.6 * sp.r;
        return d2 >= inner * inner && d2 <= sp.r * sp.r;
      }
    }
  }
  switch (sp.kind) {
    case 0: {  // checker
      const double cell = 0.7 * sp.period;
      const auto ix = static_cast<long>(std::floor((x + sp.px) / cell));
      const auto iy = static_cast<long>(std::floor((y + sp.py) / cell));
      return ((ix + iy) & 1) == 0;
    }
    case 1:  // diagonal stripes
      return frac(((x + y) * 0.7071067811865476 + sp.phase) / sp.period) < 0.5;
    case 2: {  // upward triangle
      const double yy = y - (sp.cy - sp.l);
      if (yy < 0.0 || yy > 2.0 * sp.l) return false;
      return std::fabs(dx) <= sp.r * yy / (2.0 * sp.l);
    }
    default: {  // dot grid
      const double ux = (frac((x + sp.px) / sp.period) - 0.5) * sp.period;
      const double uy = (frac((y + sp.py) / sp.period) - 0.5) * sp.period;
      const double dr = 0.3 * sp.period;
      return ux * ux + uy * uy <= dr * dr;
    }
  }
}

void render_sample(double* img, int channels, int size, int kind, bool texture,
                   double noise, Rng& rng) {
  ShapeParams sp;
  sp.kind = kind;
  sp.texture = texture;
  sp.cx = rng.uniform(0.38, 0.62);
  sp.cy = rng.uniform(0.38, 0.62);
  sp.r = rng.uniform(0.18, 0.30);
  sp.w = rng.uniform(0.06, 0.10);
  sp.l = rng.uniform(0.25, 0.38);
  sp.phase = rng.uniform(0.0, 1.0);
  sp.period = rng.uniform(0.18, 0.28);
  sp.px = rng.uniform(0.0, 1.0);
  sp.py = rng.uniform(0.0, 1.0);

  double fg[8];
  double bg[8];
  for (int c = 0; c < channels; ++c) {
    fg[c] = rng.uniform(0.70, 1.00);
    bg[c] = rng.uniform(0.00, 0.25);
  }
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int c = 0; c < channels; ++c) {
    for (int r = 0; r < size; ++r) {
      for (int q = 0; q < size; ++q) {
        const double x = (q + 0.5) / size;
        const double y = (r + 0.5) / size;
        double v = inside(sp, x, y) ? fg[c] : bg[c];
        v += rng.uniform(-noise, noise);
        img[c * plane + static_cast<std::size_t>(r) * size + q] =
            std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

nlohmann::json parse_sidecar(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_binary_file(path));
  } catch (const IoError&) {
    throw FormatError(FormatError::Kind::sidecar_missing,
                      "dataset sidecar missing: " + path);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::bad_content,
                      "dataset sidecar is not valid JSON: " + path + ": " +
                          e.what());
  }
  return j;
}

}  // namespace

std::vector<std::string> family_class_names(const std::string& family) {
  if (family == "geometric") return kGeometric;
  if (family == "texture") return kTexture;
  throw ValueError("unknown class family: " + family);
}

LabeledDataset gen_synthetic(const SyntheticConfig& cfg, std::size_t n,
                             std::uint64_t seed) {
  const auto names = family_class_names(cfg.family);
  if (n == 0) throw ValueError("gen_synthetic: sample count must be positive");
  if (cfg.num_classes <= 0 ||
      static_cast<std::size_t>(cfg.num_classes) > names.size())
    throw ValueError("gen_synthetic: family has no such class count");
  if (cfg.image_size <= 0 || cfg.channels <= 0 || cfg.channels > 8)
    throw ValueError("gen_synthetic: bad image geometry");
  if (!(cfg.noise >= 0.0 && cfg.noise <= 0.5))
    throw ValueError("gen_synthetic: noise amplitude outside [0, 0.5]");

  const std::size_t stride = static_cast<std::size_t>(cfg.channels) *
                             cfg.image_size * cfg.image_size;
  std::vector<double> pix(n * stride);
  std::vector<int> labels(n);
  const bool texture = cfg.family == "texture";
  const std::int64_t count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < count; ++i) {
    const std::size_t s = static_cast<std::size_t>(i);
    Rng rng(derive_seed(seed, "sample", s));
    labels[s] = static_cast<int>(s % cfg.num_classes);
    render_sample(pix.data() + s * stride, cfg.channels, cfg.image_size,
                  labels[s], texture, cfg.noise, rng);
  }

  LabeledDataset ds;
  ds.images = Tensor::from_data({n, static_cast<std::size_t>(cfg.channels),
                                 static_cast<std::size_t>(cfg.image_size),
                                 static_cast<std::size_t>(cfg.image_size)},
                                std::move(pix));
  ds.labels = std::move(labels);
  ds.class_names.assign(names.begin(), names.begin() + cfg.num_classes);
  return ds;
}

LabeledDataset make_surrogate(const LabeledDataset& source,
                              const SurrogatePolicy& policy,
                              const std::vector<std::string>& main_classes,
                              std::uint64_t seed) {
  if (policy.count == 0)
    throw ValueError("make_surrogate: sample count must be positive");
  if (policy.count > source.size())
    throw ValueError("make_surrogate: source has only " +
                     std::to_string(source.size()) + " samples, need " +
                     std::to_string(policy.count));
  if (policy.require_disjoint) {
    for (const auto& name : source.class_names)
      if (std::find(main_classes.begin(), main_classes.end(), name) !=
          main_classes.end())
        throw ValueError("make_surrogate: class '" + name +
                         "' overlaps the main task");
  }
  std::vector<std::size_t> idx(source.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, "surrogate"));
  rng.shuffle(idx.data(), idx.size());
  idx.resize(policy.count);
  LabeledDataset out = source.subset(idx);
  out.split = "surrogate";
  return out;
}

void export_raw(const LabeledDataset& ds, const std::string& dir,
                const std::string& config_hash) {
  if (!ds.images.defined() || ds.images.rank() != 4)
    throw DimensionError("export_raw: dataset images must be [n,c,h,w]");
  if (ds.images.shape()[0] != ds.labels.size())
    throw DimensionError("export_raw: image and label counts differ");
  ensure_dir(dir);
  const auto& s = ds.images.shape();

  nlohmann::json meta;
  meta["format"] = "vitbd-dataset";
  meta["version"] = 1;
  meta["count"] = s[0];
  meta["channels"] = s[1];
  meta["height"] = s[2];
  meta["width"] = s[3];
  meta["class_names"] = ds.class_names;
  meta["split"] = ds.split;
  meta["has_source_labels"] = !ds.source_labels.empty();
  if (!config_hash.empty()) meta["config_hash"] = config_hash;

  ByteWriter imgs;
  for (const double v : ds.images.values()) imgs.f64(v);
  ByteWriter labs;
  for (const int y : ds.labels) labs.u32(static_cast<std::uint32_t>(y));

  write_file_atomic(dir + "/images.bin", imgs.data());
  write_file_atomic(dir + "/labels.bin", labs.data());
  if (!ds.source_labels.empty()) {
    ByteWriter src;
    for (const int y : ds.source_labels)
      src.u32(static_cast<std::uint32_t>(y));
    write_file_atomic(dir + "/source_labels.bin", src.data());
  }
  write_file_atomic(dir + "/meta.json", meta.dump(2) + "\n");
}

LabeledDataset load_raw(const std::string& dir) {
  const nlohmann::json meta = parse_sidecar(dir + "/meta.json");
  if (!meta.contains("format") || meta["format"] != "vitbd-dataset")
    throw FormatError(FormatError::Kind::corrupt_header,
                      "not a dataset directory: " + dir);
  if (!meta.contains("version") || meta["version"].get<int>() != 1)
    throw FormatError(FormatError::Kind::version_mismatch,
                      "unsupported dataset version in " + dir);

  std::size_t n, c, h, w;
  std::vector<std::string> class_names;
  std::string split;
  bool has_source = false;
  try {
    n = meta.at("count").get<std::size_t>();
    c = meta.at("channels").get<std::size_t>();
    h = meta.at("height").get<std::size_t>();
    w = meta.at("width").get<std::size_t>();
    class_names = meta.at("class_names").get<std::vector<std::string>>();
    split = meta.at("split").get<std::string>();
    has_source = meta.at("has_source_labels").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::bad_content,
                      "dataset sidecar incomplete: " + dir + ": " + e.what());
  }
  if (n == 0 || c == 0 || h == 0 || w == 0)
    throw FormatError(FormatError::Kind::bad_content,
                      "dataset sidecar declares an empty shape: " + dir);

  const std::string img_bytes = read_binary_file(dir + "/images.bin");
  const std::size_t want = n * c * h * w;
  if (img_bytes.size() != want * 8)
    throw FormatError(FormatError::Kind::sidecar_mismatch,
                      "images.bin size disagrees with the sidecar shape in " +
                          dir);
  ByteReader ir(img_bytes, dir + "/images.bin");
  std::vector<double> pix(want);
  for (double& v : pix) {
    v = ir.f64();
    if (!(v >= 0.0 && v <= 1.0))
      throw FormatError(FormatError::Kind::bad_content,
                        "pixel value outside [0,1] in " + dir);
  }

  const auto read_labels = [&](const std::string& path) {
    const std::string bytes = read_binary_file(path);
    if (bytes.size() != n * 4)
      throw FormatError(FormatError::Kind::sidecar_mismatch,
                        "label record count disagrees with the sidecar in " +
                            dir);
    ByteReader lr(bytes, path);
    std::vector<int> out(n);
    for (int& y : out) {
      const std::uint32_t raw = lr.u32();
      if (!class_names.empty() && raw >= class_names.size())
        throw FormatError(FormatError::Kind::bad_content,
                          "label outside the declared class set in " + dir);
      y = static_cast<int>(raw);
    }
    return out;
  };

  LabeledDataset ds;
  ds.images = Tensor::from_data({n, c, h, w}, std::move(pix));
  ds.labels = read_labels(dir + "/labels.bin");
  if (has_source) ds.source_labels = read_labels(dir + "/source_labels.bin");
  ds.class_names = std::move(class_names);
  ds.split = std::move(split);
  return ds;
}

Tensor resize_nearest(const Tensor& images, std::size_t out_h,
                      std::size_t out_w) {
  if (images.rank() != 4)
    throw DimensionError("resize_nearest: images must be [n,c,h,w]");
  if (out_h == 0 || out_w == 0)
    throw ValueError("resize_nearest: empty target size");
  const auto& s = images.shape();
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  std::vector<double> out(n * c * out_h * out_w);
  const auto src = images.values();
  const std::int64_t planes = static_cast<std::int64_t>(n * c);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* in_plane = src.data() + static_cast<std::size_t>(p) * h * w;
    double* out_plane = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (std::size_t r = 0; r < out_h; ++r) {
      const std::size_t ir = r * h / out_h;
      for (std::size_t q = 0; q < out_w; ++q)
        out_plane[r * out_w + q] = in_plane[ir * w + q * w / out_w];
    }
  }
  return Tensor::from_data({n, c, out_h, out_w}, std::move(out));
}

}  // namespace vitbd
