// Synthetic multimodal dataset generation and netpbm image I/O.
//
// Modality A renders shapes by class-keyed color; modality B renders the same
// geometry as pseudo-depth shading, so each modality independently suffices
// to segment but carries different appearance. Corruption regimes degrade
// exactly one modality of a corrupted sample, never the label.

#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "aseg/tensor.hpp"

namespace aseg {

struct Sample {
  TensorPtr<double> modality_a;  // 1x3xHxW in [0,1]
  TensorPtr<double> modality_b;
  std::vector<int> label;  // HxW class ids, 255 = ignore
  int h = 0, w = 0;
};

// --- netpbm -----------------------------------------------------------------

namespace netpbm {

inline void skip_space(std::istream& is) {
  while (true) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}

inline int read_value(std::istream& is, const std::string& path, const std::string& what) {
  skip_space(is);
  int v;
  if (!(is >> v))
    throw std::runtime_error(path + ": malformed header, expected " + what +
                             " near byte " + std::to_string(is.tellg()));
  return v;
}

struct Header {
  std::string magic;
  int w = 0, h = 0, maxval = 0;
};

inline Header read_header(std::istream& is, const std::string& path,
                          const std::string& expected_magic) {
  Header hd;
  char m[2];
  is.read(m, 2);
  hd.magic.assign(m, 2);
  if (!is || hd.magic != expected_magic)
    throw std::runtime_error(path + ": expected " + expected_magic + " magic, got '" +
                             hd.magic + "'");
  hd.w = read_value(is, path, "width");
  hd.h = read_value(is, path, "height");
  hd.maxval = read_value(is, path, "maxval");
  if (hd.maxval != 255)
    throw std::runtime_error(path + ": unsupported maxval " + std::to_string(hd.maxval) +
                             " (only 255)");
  is.get();  // single whitespace before payload
  return hd;
}

}  // namespace netpbm

// image: 1x3xHxW in [0,1], written as binary P6
inline void save_ppm(const TensorPtr<double>& img, const std::string& path) {
  if (img->c != 3)
    throw std::invalid_argument("save_ppm: expected 3 channels, got " + img->shape_str());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_ppm: cannot open " + path);
  os << "P6\n" << img->w << " " << img->h << "\n255\n";
  const std::size_t plane = std::size_t(img->h) * img->w;
  std::vector<unsigned char> buf(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (int ch = 0; ch < 3; ++ch) {
      double v = img->data[std::size_t(ch) * plane + i];
      v = std::max(0.0, std::min(1.0, v));
      buf[i * 3 + ch] = (unsigned char)std::lround(v * 255.0);
    }
  os.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  if (!os) throw std::runtime_error("save_ppm: write failed for " + path);
}

inline TensorPtr<double> load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_ppm: cannot open " + path);
  auto hd = netpbm::read_header(is, path, "P6");
  const std::size_t plane = std::size_t(hd.h) * hd.w;
  std::vector<unsigned char> buf(plane * 3);
  is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (std::size_t(is.gcount()) != buf.size())
    throw std::runtime_error(path + ": truncated payload at byte " +
                             std::to_string(std::size_t(is.tellg())));
  auto img = Tensor<double>::make(1, 3, hd.h, hd.w);
  for (std::size_t i = 0; i < plane; ++i)
    for (int ch = 0; ch < 3; ++ch)
      img->data[std::size_t(ch) * plane + i] = buf[i * 3 + ch] / 255.0;
  return img;
}

inline void save_pgm_labels(const std::vector<int>& mask, int h, int w,
                            const std::string& path) {
  if (mask.size() != std::size_t(h) * w)
    throw std::invalid_argument("save_pgm_labels: mask size != HxW");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_pgm_labels: cannot open " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> buf(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) buf[i] = (unsigned char)mask[i];
  os.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  if (!os) throw std::runtime_error("save_pgm_labels: write failed for " + path);
}

inline std::vector<int> load_pgm_labels(const std::string& path, int* out_h = nullptr,
                                        int* out_w = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_pgm_labels: cannot open " + path);
  auto hd = netpbm::read_header(is, path, "P5");
  std::vector<unsigned char> buf(std::size_t(hd.h) * hd.w);
  is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (std::size_t(is.gcount()) != buf.size())
    throw std::runtime_error(path + ": truncated payload at byte " +
                             std::to_string(std::size_t(is.tellg())));
  if (out_h) *out_h = hd.h;
  if (out_w) *out_w = hd.w;
  return std::vector<int>(buf.begin(), buf.end());
}

// also used for receptive-field heatmaps: min-max scaled to 0..255, with the
// scaling recorded in a sidecar text file
inline void save_pgm_scaled(const TensorPtr<double>& map, const std::string& path) {
  double lo = map->data[0], hi = map->data[0];
  for (double v : map->data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double range = hi > lo ? hi - lo : 1.0;
  std::vector<int> scaled(map->data.size());
  for (std::size_t i = 0; i < map->data.size(); ++i)
    scaled[i] = int(std::lround((map->data[i] - lo) / range * 255.0));
  save_pgm_labels(scaled, map->h, map->w, path);
  std::ofstream side(path + ".minmax.txt");
  side << "min " << lo << "\nmax " << hi << "\n";
}

// --- synthetic dataset ------------------------------------------------------

struct SyntheticSpec {
  int num_classes = 6;  // class 0 background, 1..C-1 shape classes
  int height = 64, width = 64;
  int instances_min = 3, instances_max = 6;
  std::vector<std::string> regimes = {"overexposure", "noise", "blackout"};
  double corruption_prob = 0.0;
  std::uint64_t seed = 1;
};

struct DatasetManifest {
  std::string root;
  SyntheticSpec spec;
  struct Entry {
    std::string a, b, label;
    std::string corruption;  // "none" or "<regime>:<modality>"
  };
  std::vector<Entry> train, val;

  const std::vector<Entry>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    throw std::invalid_argument("manifest: unknown split '" + name + "'");
  }
};

namespace detail {

// shape kinds cycled over foreground classes
enum class ShapeKind { Rect, Disc, Triangle, HBar, VBar };

inline void render_sample(const SyntheticSpec& spec, Rng& rng, Sample& s) {
  const int H = spec.height, W = spec.width;
  s.h = H;
  s.w = W;
  s.modality_a = Tensor<double>::make(1, 3, H, W);
  s.modality_b = Tensor<double>::make(1, 3, H, W);
  s.label.assign(std::size_t(H) * W, 0);
  auto& A = *s.modality_a;
  auto& B = *s.modality_b;

  // background: textured gray in A, vertical depth ramp in B
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double n = rng.uniform(-0.02, 0.02);
      for (int ch = 0; ch < 3; ++ch) A.at(0, ch, y, x) = 0.15 + n;
      double d = 0.08 + 0.10 * double(y) / H;
      for (int ch = 0; ch < 3; ++ch) B.at(0, ch, y, x) = d;
    }

  // fixed class palette for modality A
  static const double palette[][3] = {
      {0.15, 0.15, 0.15}, {0.85, 0.20, 0.20}, {0.20, 0.75, 0.25}, {0.25, 0.35, 0.90},
      {0.90, 0.80, 0.20}, {0.75, 0.25, 0.80}, {0.20, 0.80, 0.80}, {0.90, 0.55, 0.20},
  };

  int n_inst = rng.uniform_int(spec.instances_min, spec.instances_max);
  for (int inst = 0; inst < n_inst; ++inst) {
    int cls = rng.uniform_int(1, spec.num_classes - 1);
    auto kind = ShapeKind(int(ShapeKind::Rect) + (cls - 1) % 5);
    int cy = rng.uniform_int(4, H - 5), cx = rng.uniform_int(4, W - 5);
    int sy = rng.uniform_int(6, std::max(7, H / 3));
    int sx = rng.uniform_int(6, std::max(7, W / 3));
    double jitter = rng.uniform(0.9, 1.1);
    double depth = rng.uniform(0.45, 1.0);

    int y0 = std::max(0, cy - sy / 2), y1 = std::min(H, cy + sy / 2 + 1);
    int x0 = std::max(0, cx - sx / 2), x1 = std::min(W, cx + sx / 2 + 1);
    if (kind == ShapeKind::HBar) {
      int t = rng.uniform_int(1, 3);
      y0 = std::max(0, cy - t / 2);
      y1 = std::min(H, y0 + t);
      x0 = std::max(0, cx - sx);
      x1 = std::min(W, cx + sx + 1);
    } else if (kind == ShapeKind::VBar) {
      int t = rng.uniform_int(1, 3);
      x0 = std::max(0, cx - t / 2);
      x1 = std::min(W, x0 + t);
      y0 = std::max(0, cy - sy);
      y1 = std::min(H, cy + sy + 1);
    }
    int extent_y = std::max(1, y1 - y0);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        bool inside = true;
        if (kind == ShapeKind::Disc) {
          double dy = (y - cy) / (0.5 * sy + 0.5), dx = (x - cx) / (0.5 * sx + 0.5);
          inside = dy * dy + dx * dx <= 1.0;
        } else if (kind == ShapeKind::Triangle) {
          // upward triangle: row width shrinks towards y0
          double frac = double(y - y0) / extent_y;
          int half = int(frac * 0.5 * (x1 - x0));
          inside = std::abs(x - cx) <= half;
        }
        if (!inside) continue;
        s.label[std::size_t(y) * W + x] = cls;
        for (int ch = 0; ch < 3; ++ch) {
          double v = palette[cls][ch] * jitter + rng.uniform(-0.02, 0.02);
          A.at(0, ch, y, x) = std::max(0.0, std::min(1.0, v));
        }
        // pseudo-depth shading keyed to geometry alone
        double shade = depth - 0.30 * double(y - y0) / extent_y;
        for (int ch = 0; ch < 3; ++ch) B.at(0, ch, y, x) = shade;
      }
  }
}

inline void corrupt_modality(TensorPtr<double>& img, const std::string& regime, Rng& rng) {
  auto& t = *img;
  if (regime == "blackout") {
    std::fill(t.data.begin(), t.data.end(), 0.0);
  } else if (regime == "noise") {
    for (auto& v : t.data) v = std::max(0.0, std::min(1.0, v + rng.normal() * 0.35));
  } else if (regime == "overexposure") {
    int ph = std::max(1, t.h * 3 / 4), pw = std::max(1, t.w * 3 / 4);
    int y0 = rng.uniform_int(0, t.h - ph), x0 = rng.uniform_int(0, t.w - pw);
    for (int ch = 0; ch < 3; ++ch)
      for (int y = y0; y < y0 + ph; ++y)
        for (int x = x0; x < x0 + pw; ++x) t.at(0, ch, y, x) = 1.0;
  } else {
    throw std::invalid_argument("unknown corruption regime '" + regime + "'");
  }
}

}  // namespace detail

inline Sample generate_sample(const SyntheticSpec& spec, std::uint64_t index,
                              std::string* corruption_tag = nullptr) {
  Rng master(spec.seed);
  Rng rng = master.split(index);
  Sample s;
  detail::render_sample(spec, rng, s);
  std::string tag = "none";
  if (!spec.regimes.empty() && rng.uniform() < spec.corruption_prob) {
    const std::string regime = spec.regimes[rng.uniform_int(0, int(spec.regimes.size()) - 1)];
    bool hit_a = rng.uniform() < 0.5;
    detail::corrupt_modality(hit_a ? s.modality_a : s.modality_b, regime, rng);
    tag = regime + ":" + (hit_a ? "a" : "b");
  }
  if (corruption_tag) *corruption_tag = tag;
  return s;
}

inline nlohmann::json spec_to_json(const SyntheticSpec& s) {
  return {{"num_classes", s.num_classes}, {"height", s.height},     {"width", s.width},
          {"instances_min", s.instances_min}, {"instances_max", s.instances_max},
          {"regimes", s.regimes},         {"corruption_prob", s.corruption_prob},
          {"seed", s.seed}};
}

inline SyntheticSpec spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.num_classes = j.at("num_classes").get<int>();
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  s.instances_min = j.at("instances_min").get<int>();
  s.instances_max = j.at("instances_max").get<int>();
  s.regimes = j.at("regimes").get<std::vector<std::string>>();
  s.corruption_prob = j.at("corruption_prob").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

inline DatasetManifest generate_synthetic(const SyntheticSpec& spec, int n_train, int n_val,
                                          const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("generate_synthetic: cannot create " + out_dir);

  DatasetManifest m;
  m.root = out_dir;
  m.spec = spec;
  auto emit = [&](const std::string& split, int count, std::uint64_t base) {
    std::vector<DatasetManifest::Entry> entries;
    for (int i = 0; i < count; ++i) {
      std::string stem = split + "_" + std::to_string(i);
      std::string tag;
      Sample s = generate_sample(spec, base + i, &tag);
      DatasetManifest::Entry e;
      e.a = stem + "_a.ppm";
      e.b = stem + "_b.ppm";
      e.label = stem + "_label.pgm";
      e.corruption = tag;
      save_ppm(s.modality_a, out_dir + "/" + e.a);
      save_ppm(s.modality_b, out_dir + "/" + e.b);
      save_pgm_labels(s.label, s.h, s.w, out_dir + "/" + e.label);
      entries.push_back(std::move(e));
    }
    return entries;
  };
  m.train = emit("train", n_train, 0);
  m.val = emit("val", n_val, 1u << 20);

  nlohmann::json j;
  j["root"] = out_dir;
  j["spec"] = spec_to_json(spec);
  auto dump_split = [](const std::vector<DatasetManifest::Entry>& es) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : es)
      arr.push_back({{"a", e.a}, {"b", e.b}, {"label", e.label}, {"corruption", e.corruption}});
    return arr;
  };
  j["train"] = dump_split(m.train);
  j["val"] = dump_split(m.val);
  std::ofstream os(out_dir + "/manifest.json");
  os << j.dump(2) << "\n";
  if (!os) throw std::runtime_error("generate_synthetic: cannot write manifest in " + out_dir);
  return m;
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_manifest: cannot open " + path);
  nlohmann::json j;
  is >> j;
  DatasetManifest m;
  // sample paths are relative to the manifest's own directory
  auto parent = std::filesystem::path(path).parent_path();
  m.root = parent.empty() ? "." : parent.string();
  m.spec = spec_from_json(j.at("spec"));
  auto read_split = [&](const nlohmann::json& arr) {
    std::vector<DatasetManifest::Entry> es;
    for (const auto& e : arr)
      es.push_back({e.at("a").get<std::string>(), e.at("b").get<std::string>(),
                    e.at("label").get<std::string>(),
                    e.value("corruption", std::string("none"))});
    return es;
  };
  m.train = read_split(j.at("train"));
  m.val = read_split(j.at("val"));
  return m;
}

inline Sample load_sample(const DatasetManifest& m, const std::string& split, int index) {
  const auto& entries = m.split(split);
  if (index < 0 || index >= (int)entries.size())
    throw std::out_of_range("load_sample: index " + std::to_string(index) +
                            " out of range for split of size " + std::to_string(entries.size()));
  const auto& e = entries[index];
  Sample s;
  s.modality_a = load_ppm(m.root + "/" + e.a);
  s.modality_b = load_ppm(m.root + "/" + e.b);
  s.label = load_pgm_labels(m.root + "/" + e.label, &s.h, &s.w);
  return s;
}

// --- batching ---------------------------------------------------------------

struct Batch {
  TensorPtr<double> a, b;  // Nx3xHxW
  std::vector<int> labels;  // N*H*W
  std::vector<int> indices;
};

// Deterministic epoch iterator; augmentation hook is applied per sample with
// an RNG split from (seed, epoch, sample index).
class BatchIterator {
 public:
  using AugmentFn = std::function<void(Sample&, Rng&)>;

  BatchIterator(const DatasetManifest& m, std::string split, int batch_size,
                std::uint64_t shuffle_seed, bool shuffle, AugmentFn augment = nullptr)
      : manifest_(m),
        split_(std::move(split)),
        batch_size_(batch_size),
        seed_(shuffle_seed),
        shuffle_(shuffle),
        augment_(std::move(augment)) {
    order_.resize(manifest_.split(split_).size());
    std::iota(order_.begin(), order_.end(), 0);
  }

  void start_epoch(int epoch) {
    epoch_ = epoch;
    cursor_ = 0;
    std::iota(order_.begin(), order_.end(), 0);
    if (shuffle_) {
      Rng rng(seed_ ^ (0x51ed2701ULL * (epoch + 1)));
      for (int i = int(order_.size()) - 1; i > 0; --i)
        std::swap(order_[i], order_[rng.uniform_int(0, i)]);
    }
  }

  bool next(Batch& out) {
    const auto n = order_.size();
    if (cursor_ >= n) return false;
    int count = int(std::min<std::size_t>(batch_size_, n - cursor_));
    std::vector<Sample> samples;
    out.indices.clear();
    for (int i = 0; i < count; ++i) {
      int idx = order_[cursor_ + i];
      Sample s = load_sample(manifest_, split_, idx);
      if (augment_) {
        Rng rng(seed_ ^ (std::uint64_t(epoch_) << 32) ^ (0x9e37ULL * (idx + 1)));
        augment_(s, rng);
      }
      samples.push_back(std::move(s));
      out.indices.push_back(idx);
    }
    cursor_ += count;
    int h = samples[0].h, w = samples[0].w;
    out.a = Tensor<double>::make(count, 3, h, w);
    out.b = Tensor<double>::make(count, 3, h, w);
    out.labels.assign(std::size_t(count) * h * w, 255);
    const std::size_t img = std::size_t(3) * h * w;
    for (int i = 0; i < count; ++i) {
      std::copy(samples[i].modality_a->data.begin(), samples[i].modality_a->data.end(),
                out.a->data.begin() + i * img);
      std::copy(samples[i].modality_b->data.begin(), samples[i].modality_b->data.end(),
                out.b->data.begin() + i * img);
      std::copy(samples[i].label.begin(), samples[i].label.end(),
                out.labels.begin() + std::size_t(i) * h * w);
    }
    return true;
  }

 private:
  const DatasetManifest& manifest_;
  std::string split_;
  std::size_t batch_size_, cursor_ = 0;
  std::uint64_t seed_;
  bool shuffle_;
  AugmentFn augment_;
  std::vector<int> order_;
  int epoch_ = 0;
};

}  // namespace aseg
