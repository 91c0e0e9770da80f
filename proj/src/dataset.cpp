#include "poisonlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <unordered_map>

namespace poisonlab {

Batch Dataset::batch(const std::vector<int64_t>& positions) const {
  int64_t d = dim();
  Batch b;
  b.images = Tensor::zeros({static_cast<int64_t>(positions.size()), d});
  b.labels.reserve(positions.size());
  b.ids.reserve(positions.size());
  for (size_t i = 0; i < positions.size(); ++i) {
    int64_t p = positions[i];
    std::memcpy(b.images.v.data() + static_cast<int64_t>(i) * d, image(p), sizeof(double) * static_cast<size_t>(d));
    b.labels.push_back(labels[static_cast<size_t>(p)]);
    b.ids.push_back(ids[static_cast<size_t>(p)]);
  }
  return b;
}

Tensor Dataset::image_tensor(int64_t pos) const {
  Tensor t = Tensor::zeros(image_shape);
  std::memcpy(t.v.data(), image(pos), sizeof(double) * static_cast<size_t>(dim()));
  return t;
}

int64_t Dataset::position_of(int64_t id) const {
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return static_cast<int64_t>(i);
  return -1;
}

Dataset load_cifar10_bin(const std::vector<std::string>& paths) {
  constexpr int64_t kRecord = 3073;
  constexpr int64_t kPixels = 3072;
  Dataset d;
  d.classes = 10;
  d.image_shape = {3, 32, 32};
  int64_t next_id = 0;
  for (const auto& path : paths) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path);
    f.seekg(0, std::ios::end);
    int64_t size = static_cast<int64_t>(f.tellg());
    f.seekg(0);
    if (size % kRecord != 0)
      throw FormatError(path + ": size " + std::to_string(size) + " not a multiple of " + std::to_string(kRecord) +
                        " (truncated at byte offset " + std::to_string((size / kRecord) * kRecord) + ")");
    std::vector<unsigned char> buf(static_cast<size_t>(size));
    f.read(reinterpret_cast<char*>(buf.data()), size);
    for (int64_t r = 0; r < size / kRecord; ++r) {
      int64_t off = r * kRecord;
      int label = buf[static_cast<size_t>(off)];
      if (label >= 10)
        throw FormatError(path + ": label byte " + std::to_string(label) + " >= 10 at byte offset " +
                          std::to_string(off));
      d.labels.push_back(label);
      d.ids.push_back(next_id++);
      for (int64_t i = 0; i < kPixels; ++i)
        d.pixels.push_back(static_cast<double>(buf[static_cast<size_t>(off + 1 + i)]) / 255.0);
    }
  }
  return d;
}

void save_cifar10_bin(const Dataset& d, const std::string& path) {
  if (d.dim() != 3072) throw FormatError("save_cifar10_bin: dataset is not 3x32x32");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  for (int64_t i = 0; i < d.n(); ++i) {
    unsigned char label = static_cast<unsigned char>(d.labels[static_cast<size_t>(i)]);
    f.write(reinterpret_cast<const char*>(&label), 1);
    const double* px = d.image(i);
    for (int64_t j = 0; j < 3072; ++j) {
      double v = std::clamp(px[j], 0.0, 1.0) * 255.0;
      unsigned char b = static_cast<unsigned char>(std::lround(v));
      f.write(reinterpret_cast<const char*>(&b), 1);
    }
  }
}

Dataset subset_stratified(const Dataset& d, double fraction, uint64_t seed) {
  std::map<int, std::vector<int64_t>> by_class;
  for (int64_t i = 0; i < d.n(); ++i) by_class[d.labels[static_cast<size_t>(i)]].push_back(i);
  std::vector<int64_t> keep;
  SplitRng rng = SplitRng(seed).derive("stratified-subset");
  for (auto& [cls, positions] : by_class) {
    SplitRng crng = rng.derive(static_cast<uint64_t>(cls));
    auto perm = crng.permutation(static_cast<int64_t>(positions.size()));
    int64_t take = static_cast<int64_t>(std::llround(fraction * static_cast<double>(positions.size())));
    for (int64_t i = 0; i < take; ++i) keep.push_back(positions[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
  }
  std::sort(keep.begin(), keep.end());
  Dataset out;
  out.classes = d.classes;
  out.image_shape = d.image_shape;
  out.split = d.split;
  for (int64_t p : keep) {
    out.labels.push_back(d.labels[static_cast<size_t>(p)]);
    out.ids.push_back(d.ids[static_cast<size_t>(p)]);
    const double* px = d.image(p);
    out.pixels.insert(out.pixels.end(), px, px + d.dim());
  }
  return out;
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& d, int64_t n_val_per_class) {
  std::map<int, int64_t> taken;
  Dataset tr, va;
  tr.classes = va.classes = d.classes;
  tr.image_shape = va.image_shape = d.image_shape;
  tr.split = "train";
  va.split = "val";
  for (int64_t i = 0; i < d.n(); ++i) {
    int cls = d.labels[static_cast<size_t>(i)];
    Dataset& dst = (taken[cls] < n_val_per_class) ? (++taken[cls], va) : tr;
    dst.labels.push_back(cls);
    dst.ids.push_back(d.ids[static_cast<size_t>(i)]);
    const double* px = d.image(i);
    dst.pixels.insert(dst.pixels.end(), px, px + d.dim());
  }
  return {tr, va};
}

Dataset synth_blobs(int64_t classes, int64_t dim, int64_t n_per_class, double separation, uint64_t seed) {
  if (n_per_class < 1) throw std::invalid_argument("synth_blobs: n_per_class must be >= 1");
  SplitRng rng = SplitRng(seed).derive("synth-blobs");
  // Class centroids on a sphere of radius `separation` around 0.5.
  std::vector<std::vector<double>> centers(static_cast<size_t>(classes), std::vector<double>(static_cast<size_t>(dim)));
  SplitRng crng = rng.derive("centers");
  for (auto& c : centers) {
    double norm = 0;
    for (double& x : c) {
      x = crng.normal();
      norm += x * x;
    }
    norm = std::sqrt(std::max(norm, 1e-12));
    for (double& x : c) x = 0.5 + separation * 0.1 * x / norm;
  }
  Dataset d;
  d.classes = classes;
  d.image_shape = {dim};
  int64_t id = 0;
  SplitRng nrng = rng.derive("noise");
  for (int64_t cls = 0; cls < classes; ++cls) {
    for (int64_t i = 0; i < n_per_class; ++i) {
      for (int64_t j = 0; j < dim; ++j) {
        double v = centers[static_cast<size_t>(cls)][static_cast<size_t>(j)] + 0.08 * nrng.normal();
        d.pixels.push_back(std::clamp(v, 0.0, 1.0));
      }
      d.labels.push_back(static_cast<int>(cls));
      d.ids.push_back(id++);
    }
  }
  return d;
}

Dataset synth_textures(int64_t classes, int64_t n_per_class, uint64_t seed, double ambiguity) {
  if (ambiguity < 0.0 || ambiguity > 1.0) throw std::invalid_argument("synth_textures: ambiguity must lie in [0,1]");
  const int64_t C = 3, H = 32, W = 32;
  SplitRng rng = SplitRng(seed).derive("synth-textures");
  // Smooth class textures: a few random low-frequency sinusoids per channel.
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::vector<std::vector<Wave>> waves(static_cast<size_t>(classes * C));
  SplitRng wrng = rng.derive("waves");
  for (auto& ch : waves) {
    SplitRng r = wrng.derive(static_cast<uint64_t>(&ch - waves.data()));
    int n = 3;
    for (int k = 0; k < n; ++k)
      ch.push_back({r.uniform(0.5, 3.0), r.uniform(0.5, 3.0), r.uniform(0.0, 6.28), r.uniform(0.4, 1.0)});
  }
  Dataset d;
  d.classes = classes;
  d.image_shape = {C, H, W};
  SplitRng irng = rng.derive("instances");
  int64_t id = 0;
  for (int64_t cls = 0; cls < classes; ++cls) {
    for (int64_t i = 0; i < n_per_class; ++i) {
      SplitRng r = irng.derive(static_cast<uint64_t>(cls * n_per_class + i));
      // Boundary overlap: blend in another class's texture so classes are not
      // trivially separable. A derived stream keeps ambiguity=0 bit-identical
      // to the unblended generator.
      SplitRng mr = r.derive("mix");
      int64_t other = classes > 1 ? (cls + 1 + mr.uniform_int(classes - 1)) % classes : cls;
      double mix = ambiguity > 0.0 ? mr.uniform(0.0, ambiguity) : 0.0;
      double sy = r.uniform(-3, 3), sx = r.uniform(-3, 3);  // texture shift
      double bright = r.uniform(-0.08, 0.08);
      for (int64_t c = 0; c < C; ++c) {
        const auto& ch = waves[static_cast<size_t>(cls * C + c)];
        const auto& och = waves[static_cast<size_t>(other * C + c)];
        for (int64_t y = 0; y < H; ++y) {
          for (int64_t x = 0; x < W; ++x) {
            double v = 0;
            for (const Wave& w : ch)
              v += w.amp * std::sin(w.fy * (static_cast<double>(y) + sy) * 6.28318530717958647 / 32.0 +
                                    w.fx * (static_cast<double>(x) + sx) * 6.28318530717958647 / 32.0 + w.phase);
            if (mix > 0.0) {
              double o = 0;
              for (const Wave& w : och)
                o += w.amp * std::sin(w.fy * (static_cast<double>(y) + sy) * 6.28318530717958647 / 32.0 +
                                      w.fx * (static_cast<double>(x) + sx) * 6.28318530717958647 / 32.0 + w.phase);
              v = (1.0 - mix) * v + mix * o;
            }
            v = 0.5 + 0.18 * v + bright + 0.04 * r.normal();
            d.pixels.push_back(std::clamp(v, 0.0, 1.0));
          }
        }
      }
      d.labels.push_back(static_cast<int>(cls));
      d.ids.push_back(id++);
    }
  }
  return d;
}

namespace {
constexpr char kMagic[8] = {'P', 'L', 'A', 'B', 'D', 'S', 'E', 'T'};
template <class T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw FormatError("truncated dataset file");
  return v;
}
}  // namespace

void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  f.write(kMagic, 8);
  put<int64_t>(f, d.classes);
  put<int64_t>(f, static_cast<int64_t>(d.image_shape.size()));
  for (int64_t x : d.image_shape) put<int64_t>(f, x);
  put<int64_t>(f, d.n());
  for (int64_t i = 0; i < d.n(); ++i) put<int32_t>(f, d.labels[static_cast<size_t>(i)]);
  for (int64_t i = 0; i < d.n(); ++i) put<int64_t>(f, d.ids[static_cast<size_t>(i)]);
  f.write(reinterpret_cast<const char*>(d.pixels.data()),
          static_cast<std::streamsize>(d.pixels.size() * sizeof(double)));
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0) throw FormatError(path + ": bad magic");
  Dataset d;
  d.classes = get<int64_t>(f);
  int64_t ndim = get<int64_t>(f);
  for (int64_t i = 0; i < ndim; ++i) d.image_shape.push_back(get<int64_t>(f));
  int64_t n = get<int64_t>(f);
  d.labels.resize(static_cast<size_t>(n));
  d.ids.resize(static_cast<size_t>(n));
  for (auto& l : d.labels) l = get<int32_t>(f);
  for (auto& i : d.ids) i = get<int64_t>(f);
  d.pixels.resize(static_cast<size_t>(n * numel(d.image_shape)));
  f.read(reinterpret_cast<char*>(d.pixels.data()), static_cast<std::streamsize>(d.pixels.size() * sizeof(double)));
  if (!f) throw FormatError(path + ": truncated pixel block");
  return d;
}

LinMapPtr flip_translate_map(int64_t channels, int64_t height, int64_t width, bool flip, int64_t dy, int64_t dx) {
  auto m = std::make_shared<LinMap>(channels * height * width, channels * height * width);
  for (int64_t c = 0; c < channels; ++c) {
    for (int64_t y = 0; y < height; ++y) {
      for (int64_t x = 0; x < width; ++x) {
        int64_t sx = flip ? width - 1 - x : x;
        int64_t iy = y - dy, ix = sx - dx;
        if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;  // zero padding
        m->add((c * height + y) * width + x, (c * height + iy) * width + ix);
      }
    }
  }
  return m;
}

AugmentSample sample_augment(SplitRng& rng) {
  AugmentSample s;
  s.flip = rng.bernoulli(0.5);
  s.dy = rng.uniform_int(9) - 4;
  s.dx = rng.uniform_int(9) - 4;
  return s;
}

Batch augment(const Batch& b, AugmentPolicy policy, SplitRng& rng, const Shape& image_shape) {
  if (policy == AugmentPolicy::None) return b;
  if (image_shape.size() != 3) return b;  // flat datasets are not augmented
  int64_t C = image_shape[0], H = image_shape[1], W = image_shape[2];
  Batch out = b;
  int64_t d = b.dim();
  std::vector<double> dst(static_cast<size_t>(d));
  for (int64_t i = 0; i < b.size(); ++i) {
    AugmentSample s = sample_augment(rng);
    auto map = flip_translate_map(C, H, W, s.flip, s.dy, s.dx);
    std::fill(dst.begin(), dst.end(), 0.0);
    map->apply(b.images.v.data() + i * d, dst.data(), 1);
    std::copy(dst.begin(), dst.end(), out.images.v.begin() + i * d);
  }
  return out;
}

}  // namespace poisonlab
