#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gbn/rng.hpp"
#include "gbn/tensor.hpp"

namespace gbn::data {

/// Images [N×C×H×W] in [0, 1] with class labels.
struct Dataset {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (images.rank() != 4 || images.dim(0) != labels.size()) {
      throw ShapeError("dataset: images " + to_string(images.shape()) + " vs " +
                       std::to_string(labels.size()) + " labels");
    }
    for (double v : images.data())
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("dataset: pixel outside [0, 1]");
  }

  std::size_t example_size() const { return size() == 0 ? 0 : images.size() / size(); }

  /// First n examples (all of them when n exceeds the size).
  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto [x, y] = gather(idx);
    return {std::move(x), std::move(y)};
  }

  std::pair<Tensor, std::vector<int>> gather(std::span<const std::size_t> idx) const {
    const std::size_t per = example_size();
    std::vector<double> px(idx.size() * per);
    std::vector<int> y(idx.size());
    const auto src = images.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= size()) throw std::out_of_range("dataset: example index out of range");
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                  px.begin() + static_cast<std::ptrdiff_t>(i * per));
      y[i] = labels[idx[i]];
    }
    Shape s = images.shape();
    s[0] = idx.size();
    return {Tensor(std::move(s), std::move(px)), std::move(y)};
  }
};

// ---------------------------------------------------------------------------
// IDX files

enum class IdxErrc { io, wrong_magic, truncated, count_mismatch, bad_header };

inline const char* to_string(IdxErrc e) {
  switch (e) {
    case IdxErrc::io: return "io";
    case IdxErrc::wrong_magic: return "wrong_magic";
    case IdxErrc::truncated: return "truncated";
    case IdxErrc::count_mismatch: return "count_mismatch";
    case IdxErrc::bad_header: return "bad_header";
  }
  return "unknown";
}

class IdxError : public std::runtime_error {
 public:
  IdxError(IdxErrc code, const std::string& what)
      : std::runtime_error(std::string("idx ") + data::to_string(code) + ": " + what),
        code_(code) {}
  IdxErrc code() const { return code_; }

 private:
  IdxErrc code_;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Big-endian magic (0x0000 | type 0x08 | rank), rank extents, unsigned bytes.
struct IdxFile {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

inline bool is_gzip_path(const std::filesystem::path& p) { return p.extension() == ".gz"; }

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  if (is_gzip_path(path)) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw IdxError(IdxErrc::io, "cannot open " + path.string());
    std::uint8_t buf[1 << 15];
    int got;
    while ((got = gzread(f, buf, sizeof buf)) > 0) bytes.insert(bytes.end(), buf, buf + got);
    const bool failed = got < 0;
    gzclose(f);
    if (failed) throw IdxError(IdxErrc::io, "gzip read failure in " + path.string());
    return bytes;
  }
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.string().c_str(), "rb"),
                                                    &std::fclose);
  if (!f) throw IdxError(IdxErrc::io, "cannot open " + path.string());
  std::uint8_t buf[1 << 15];
  std::size_t got;
  while ((got = std::fread(buf, 1, sizeof buf, f.get())) > 0)
    bytes.insert(bytes.end(), buf, buf + got);
  return bytes;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (is_gzip_path(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb");
    if (!f) throw IdxError(IdxErrc::io, "cannot create " + path.string());
    const int put = bytes.empty() ? 0 : gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    if (put != static_cast<int>(bytes.size()))
      throw IdxError(IdxErrc::io, "gzip write failure in " + path.string());
    return;
  }
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.string().c_str(), "wb"),
                                                    &std::fclose);
  if (!f || std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size())
    throw IdxError(IdxErrc::io, "cannot write " + path.string());
}

inline IdxFile parse_idx(std::span<const std::uint8_t> bytes) {
  auto be32 = [&](std::size_t at) {
    return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
           (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
  };
  if (bytes.size() < 4) throw IdxError(IdxErrc::truncated, "missing magic number");
  IdxFile f;
  f.magic = be32(0);
  if ((f.magic >> 16) != 0 || ((f.magic >> 8) & 0xFF) != 0x08) {
    throw IdxError(IdxErrc::wrong_magic, "unsupported magic 0x" + [&] {
      char b[9];
      std::snprintf(b, sizeof b, "%08x", f.magic);
      return std::string(b);
    }());
  }
  const std::size_t rank = f.magic & 0xFF;
  if (rank == 0) throw IdxError(IdxErrc::bad_header, "rank 0");
  if (bytes.size() < 4 + 4 * rank) throw IdxError(IdxErrc::truncated, "header cut short");
  std::size_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    f.dims.push_back(be32(4 + 4 * d));
    count *= f.dims.back();
  }
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() - header < count) {
    throw IdxError(IdxErrc::truncated, "payload has " + std::to_string(bytes.size() - header) +
                                           " bytes, header declares " + std::to_string(count));
  }
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                   bytes.begin() + static_cast<std::ptrdiff_t>(header + count));
  return f;
}

inline std::vector<std::uint8_t> serialize_idx(const IdxFile& f) {
  std::vector<std::uint8_t> out;
  auto put = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
  };
  put(f.magic);
  for (auto d : f.dims) put(d);
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

inline IdxFile read_idx(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return parse_idx(bytes);
}

inline void write_idx(const std::filesystem::path& path, const IdxFile& f) {
  const auto bytes = serialize_idx(f);
  write_bytes(path, bytes);
}

/// Loads an image file (magic 0x803, N×rows×cols) and a label file (magic
/// 0x801, N); pixels are divided by 255. ".gz" paths are decompressed.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const auto img = read_idx(images_path);
  if (img.magic != kIdxImagesMagic) {
    throw IdxError(IdxErrc::wrong_magic, images_path.string() + " is not an IDX image file");
  }
  const auto lab = read_idx(labels_path);
  if (lab.magic != kIdxLabelsMagic) {
    throw IdxError(IdxErrc::wrong_magic, labels_path.string() + " is not an IDX label file");
  }
  if (img.dims.size() != 3 || lab.dims.size() != 1) {
    throw IdxError(IdxErrc::bad_header, "expected rank-3 images and rank-1 labels");
  }
  if (img.dims[0] != lab.dims[0]) {
    throw IdxError(IdxErrc::count_mismatch, std::to_string(img.dims[0]) + " images vs " +
                                                std::to_string(lab.dims[0]) + " labels");
  }
  const std::size_t n = img.dims[0], rows = img.dims[1], cols = img.dims[2];
  std::vector<double> px(img.payload.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = img.payload[i] / 255.0;
  Dataset ds{Tensor({n, 1, rows, cols}, std::move(px)),
             std::vector<int>(lab.payload.begin(), lab.payload.end())};
  return ds;
}

/// Locates the standard MNIST file names (optionally gzipped) in `dir`.
inline std::pair<Dataset, Dataset> load_mnist_dir(const std::filesystem::path& dir) {
  auto find = [&](const std::string& stem) {
    for (const auto& cand : {dir / stem, dir / (stem + ".gz")})
      if (std::filesystem::exists(cand)) return cand;
    throw IdxError(IdxErrc::io, "missing " + (dir / stem).string() + "[.gz]");
  };
  return {load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte")),
          load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))};
}

// ---------------------------------------------------------------------------
// Batching

/// Index batches of a deterministic permutation of [0, n) drawn from
/// (seed, epoch); the final short batch is kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                                     std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batches: batch_size must be >= 1");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(mix_seed(seed, epoch));
  rng.shuffle(perm);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < n; at += batch_size) {
    const auto end = std::min(n, at + batch_size);
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(at),
                     perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> batches(const Dataset& ds, std::size_t batch_size,
                                                     std::uint64_t seed, std::uint64_t epoch) {
  return batches(ds.size(), batch_size, seed, epoch);
}

// ---------------------------------------------------------------------------
// Synthetic samples

enum class SynthKind { gaussian, lognormal, two_point_outlier };

struct SynthParams {
  double mean = 0.0;       // gaussian
  double stddev = 1.0;     // gaussian
  double log_mu = 0.0;     // lognormal: exp(N(log_mu, log_sigma²))
  double log_sigma = 1.0;  // lognormal
  // two_point_outlier: n − 1 draws from a two-point law with upper value
  // `upper` (and lower value −1/upper, so mean 0 and variance 1), standardized
  // to exact sample mean 0 and variance 1, followed by one `outlier` value.
  double outlier = 100.0;
  double upper = 0.5;
};

inline std::vector<double> synth_sample(SynthKind kind, std::size_t n, std::uint64_t seed,
                                        const SynthParams& p = {}) {
  if (n == 0) throw std::invalid_argument("synth_sample: n must be >= 1");
  Rng rng(seed);
  std::vector<double> x(n);
  switch (kind) {
    case SynthKind::gaussian:
      if (!(p.stddev > 0.0)) throw std::invalid_argument("synth_sample: stddev must be > 0");
      for (auto& v : x) v = p.mean + p.stddev * rng.normal();
      break;
    case SynthKind::lognormal:
      if (!(p.log_sigma > 0.0)) throw std::invalid_argument("synth_sample: log_sigma must be > 0");
      for (auto& v : x) v = std::exp(p.log_mu + p.log_sigma * rng.normal());
      break;
    case SynthKind::two_point_outlier: {
      if (!(p.upper > 0.0) || !std::isfinite(p.outlier))
        throw std::invalid_argument("synth_sample: upper must be > 0 and outlier finite");
      const double p_up = 1.0 / (1.0 + p.upper * p.upper);
      const std::size_t body = n - 1;
      for (std::size_t i = 0; i < body; ++i)
        x[i] = rng.uniform() < p_up ? p.upper : -1.0 / p.upper;
      if (body >= 2) {
        double mu = 0.0, ss = 0.0;
        for (std::size_t i = 0; i < body; ++i) mu += x[i];
        mu /= static_cast<double>(body);
        for (std::size_t i = 0; i < body; ++i) ss += (x[i] - mu) * (x[i] - mu);
        const double sd = std::sqrt(ss / static_cast<double>(body));
        for (std::size_t i = 0; i < body; ++i) x[i] = sd > 0.0 ? (x[i] - mu) / sd : 0.0;
      }
      x[n - 1] = p.outlier;
      break;
    }
  }
  return x;
}

/// Learnable stand-in for MNIST: each class has a fixed random stroke
/// pattern; examples are noisy, randomly dimmed copies clipped to [0, 1].
inline Dataset synth_digits(std::size_t n, std::uint64_t seed, std::size_t classes = 10,
                            std::size_t side = 28) {
  if (classes < 2) throw std::invalid_argument("synth_digits: need at least 2 classes");
  Rng proto_rng(mix_seed(seed, 0xD161));
  std::vector<std::vector<double>> protos(classes, std::vector<double>(side * side, 0.0));
  for (auto& proto : protos) {
    for (int stroke = 0; stroke < 4; ++stroke) {
      double y = proto_rng.uniform(4.0, side - 4.0), x = proto_rng.uniform(4.0, side - 4.0);
      const double dy = proto_rng.uniform(-1.0, 1.0), dx = proto_rng.uniform(-1.0, 1.0);
      for (int step = 0; step < 12; ++step) {
        const auto iy = static_cast<std::ptrdiff_t>(y), ix = static_cast<std::ptrdiff_t>(x);
        if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(side) &&
            ix < static_cast<std::ptrdiff_t>(side))
          proto[static_cast<std::size_t>(iy) * side + static_cast<std::size_t>(ix)] = 1.0;
        y += dy;
        x += dx;
      }
    }
  }
  Rng rng(mix_seed(seed, 0x5A3F));
  std::vector<double> px(n * side * side);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(rng.below(classes));
    labels[i] = static_cast<int>(c);
    const double gain = rng.uniform(0.6, 1.0);
    for (std::size_t k = 0; k < side * side; ++k) {
      const double v = gain * protos[c][k] + 0.15 * rng.normal();
      px[i * side * side + k] = std::clamp(v, 0.0, 1.0);
    }
  }
  return {Tensor({n, 1, side, side}, std::move(px)), std::move(labels)};
}

}  // namespace gbn::data
