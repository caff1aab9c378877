#include "iau/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "iau/tensor_io.hpp"

namespace iau::data {

namespace {

using Color = std::array<float, 3>;
using Signature = std::array<Color, kBands>;

const std::array<Color, 6> kPalette = {{{0.85f, 0.20f, 0.20f},
                                        {0.20f, 0.75f, 0.25f},
                                        {0.20f, 0.30f, 0.85f},
                                        {0.90f, 0.85f, 0.20f},
                                        {0.92f, 0.92f, 0.92f},
                                        {0.12f, 0.12f, 0.12f}}};

bool distinct(const Signature& a, const Signature& b) {
  for (std::size_t k = 0; k < kBands; ++k)
    for (std::size_t c = 0; c < 3; ++c)
      if (std::abs(a[k][c] - b[k][c]) >= 0.2f) return true;
  return false;
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

std::vector<Signature> make_signatures(const GeneratorOptions& o, std::mt19937_64& rng) {
  std::vector<Signature> out;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, kPalette.size() - 1);
  for (std::size_t id = 0; id < o.ids; ++id) {
    Signature sig{};
    bool ok = false;
    for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
      if (!out.empty() && attempt < 50 && u(rng) < o.permuted_share) {
        // Same colors, different arrangement.
        sig = out[std::uniform_int_distribution<std::size_t>(0, out.size() - 1)(rng)];
        std::array<std::size_t, kBands> order{0, 1, 2, 3};
        std::shuffle(order.begin(), order.end(), rng);
        Signature permuted{};
        for (std::size_t k = 0; k < kBands; ++k) permuted[k] = sig[order[k]];
        sig = permuted;
      } else {
        for (auto& c : sig) c = kPalette[pick(rng)];
      }
      ok = std::all_of(out.begin(), out.end(), [&](const Signature& s) { return distinct(s, sig); });
    }
    if (!ok) throw ConfigError("cannot draw " + std::to_string(o.ids) + " distinct identities from the palette");
    out.push_back(sig);
  }
  return out;
}

struct Body {
  double half_width;                 // fraction of W
  std::array<double, kBands + 1> y;  // band boundaries, fractions of H
};

Body make_body(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> j(-0.025, 0.025);
  Body b;
  b.half_width = std::uniform_real_distribution<double>(0.24, 0.34)(rng);
  b.y = {0.04 + j(rng), 0.20 + j(rng), 0.52 + j(rng), 0.86 + j(rng), 0.98};
  return b;
}

Sequence make_sequence(const GeneratorOptions& o, const Signature& sig, const Body& body,
                       std::size_t identity, std::size_t index) {
  auto rng = stream(o.seed, identity + 1, index + 1);
  const std::size_t h = o.height, w = o.width, len = o.frames_per_seq;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(o.noise));

  Sequence seq;
  seq.identity = identity;
  seq.camera = index % o.cameras;
  char path[64];
  std::snprintf(path, sizeof path, "id_%04zu/seq_%02zu", identity, index);
  seq.path = path;

  // Static background with palette-colored clutter.
  std::vector<Color> bg(h * w);
  const float base = static_cast<float>(0.35 + 0.3 * u(rng));
  for (auto& p : bg) p = {base, base, base};
  const int clutter = 2 + static_cast<int>(u(rng) * 3);
  for (int c = 0; c < clutter; ++c) {
    const Color col = kPalette[std::uniform_int_distribution<std::size_t>(0, kPalette.size() - 1)(rng)];
    const std::size_t x0 = static_cast<std::size_t>(u(rng) * w), y0 = static_cast<std::size_t>(u(rng) * h);
    const std::size_t cw = 1 + static_cast<std::size_t>(u(rng) * w / 4), ch = 1 + static_cast<std::size_t>(u(rng) * h / 4);
    for (std::size_t y = y0; y < std::min(h, y0 + ch); ++y)
      for (std::size_t x = x0; x < std::min(w, x0 + cw); ++x) bg[y * w + x] = {0.6f * col[0] + 0.4f * base, 0.6f * col[1] + 0.4f * base, 0.6f * col[2] + 0.4f * base};
  }
  // Camera 1 has a warmer, darker color temperature.
  const Color tint = seq.camera == 1 ? Color{1.10f, 0.97f, 0.80f} : Color{1.0f, 1.0f, 1.0f};

  std::vector<float> frames(len * h * w * 3), masks(len * h * w * kBands, 0.0f);
  const double sx = w / 32.0, sy = h / 64.0;
  for (std::size_t f = 0; f < len; ++f) {
    double dx = std::round((u(rng) * 4 - 2) * sx), dy = std::round((u(rng) * 4 - 2) * sy);
    const float gain = static_cast<float>(0.85 + 0.3 * u(rng));
    double erase_lo = 2.0, erase_hi = -1.0;  // person-relative rows removed by a bad crop
    if (u(rng) < o.misdetect_prob) {
      seq.corrupted.push_back(f);
      if (u(rng) < 0.5) {
        dy += (u(rng) < 0.5 ? -1 : 1) * (0.3 + 0.15 * u(rng)) * h;
      } else if (u(rng) < 0.5) {
        erase_lo = 0.0;
        erase_hi = 0.35 + 0.15 * u(rng);
      } else {
        erase_lo = 1.0 - (0.35 + 0.15 * u(rng));
        erase_hi = 1.0;
      }
    }
    for (std::size_t y = 0; y < h; ++y) {
      const double fy = (y + 0.5 - dy) / h;
      int band = -1;
      for (std::size_t k = 0; k < kBands; ++k)
        if (fy >= body.y[k] && fy < body.y[k + 1]) band = static_cast<int>(k);
      if (fy >= erase_lo && fy < erase_hi) band = -1;
      const double width_scale = band == 0 ? 0.55 : band == 3 ? 0.8 : 1.0;
      for (std::size_t x = 0; x < w; ++x) {
        const double fx = (x + 0.5 - dx) / w - 0.5;
        const bool on_person = band >= 0 && std::abs(fx) < body.half_width * width_scale;
        const Color c = on_person ? sig[band] : bg[y * w + x];
        float* px = frames.data() + ((f * h + y) * w + x) * 3;
        for (std::size_t ch = 0; ch < 3; ++ch)
          px[ch] = std::clamp(c[ch] * tint[ch] * gain + noise(rng), 0.0f, 1.0f);
        if (on_person) masks[((f * h + y) * w + x) * kBands + band] = 1.0f;
      }
    }
  }
  seq.frames = TensorF({len, h, w, 3}, std::move(frames));
  seq.masks = TensorF({len, h, w, kBands}, std::move(masks));
  return seq;
}

}  // namespace

std::vector<std::size_t> Dataset::sequences_of(std::size_t identity) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < sequences.size(); ++i)
    if (sequences[i].identity == identity) out.push_back(i);
  return out;
}

Dataset generate_synthetic(const GeneratorOptions& o) {
  if (o.ids < 1 || o.seqs_per_id < 1 || o.frames_per_seq < 1 || o.height < 8 || o.width < 4 || o.cameras < 1)
    throw ConfigError("generate_synthetic: counts must be positive and images at least 8x4");
  std::mt19937_64 rng = stream(o.seed, 0, 0);
  Dataset ds;
  ds.num_ids = o.ids;
  for (const auto& s : make_signatures(o, rng)) {
    std::array<std::array<float, 3>, kBands> sig;
    for (std::size_t k = 0; k < kBands; ++k) sig[k] = s[k];
    ds.signatures.push_back(sig);
  }
  for (std::size_t id = 0; id < o.ids; ++id) {
    auto body_rng = stream(o.seed, id + 1, 0);
    const Body body = make_body(body_rng);
    for (std::size_t s = 0; s < o.seqs_per_id; ++s)
      ds.sequences.push_back(make_sequence(o, ds.signatures[id], body, id, s));
  }
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot write '" + (dir / "manifest.txt").string() + "'");
  manifest << "# identity camera path corrupted\n";
  for (const auto& s : dataset.sequences) {
    fs::create_directories(dir / s.path, ec);
    if (ec) throw IoError("cannot create '" + (dir / s.path).string() + "': " + ec.message());
    io::save_tensor(dir / s.path / "frames.iaut", s.frames);
    io::save_tensor(dir / s.path / "masks.iaut", s.masks);
    manifest << s.identity << ' ' << s.camera << ' ' << s.path << ' ';
    if (s.corrupted.empty()) manifest << '-';
    for (std::size_t i = 0; i < s.corrupted.size(); ++i) manifest << (i ? "," : "") << s.corrupted[i];
    manifest << '\n';
  }
  if (!manifest) throw IoError("failed writing manifest in '" + dir.string() + "'");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot read '" + (dir / "manifest.txt").string() + "'");
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream in(line);
    Sequence s;
    std::string corrupted;
    if (!(in >> s.identity >> s.camera >> s.path >> corrupted))
      throw FormatError("manifest line " + std::to_string(line_no) + " is malformed");
    if (corrupted != "-") {
      std::istringstream list(corrupted);
      std::string item;
      while (std::getline(list, item, ',')) s.corrupted.push_back(std::stoul(item));
    }
    s.frames = io::load_tensor(dir / s.path / "frames.iaut");
    s.masks = io::load_tensor(dir / s.path / "masks.iaut");
    if (s.frames.rank() != 4 || s.frames.dim(3) != 3 || s.masks.rank() != 4 ||
        s.masks.dim(0) != s.frames.dim(0) || s.masks.dim(1) != s.frames.dim(1) ||
        s.masks.dim(2) != s.frames.dim(2) || s.masks.dim(3) != kBands)
      throw FormatError("sequence '" + s.path + "' has inconsistent frame/mask shapes");
    ds.num_ids = std::max(ds.num_ids, s.identity + 1);
    ds.sequences.push_back(std::move(s));
  }
  if (ds.sequences.empty()) throw FormatError("dataset '" + dir.string() + "' lists no sequences");
  for (const auto& s : ds.sequences)
    if (s.frames.dim(1) != ds.height() || s.frames.dim(2) != ds.width())
      throw FormatError("sequence '" + s.path + "' differs in frame size");
  return ds;
}

Split split_identities(std::size_t num_ids, std::size_t train_ids, std::uint64_t seed) {
  Split s;
  if (train_ids == 0 || train_ids >= num_ids) {
    s.train.resize(num_ids);
    std::iota(s.train.begin(), s.train.end(), 0);
    if (train_ids > num_ids) throw ConfigError("data.train_ids exceeds the dataset's identities");
    return s;
  }
  std::vector<std::size_t> order(num_ids);
  std::iota(order.begin(), order.end(), 0);
  auto rng = stream(seed, 0x5917, 0);
  std::shuffle(order.begin(), order.end(), rng);
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_ids));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(train_ids), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::vector<std::size_t> clip_indices(std::size_t length, std::size_t start, std::size_t frames,
                                      std::size_t stride) {
  std::vector<std::size_t> out(frames);
  for (std::size_t i = 0; i < frames; ++i) out[i] = (start + i * stride) % length;
  return out;
}

Batch gather_clips(const Dataset& dataset, const std::vector<std::size_t>& sequences,
                   const std::vector<std::size_t>& starts, std::size_t frames, std::size_t stride) {
  const std::size_t b = sequences.size(), h = dataset.height(), w = dataset.width();
  const std::size_t frame_px = h * w * 3, mask_px = h * w * kBands;
  std::vector<float> images(b * frames * frame_px), masks(b * frames * mask_px);
  Batch out;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& seq = dataset.sequences.at(sequences[i]);
    const auto idx = clip_indices(seq.frames.dim(0), starts[i], frames, stride);
    for (std::size_t t = 0; t < frames; ++t) {
      auto src = seq.frames.data().subspan(idx[t] * frame_px, frame_px);
      std::copy(src.begin(), src.end(), images.begin() + static_cast<std::ptrdiff_t>((i * frames + t) * frame_px));
      auto msrc = seq.masks.data().subspan(idx[t] * mask_px, mask_px);
      std::copy(msrc.begin(), msrc.end(), masks.begin() + static_cast<std::ptrdiff_t>((i * frames + t) * mask_px));
    }
    out.identities.push_back(seq.identity);
    out.sequences.push_back(sequences[i]);
  }
  out.frames = TensorF({b, frames, h, w, 3}, std::move(images));
  out.masks = TensorF({b * frames, h, w, kBands}, std::move(masks));
  return out;
}

BatchSampler::BatchSampler(const Dataset& dataset, std::vector<std::size_t> identities,
                           BatchSpec spec, std::uint64_t seed)
    : dataset_(dataset), identities_(std::move(identities)), spec_(spec), rng_(stream(seed, 0xba7c, 0)) {
  if (spec_.classes < 1 || spec_.per_class < 1 || spec_.frames < 1 || spec_.stride < 1)
    throw ConfigError("batch spec counts must be positive");
  if (spec_.classes > identities_.size())
    throw ConfigError("batch needs " + std::to_string(spec_.classes) + " identities, only " +
                      std::to_string(identities_.size()) + " available");
  for (auto id : identities_)
    if (dataset_.sequences_of(id).empty()) throw ConfigError("identity " + std::to_string(id) + " has no sequences");
  cycle_ = identities_;
  cursor_ = cycle_.size();
}

Batch BatchSampler::next() {
  if (cursor_ + spec_.classes > cycle_.size()) {
    std::shuffle(cycle_.begin(), cycle_.end(), rng_);
    cursor_ = 0;
  }
  std::vector<std::size_t> seqs, starts, labels;
  for (std::size_t c = 0; c < spec_.classes; ++c) {
    const std::size_t id = cycle_[cursor_++];
    const std::size_t label = static_cast<std::size_t>(
        std::find(identities_.begin(), identities_.end(), id) - identities_.begin());
    auto pool = dataset_.sequences_of(id);
    std::vector<std::size_t> chosen;
    if (pool.size() >= spec_.per_class) {
      std::shuffle(pool.begin(), pool.end(), rng_);
      chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec_.per_class));
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      for (std::size_t k = 0; k < spec_.per_class; ++k) chosen.push_back(pool[pick(rng_)]);
    }
    for (auto s : chosen) {
      seqs.push_back(s);
      starts.push_back(std::uniform_int_distribution<std::size_t>(0, dataset_.length(s) - 1)(rng_));
      labels.push_back(label);
    }
  }
  Batch b = gather_clips(dataset_, seqs, starts, spec_.frames, spec_.stride);
  b.labels = std::move(labels);
  return b;
}

namespace {
// Source-index weights for each output cell of an area-average resize along one axis.
std::vector<std::vector<std::pair<std::size_t, double>>> area_weights(std::size_t src, std::size_t dst) {
  std::vector<std::vector<std::pair<std::size_t, double>>> out(dst);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    const double lo = i * scale, hi = (i + 1) * scale;
    for (auto s = static_cast<std::size_t>(std::floor(lo)); s < src && static_cast<double>(s) < hi; ++s) {
      const double overlap = std::min(hi, s + 1.0) - std::max(lo, static_cast<double>(s));
      if (overlap > 0) out[i].emplace_back(s, overlap / scale);
    }
  }
  return out;
}
}  // namespace

TensorF resize_masks(const TensorF& masks, std::size_t height, std::size_t width) {
  if (masks.rank() != 4) throw DimensionError("resize_masks: expected [L x H x W x N], got " + to_string(masks.shape()));
  const std::size_t l = masks.dim(0), h = masks.dim(1), w = masks.dim(2), n = masks.dim(3);
  if (height < 1 || width < 1 || height > h || width > w)
    throw DimensionError("resize_masks: target " + std::to_string(height) + "x" + std::to_string(width) +
                         " must be within the source " + std::to_string(h) + "x" + std::to_string(w));
  const auto rows = area_weights(h, height), cols = area_weights(w, width);
  std::vector<float> out(l * height * width * n, 0.0f);
  auto src = masks.data();
  for (std::size_t f = 0; f < l; ++f)
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j)
        for (std::size_t c = 0; c < n; ++c) {
          double acc = 0;
          for (auto [y, wy] : rows[i])
            for (auto [x, wx] : cols[j]) acc += wy * wx * src[((f * h + y) * w + x) * n + c];
          out[((f * height + i) * width + j) * n + c] = static_cast<float>(std::clamp(acc, 0.0, 1.0));
        }
  return TensorF({l, height, width, n}, std::move(out));
}

}  // namespace iau::data
