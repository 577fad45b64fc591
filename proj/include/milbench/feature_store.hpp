#pragma once

// Cohort manifests, the FMX1 feature-matrix file format and tile-bag
// sampling.
//
// FMX1 layout (little-endian):
//   magic "FMX1" | u32 version=1 | u32 n_tiles | u32 dim | u32 n_real
//   n_tiles x (u32 x, u32 y)
//   n_tiles * dim float32, row-major
// Rows [0, n_real) are real tiles, rows [n_real, n_tiles) are zero padding.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "milbench/error.hpp"
#include "milbench/rng.hpp"
#include "milbench/text_io.hpp"

namespace milbench {

struct TileCoord {
  std::uint32_t x = 0;
  std::uint32_t y = 0;
  friend bool operator==(const TileCoord&, const TileCoord&) = default;
};

/// Per-slide tile embeddings. The validity mask is implicit: the first
/// n_real rows are real, the rest are all-zero padding.
struct FeatureMatrix {
  std::size_t n_tiles = 0;
  std::size_t dim = 0;
  std::size_t n_real = 0;
  std::vector<TileCoord> coords;
  std::vector<float> values;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t tiles, std::size_t d, std::size_t real)
      : n_tiles(tiles), dim(d), n_real(real), coords(tiles), values(tiles * d, 0.0f) {}

  std::span<float> row(std::size_t i) { return {values.data() + i * dim, dim}; }
  std::span<const float> row(std::size_t i) const { return {values.data() + i * dim, dim}; }

  bool is_real(std::size_t i) const { return i < n_real; }

  std::vector<bool> mask() const {
    std::vector<bool> m(n_tiles, false);
    std::fill_n(m.begin(), n_real, true);
    return m;
  }

  /// Throws ValidationError if shape or padding invariants are violated.
  void validate() const {
    if (coords.size() != n_tiles || values.size() != n_tiles * dim)
      throw ValidationError("feature matrix: storage does not match n_tiles x dim");
    if (dim == 0) throw ValidationError("feature matrix: dim must be positive");
    if (n_real == 0) throw ValidationError("feature matrix: slide has no real tiles");
    if (n_real > n_tiles) throw ValidationError("feature matrix: n_real exceeds n_tiles");
    for (std::size_t i = n_real; i < n_tiles; ++i)
      for (float v : row(i))
        if (v != 0.0f) throw ValidationError("feature matrix: padding row " + std::to_string(i) + " is not zero");
  }

  friend bool operator==(const FeatureMatrix& a, const FeatureMatrix& b) {
    if (a.n_tiles != b.n_tiles || a.dim != b.dim || a.n_real != b.n_real || a.coords != b.coords) return false;
    // bitwise, so that NaN payloads and signed zeros also round-trip
    return a.values.size() == b.values.size() &&
           (a.values.empty() ||
            std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0);
  }
};

inline constexpr char kFeatureMagic[4] = {'F', 'M', 'X', '1'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 20;

/// Exact size in bytes of an FMX1 file.
constexpr std::uint64_t feature_file_size(std::uint64_t n_tiles, std::uint64_t dim) {
  return kFeatureHeaderBytes + n_tiles * 8 + n_tiles * dim * 4;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max())
    throw ValidationError(std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

inline std::string read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_binary_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // write to a sibling temp file and rename, so readers never see a partial file
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ValidationError("write failed for '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::string encode_features(const FeatureMatrix& m) {
  m.validate();
  std::string out;
  out.reserve(feature_file_size(m.n_tiles, m.dim));
  out.append(kFeatureMagic, 4);
  detail::put_u32(out, kFeatureVersion);
  detail::put_u32(out, detail::checked_u32(m.n_tiles, "n_tiles"));
  detail::put_u32(out, detail::checked_u32(m.dim, "dim"));
  detail::put_u32(out, detail::checked_u32(m.n_real, "n_real"));
  for (const auto& c : m.coords) {
    detail::put_u32(out, c.x);
    detail::put_u32(out, c.y);
  }
  for (float v : m.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline FeatureMatrix decode_features(std::string_view bytes) {
  if (bytes.size() < kFeatureHeaderBytes) throw FormatError("truncated feature header", bytes.size());
  if (std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) throw FormatError("bad magic, expected FMX1", 0);
  if (const auto version = detail::get_u32(bytes, 4); version != kFeatureVersion)
    throw FormatError("unsupported feature file version " + std::to_string(version), 4);
  const std::uint64_t n_tiles = detail::get_u32(bytes, 8);
  const std::uint64_t dim = detail::get_u32(bytes, 12);
  const std::uint64_t n_real = detail::get_u32(bytes, 16);
  if (dim == 0) throw FormatError("dim must be positive", 12);
  if (n_real == 0) throw FormatError("slide has no real tiles", 16);
  if (n_real > n_tiles) throw FormatError("n_real exceeds n_tiles", 16);
  // n_tiles, dim < 2^32, so n_tiles * dim * 4 < 2^66 can overflow u64
  const unsigned __int128 expected =
      static_cast<unsigned __int128>(kFeatureHeaderBytes) + static_cast<unsigned __int128>(n_tiles) * 8 +
      static_cast<unsigned __int128>(n_tiles) * dim * 4;
  if (expected > std::numeric_limits<std::size_t>::max() / 2)
    throw FormatError("dimensions overflow addressable size", 8);
  if (bytes.size() < expected) throw FormatError("truncated feature payload", bytes.size());
  if (bytes.size() > expected) throw FormatError("trailing bytes after feature payload", static_cast<std::size_t>(expected));

  FeatureMatrix m(n_tiles, dim, n_real);
  std::size_t off = kFeatureHeaderBytes;
  for (auto& c : m.coords) {
    c.x = detail::get_u32(bytes, off);
    c.y = detail::get_u32(bytes, off + 4);
    off += 8;
  }
  const std::size_t payload = off;
  for (std::size_t i = 0; i < m.values.size(); ++i, off += 4)
    m.values[i] = std::bit_cast<float>(detail::get_u32(bytes, off));
  for (std::size_t i = n_real; i < n_tiles; ++i)
    for (float v : m.row(i))
      if (v != 0.0f) throw FormatError("padding row " + std::to_string(i) + " is not zero", payload + i * dim * 4);
  return m;
}

inline void write_features(const FeatureMatrix& m, const std::filesystem::path& path) {
  detail::write_binary_file(path, encode_features(m));
}

inline FeatureMatrix read_features(const std::filesystem::path& path) {
  try {
    return decode_features(detail::read_binary_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

/// Draws n_t rows: a uniform sample without replacement of the real tiles
/// when there are enough of them, otherwise every real tile followed by zero
/// padding. The draw depends only on (slide_id, seed, n_real, n_t), so every
/// feature extractor sees the same tiles for a slide. Selected rows keep
/// their original relative order.
inline FeatureMatrix sample_bag(const FeatureMatrix& m, std::string_view slide_id, std::size_t n_t,
                                std::uint64_t seed) {
  if (m.n_real == 0) throw ValidationError("slide '" + std::string(slide_id) + "' has no real tiles");
  if (n_t == 0) throw ValidationError("n_t must be positive");
  FeatureMatrix out(n_t, m.dim, std::min(n_t, m.n_real));
  std::vector<std::size_t> picked;
  if (m.n_real <= n_t) {
    picked.resize(m.n_real);
    for (std::size_t i = 0; i < m.n_real; ++i) picked[i] = i;
  } else {
    rng::Stream stream(rng::hash_string(slide_id) ^ seed);
    std::vector<std::size_t> idx(m.n_real);
    for (std::size_t i = 0; i < m.n_real; ++i) idx[i] = i;
    // partial Fisher-Yates: the first n_t slots become the sample
    for (std::size_t i = 0; i < n_t; ++i) {
      const auto j = i + static_cast<std::size_t>(stream.below(m.n_real - i));
      std::swap(idx[i], idx[j]);
    }
    picked.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_t));
    std::sort(picked.begin(), picked.end());
  }
  for (std::size_t r = 0; r < picked.size(); ++r) {
    out.coords[r] = m.coords[picked[r]];
    const auto src = m.row(picked[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

enum class LossKind { binary_ce, multi_ce };

inline std::string to_string(LossKind k) { return k == LossKind::binary_ce ? "binary-ce" : "multi-ce"; }

/// Per-task settings: class count, bag size and target resolution.
struct TaskSpec {
  std::string task_id = "task";
  std::size_t class_count = 2;
  std::size_t n_t = 5000;
  double mpp = 0.5;
  LossKind loss = LossKind::binary_ce;
  std::vector<std::string> label_names;

  /// Width of the classifier head: 1 logit for binary tasks, C otherwise.
  std::size_t output_dim() const { return loss == LossKind::binary_ce ? 1 : class_count; }

  void validate() const {
    if (task_id.empty()) throw ValidationError("task_id must be non-empty");
    if (class_count < 2) throw ValidationError("class_count must be >= 2");
    if (n_t < 1) throw ValidationError("n_t must be >= 1");
    if (!(mpp > 0.0)) throw ValidationError("mpp must be positive");
    if (class_count == 2 && loss != LossKind::binary_ce)
      throw ValidationError("two-class tasks must use binary-ce");
    if (class_count > 2 && loss != LossKind::multi_ce)
      throw ValidationError("tasks with more than two classes must use multi-ce");
    if (!label_names.empty() && label_names.size() != class_count)
      throw ValidationError("labels list must name exactly class_count classes");
  }
};

inline TaskSpec parse_task_spec(const KeyValueConfig& cfg) {
  TaskSpec t;
  t.task_id = cfg.get("task_id");
  t.class_count = cfg.number_or<std::size_t>("class_count", 2);
  t.n_t = cfg.number_or<std::size_t>("n_t", 5000);
  t.mpp = cfg.number_or<double>("mpp", 0.5);
  const auto loss = cfg.get_or("loss", t.class_count == 2 ? "binary-ce" : "multi-ce");
  if (loss == "binary-ce")
    t.loss = LossKind::binary_ce;
  else if (loss == "multi-ce")
    t.loss = LossKind::multi_ce;
  else
    throw ValidationError(cfg.origin() + ": unknown loss '" + loss + "'");
  if (cfg.has("labels")) t.label_names = split(cfg.get("labels"), ',');
  t.validate();
  return t;
}

inline TaskSpec load_task_spec(const std::filesystem::path& path) {
  return parse_task_spec(KeyValueConfig::load(path));
}

inline std::string format_task_spec(const TaskSpec& t) {
  std::string s;
  s += "task_id = " + t.task_id + "\n";
  s += "class_count = " + std::to_string(t.class_count) + "\n";
  s += "n_t = " + std::to_string(t.n_t) + "\n";
  s += "mpp = " + format_double(t.mpp) + "\n";
  s += "loss = " + to_string(t.loss) + "\n";
  if (!t.label_names.empty()) {
    s += "labels = ";
    for (std::size_t i = 0; i < t.label_names.size(); ++i) s += (i ? "," : "") + t.label_names[i];
    s += "\n";
  }
  return s;
}

/// Metadata of a tile encoder. Concatenated class/patch token extractors
/// declare twice the backbone width (e.g. 2560 for ViT-H).
struct ExtractorDescriptor {
  std::string name;
  std::size_t dim = 0;
  std::string notes;

  void validate() const {
    if (dim == 0) throw ValidationError("extractor '" + name + "' must declare dim > 0");
  }
};

struct SlideManifestEntry {
  std::string slide_id;
  std::string case_id;
  int label = 0;
  std::string feature_path;
  friend bool operator==(const SlideManifestEntry&, const SlideManifestEntry&) = default;
};

inline std::vector<SlideManifestEntry> parse_manifest(const CsvTable& table, const TaskSpec& spec) {
  const auto c_slide = table.column("slide_id");
  const auto c_case = table.column("case_id");
  const auto c_label = table.column("label");
  const auto c_path = table.column("feature_path");
  std::vector<SlideManifestEntry> out;
  std::set<std::string> seen;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const auto where = table.origin + ":" + std::to_string(table.line_numbers[r]);
    SlideManifestEntry e{row[c_slide], row[c_case], 0, row[c_path]};
    if (e.slide_id.empty()) throw ValidationError(where + ": empty slide_id");
    if (e.case_id.empty()) throw ValidationError(where + ": empty case_id");
    long label = -1;
    try {
      label = parse_number<long>(row[c_label], where + ": label");
    } catch (const ValidationError&) {
      throw ValidationError(where + ": label '" + row[c_label] + "' is not an integer");
    }
    if (label < 0 || static_cast<std::size_t>(label) >= spec.class_count)
      throw ValidationError(where + ": label " + std::to_string(label) + " outside [0, " +
                            std::to_string(spec.class_count) + ")");
    e.label = static_cast<int>(label);
    if (!seen.insert(e.slide_id).second)
      throw ValidationError(where + ": duplicate slide_id '" + e.slide_id + "'");
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<SlideManifestEntry> load_manifest(const std::filesystem::path& path, const TaskSpec& spec) {
  return parse_manifest(CsvTable::load(path), spec);
}

inline std::string format_manifest(std::span<const SlideManifestEntry> entries) {
  std::string s = "slide_id,case_id,label,feature_path\n";
  for (const auto& e : entries)
    s += e.slide_id + "," + e.case_id + "," + std::to_string(e.label) + "," + e.feature_path + "\n";
  return s;
}

/// Feature paths in a manifest are relative to the manifest's directory.
inline std::filesystem::path resolve_feature_path(const std::filesystem::path& manifest_path,
                                                  const SlideManifestEntry& e) {
  const std::filesystem::path p(e.feature_path);
  return p.is_absolute() ? p : manifest_path.parent_path() / p;
}

}  // namespace milbench
