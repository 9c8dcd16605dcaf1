#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hikfs/error.hpp"
#include "hikfs/hierarchy.hpp"
#include "hikfs/ndgrad.hpp"
#include "hikfs/random.hpp"

namespace hikfs {

enum class SplitTag { unsplit, train, val, test };

inline std::string_view to_string(SplitTag t) {
  switch (t) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
    default: return "unsplit";
  }
}

inline SplitTag parse_split_tag(std::string_view s) {
  if (s == "train") return SplitTag::train;
  if (s == "val") return SplitTag::val;
  if (s == "test") return SplitTag::test;
  if (s == "unsplit") return SplitTag::unsplit;
  throw DataError("unknown split tag '" + std::string(s) + "'");
}

inline constexpr std::size_t kImageSide = 28;

struct Item {
  std::vector<double> x;
  std::size_t fine = 0;
  std::size_t coarse = 0;

  bool operator==(const Item&) const = default;
};

/// Labelled samples plus the class hierarchy their labels refer to. Split
/// datasets keep the full hierarchy so class ids agree across splits.
struct Dataset {
  ClassHierarchy hierarchy;
  std::vector<Item> items;
  SplitTag split = SplitTag::unsplit;
  std::string provenance;
  std::size_t dim = 0;
  bool image = false;  // 28x28 grayscale raster, pixel values 0..255

  bool operator==(const Dataset&) const = default;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }

  void validate() const {
    if (image && dim != kImageSide * kImageSide) throw DataError("dataset: image datasets must have 784 values per item");
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& it = items[i];
      if (it.x.size() != dim) {
        throw DataError("dataset: item " + std::to_string(i) + " has " + std::to_string(it.x.size()) +
                        " values, expected " + std::to_string(dim));
      }
      if (it.fine >= hierarchy.num_fine()) throw DataError("dataset: item " + std::to_string(i) + " has unknown fine class");
      if (hierarchy.coarse_of(it.fine) != it.coarse) {
        throw DataError("dataset: item " + std::to_string(i) + " has coarse label '" +
                        hierarchy.coarse_name(it.coarse) + "' but fine class '" + hierarchy.fine_name(it.fine) +
                        "' belongs to '" + hierarchy.coarse_name(hierarchy.coarse_of(it.fine)) + "'");
      }
    }
  }

  /// Fine classes with at least one item, ascending.
  std::vector<std::size_t> fine_classes() const {
    std::set<std::size_t> s;
    for (const auto& it : items) s.insert(it.fine);
    return {s.begin(), s.end()};
  }

  /// Item indices per fine class id (indexed by global fine id).
  std::vector<std::vector<std::size_t>> indices_by_fine() const {
    std::vector<std::vector<std::size_t>> out(hierarchy.num_fine());
    for (std::size_t i = 0; i < items.size(); ++i) out[items[i].fine].push_back(i);
    return out;
  }

  /// Model input rows [n, dim]; raster pixels are scaled to [0, 1].
  nd::Tensor batch(std::span<const std::size_t> idx) const {
    std::vector<double> values;
    values.reserve(idx.size() * dim);
    const double s = image ? 1.0 / 255.0 : 1.0;
    for (std::size_t i : idx) {
      const auto& x = items.at(i).x;
      for (double v : x) values.push_back(v * s);
    }
    return nd::Tensor({idx.size(), dim}, std::move(values));
  }

  std::vector<std::size_t> fine_labels(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out;
    for (std::size_t i : idx) out.push_back(items.at(i).fine);
    return out;
  }

  /// Same items relabelled under a single coarse class.
  Dataset collapsed() const {
    Dataset d = *this;
    d.hierarchy = hierarchy.collapsed();
    for (auto& it : d.items) it.coarse = 0;
    return d;
  }
};

// ---------------------------------------------------------------------------
// Text format:
//   hikfs-data v1
//   dims=<d> | image=28x28
//   split=<tag>
//   provenance=<free text>
//   hierarchy=<count>
//   <fine>\t<coarse>            (count lines)
//   items=<count>
//   <fine>,<coarse>,<v1>,...,<vd>

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, std::size_t line_no) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataError("dataset: line " + std::to_string(line_no) + ": cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

inline std::size_t parse_count(std::string_view s, std::size_t line_no) {
  std::size_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataError("dataset: line " + std::to_string(line_no) + ": cannot parse count '" + std::string(s) + "'");
  }
  return v;
}

inline std::string_view expect_key(std::string_view line, std::string_view key, std::size_t line_no) {
  if (line.substr(0, key.size()) != key || line.size() <= key.size() || line[key.size()] != '=') {
    throw DataError("dataset: line " + std::to_string(line_no) + ": expected '" + std::string(key) + "=...'");
  }
  return line.substr(key.size() + 1);
}

}  // namespace detail

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  os << "hikfs-data v1\n";
  if (ds.image) os << "image=28x28\n";
  else os << "dims=" << ds.dim << '\n';
  os << "split=" << to_string(ds.split) << '\n';
  os << "provenance=" << ds.provenance << '\n';
  os << "hierarchy=" << ds.hierarchy.num_fine() << '\n';
  write_hierarchy(os, ds.hierarchy);
  os << "items=" << ds.items.size() << '\n';
  std::string line;
  for (const auto& it : ds.items) {
    line = ds.hierarchy.fine_name(it.fine);
    line += ',';
    line += ds.hierarchy.coarse_name(it.coarse);
    for (double v : it.x) {
      line += ',';
      line += detail::format_double(v);
    }
    line += '\n';
    os << line;
  }
}

inline Dataset read_dataset(std::istream& is) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw DataError("dataset: empty dataset (file has no content)");
  if (lines[0] != "hikfs-data v1") throw DataError("dataset: line 1: malformed header, expected 'hikfs-data v1'");
  if (lines.size() < 6) throw DataError("dataset: truncated header");

  Dataset ds;
  if (lines[1] == "image=28x28") {
    ds.image = true;
    ds.dim = kImageSide * kImageSide;
  } else {
    ds.dim = detail::parse_count(detail::expect_key(lines[1], "dims", 2), 2);
    if (ds.dim == 0) throw DataError("dataset: line 2: dims must be positive");
  }
  ds.split = parse_split_tag(detail::expect_key(lines[2], "split", 3));
  if (lines[3].rfind("provenance=", 0) != 0) throw DataError("dataset: line 4: expected 'provenance=...'");
  ds.provenance = lines[3].substr(11);
  const std::size_t n_classes = detail::parse_count(detail::expect_key(lines[4], "hierarchy", 5), 5);
  if (lines.size() < 5 + n_classes) throw DataError("dataset: hierarchy block is truncated");
  ds.hierarchy = parse_hierarchy_lines({lines.begin() + 5, lines.begin() + 5 + static_cast<std::ptrdiff_t>(n_classes)}, 6);
  std::size_t pos = 5 + n_classes;
  if (pos >= lines.size()) throw DataError("dataset: empty dataset (no items block)");
  const std::size_t n_items = detail::parse_count(detail::expect_key(lines[pos], "items", pos + 1), pos + 1);
  if (n_items == 0) throw DataError("dataset: empty dataset");
  if (lines.size() != pos + 1 + n_items) {
    throw DataError("dataset: items block declares " + std::to_string(n_items) + " items but file has " +
                    std::to_string(lines.size() - pos - 1));
  }

  std::map<std::string, std::size_t> coarse_ids;
  for (std::size_t z = 0; z < ds.hierarchy.num_coarse(); ++z) coarse_ids[ds.hierarchy.coarse_name(z)] = z;
  ds.items.reserve(n_items);
  for (std::size_t i = pos + 1; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    std::string_view rest = lines[i];
    auto next_field = [&]() {
      const auto comma = rest.find(',');
      std::string_view field = rest.substr(0, comma);
      rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
      return field;
    };
    const std::string fine_name(next_field());
    const std::string coarse_name(next_field());
    const auto fine = ds.hierarchy.fine_id(fine_name);
    if (!fine) throw DataError("dataset: line " + std::to_string(line_no) + ": unknown fine class '" + fine_name + "'");
    const auto cit = coarse_ids.find(coarse_name);
    if (cit == coarse_ids.end()) {
      throw DataError("dataset: line " + std::to_string(line_no) + ": unknown coarse class '" + coarse_name + "'");
    }
    if (ds.hierarchy.coarse_of(*fine) != cit->second) {
      throw DataError("dataset: line " + std::to_string(line_no) + ": coarse label '" + coarse_name +
                      "' disagrees with the parent '" + ds.hierarchy.coarse_name(ds.hierarchy.coarse_of(*fine)) +
                      "' of fine class '" + fine_name + "'");
    }
    Item item{{}, *fine, cit->second};
    item.x.reserve(ds.dim);
    while (!rest.empty()) item.x.push_back(detail::parse_double(next_field(), line_no));
    if (item.x.size() != ds.dim) {
      throw DataError("dataset: line " + std::to_string(line_no) + ": expected " + std::to_string(ds.dim) +
                      " values, found " + std::to_string(item.x.size()));
    }
    ds.items.push_back(std::move(item));
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError("dataset: cannot open " + path.string() + " for writing");
  write_dataset(os, ds);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("dataset: cannot open " + path.string());
  return read_dataset(is);
}

// ---------------------------------------------------------------------------
// Synthetic hierarchical Gaussian data.

struct GenSpec {
  std::size_t num_coarse = 4;
  std::size_t fine_per_coarse = 3;
  std::size_t dim = 16;
  std::size_t per_class = 40;
  double coarse_sep = 10.0;
  double fine_sep = 1.0;
  double noise = 0.2;
  std::size_t jitter = 0;  // per-class count varies uniformly in [-jitter, +jitter]
  bool image = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_coarse == 0 || fine_per_coarse == 0) throw ConfigError("gen: class counts must be positive");
    if (dim == 0) throw ConfigError("gen: dim must be positive");
    if (per_class < 2) throw ConfigError("gen: per_class must be at least 2");
    if (!(fine_sep > 0.0) || !(coarse_sep > fine_sep)) throw ConfigError("gen: need coarse_sep > fine_sep > 0");
    if (!(noise >= 0.0)) throw ConfigError("gen: noise must be non-negative");
  }
};

/// Coarse centers lie on a sphere of radius coarse_sep, fine centers at
/// distance fine_sep from their coarse center, samples add isotropic
/// Gaussian noise. Image mode renders the same construction (784 latent
/// dims) into 0..255 pixels.
inline Dataset gen_synthetic(const GenSpec& spec) {
  spec.validate();
  const std::size_t d = spec.image ? kImageSide * kImageSide : spec.dim;
  Rng rng = make_rng(spec.seed, "data");
  std::normal_distribution<double> normal(0.0, 1.0);
  auto direction = [&]() {
    std::vector<double> v(d);
    double norm = 0.0;
    while (norm == 0.0) {
      norm = 0.0;
      for (double& x : v) {
        x = normal(rng);
        norm += x * x;
      }
      norm = std::sqrt(norm);
    }
    for (double& x : v) x /= norm;
    return v;
  };

  std::vector<std::size_t> parent;
  std::vector<std::string> fine_names, coarse_names;
  for (std::size_t z = 0; z < spec.num_coarse; ++z) {
    coarse_names.push_back("c" + std::to_string(z));
    for (std::size_t k = 0; k < spec.fine_per_coarse; ++k) {
      parent.push_back(z);
      fine_names.push_back("c" + std::to_string(z) + "f" + std::to_string(k));
    }
  }

  Dataset ds;
  ds.hierarchy = ClassHierarchy(parent, spec.num_coarse, fine_names, coarse_names);
  ds.dim = d;
  ds.image = spec.image;
  std::ostringstream prov;
  prov << "synthetic coarse=" << spec.num_coarse << " fine_per_coarse=" << spec.fine_per_coarse << " dim=" << d
       << " per_class=" << spec.per_class << " coarse_sep=" << spec.coarse_sep << " fine_sep=" << spec.fine_sep
       << " noise=" << spec.noise << " jitter=" << spec.jitter << " seed=" << spec.seed;
  ds.provenance = prov.str();

  std::vector<std::vector<double>> centers;
  for (std::size_t z = 0; z < spec.num_coarse; ++z) {
    auto c = direction();
    for (double& x : c) x *= spec.coarse_sep;
    for (std::size_t k = 0; k < spec.fine_per_coarse; ++k) {
      auto off = direction();
      std::vector<double> f(d);
      for (std::size_t i = 0; i < d; ++i) f[i] = c[i] + spec.fine_sep * off[i];
      centers.push_back(std::move(f));
    }
  }

  const double pixel_gain = 1120.0 / spec.coarse_sep;
  for (std::size_t y = 0; y < centers.size(); ++y) {
    std::size_t count = spec.per_class;
    if (spec.jitter > 0) {
      std::uniform_int_distribution<long long> jd(-static_cast<long long>(spec.jitter), static_cast<long long>(spec.jitter));
      count = static_cast<std::size_t>(std::max<long long>(2, static_cast<long long>(spec.per_class) + jd(rng)));
    }
    for (std::size_t s = 0; s < count; ++s) {
      Item item{std::vector<double>(d), y, parent[y]};
      for (std::size_t i = 0; i < d; ++i) {
        const double v = centers[y][i] + (spec.noise > 0.0 ? spec.noise * normal(rng) : 0.0);
        item.x[i] = spec.image ? std::clamp(std::round(128.0 + pixel_gain * v), 0.0, 255.0) : v;
      }
      ds.items.push_back(std::move(item));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits.

enum class SplitMode { supervised, meta };

struct SplitSpec {
  SplitMode mode = SplitMode::meta;
  std::array<double, 3> fractions{0.6, 0.2, 0.2};  // train, val, test
  std::uint64_t seed = 0;
};

struct SplitResult {
  Dataset train;
  Dataset val;
  Dataset test;
  std::string manifest;
};

namespace detail {

inline std::array<std::size_t, 3> split_counts(std::size_t n, const std::array<double, 3>& f) {
  const auto tr = std::min(n, static_cast<std::size_t>(std::llround(f[0] * static_cast<double>(n))));
  const auto va = std::min(n - tr, static_cast<std::size_t>(std::llround(f[1] * static_cast<double>(n))));
  return {tr, va, n - tr - va};
}

inline Dataset subset(const Dataset& ds, const std::vector<SplitTag>& tags, SplitTag which, const std::string& note) {
  Dataset out;
  out.hierarchy = ds.hierarchy;
  out.dim = ds.dim;
  out.image = ds.image;
  out.split = which;
  out.provenance = ds.provenance.empty() ? note : ds.provenance + "; " + note;
  for (std::size_t i = 0; i < ds.items.size(); ++i)
    if (tags[i] == which) out.items.push_back(ds.items[i]);
  return out;
}

}  // namespace detail

/// Meta mode partitions fine classes so that every coarse class present has
/// at least one fine class in train (test classes are new, their coarse
/// classes are not). Supervised mode splits each fine class's samples.
inline SplitResult mcfs_split(const Dataset& ds, const SplitSpec& spec) {
  const auto& f = spec.fractions;
  for (double v : f)
    if (!(v >= 0.0)) throw ConfigError("split: fractions must be non-negative");
  if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");
  if (ds.empty()) throw DataError("split: empty dataset");
  if (ds.split != SplitTag::unsplit) throw DataError("split: dataset is already a '" + std::string(to_string(ds.split)) + "' split");

  Rng rng = make_rng(spec.seed, "split");
  const std::array<SplitTag, 3> order{SplitTag::train, SplitTag::val, SplitTag::test};
  std::vector<SplitTag> item_tags(ds.items.size());
  std::ostringstream manifest;
  manifest << "seed=" << spec.seed << "\nmode=" << (spec.mode == SplitMode::meta ? "meta" : "supervised") << '\n';
  const auto by_fine = ds.indices_by_fine();
  const auto classes = ds.fine_classes();

  if (spec.mode == SplitMode::meta) {
    std::map<std::size_t, std::vector<std::size_t>> present_children;
    for (std::size_t y : classes) present_children[ds.hierarchy.coarse_of(y)].push_back(y);
    const auto counts = detail::split_counts(classes.size(), f);
    if (counts[0] < present_children.size()) {
      throw DataError("split: infeasible meta split: every coarse class must keep at least one fine class in train, "
                      "but train receives " + std::to_string(counts[0]) + " fine classes for " +
                      std::to_string(present_children.size()) + " coarse classes");
    }
    std::map<std::size_t, SplitTag> class_tag;
    std::vector<std::size_t> rest;
    for (auto& [z, kids] : present_children) {
      partial_shuffle(kids, kids.size(), rng);
      class_tag[kids[0]] = SplitTag::train;
      rest.insert(rest.end(), kids.begin() + 1, kids.end());
    }
    std::sort(rest.begin(), rest.end());
    partial_shuffle(rest, rest.size(), rng);
    std::size_t pos = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      const std::size_t already = s == 0 ? present_children.size() : 0;
      for (std::size_t c = already; c < counts[s]; ++c) class_tag[rest[pos++]] = order[s];
    }
    for (std::size_t y : classes) {
      manifest << ds.hierarchy.fine_name(y) << '\t' << to_string(class_tag[y]) << '\n';
      for (std::size_t i : by_fine[y]) item_tags[i] = class_tag[y];
    }
  } else {
    for (std::size_t y : classes) {
      auto idx = by_fine[y];
      partial_shuffle(idx, idx.size(), rng);
      const auto counts = detail::split_counts(idx.size(), f);
      std::size_t pos = 0;
      for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t c = 0; c < counts[s]; ++c) item_tags[idx[pos++]] = order[s];
      manifest << ds.hierarchy.fine_name(y) << "\ttrain=" << counts[0] << ",val=" << counts[1] << ",test=" << counts[2]
               << '\n';
    }
  }

  const std::string note = std::string("split mode=") + (spec.mode == SplitMode::meta ? "meta" : "supervised") +
                           " seed=" + std::to_string(spec.seed);
  return {detail::subset(ds, item_tags, SplitTag::train, note), detail::subset(ds, item_tags, SplitTag::val, note),
          detail::subset(ds, item_tags, SplitTag::test, note), manifest.str()};
}

/// Seeded stratified hold-out of `fraction` of every class (the validation
/// set). Returns {kept, held_out}.
inline std::pair<Dataset, Dataset> stratified_holdout(const Dataset& ds, double fraction, std::uint64_t seed) {
  Dataset unsplit = ds;
  unsplit.split = SplitTag::unsplit;
  auto r = mcfs_split(unsplit, {SplitMode::supervised, {1.0 - fraction, fraction, 0.0}, seed});
  r.train.split = ds.split == SplitTag::unsplit ? SplitTag::train : ds.split;
  return {std::move(r.train), std::move(r.val)};
}

}  // namespace hikfs
