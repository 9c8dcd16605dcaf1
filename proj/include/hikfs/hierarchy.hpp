#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hikfs/error.hpp"
#include "hikfs/ndgrad.hpp"

namespace hikfs {

/// Two-level class hierarchy: every fine class has exactly one coarse parent
/// and every coarse class has at least one fine child. Ids are dense.
class ClassHierarchy {
 public:
  ClassHierarchy() = default;

  ClassHierarchy(std::vector<std::size_t> parent, std::size_t num_coarse, std::vector<std::string> fine_names = {},
                 std::vector<std::string> coarse_names = {})
      : parent_(std::move(parent)), children_(num_coarse) {
    if (parent_.empty()) throw DataError("hierarchy: no fine classes");
    for (std::size_t y = 0; y < parent_.size(); ++y) {
      if (parent_[y] >= num_coarse) {
        throw DataError("hierarchy: fine class " + std::to_string(y) + " has parent " + std::to_string(parent_[y]) +
                        " outside [0, " + std::to_string(num_coarse) + ")");
      }
      children_[parent_[y]].push_back(y);
    }
    for (std::size_t z = 0; z < num_coarse; ++z)
      if (children_[z].empty()) throw DataError("hierarchy: coarse class " + std::to_string(z) + " has no children");
    fine_names_ = fine_names.empty() ? default_names("f", parent_.size()) : std::move(fine_names);
    coarse_names_ = coarse_names.empty() ? default_names("c", num_coarse) : std::move(coarse_names);
    if (fine_names_.size() != parent_.size() || coarse_names_.size() != num_coarse) {
      throw DataError("hierarchy: name list sizes do not match class counts");
    }
  }

  static ClassHierarchy from_children(const std::vector<std::vector<std::size_t>>& children) {
    std::size_t num_fine = 0;
    for (const auto& c : children) num_fine += c.size();
    std::vector<std::size_t> parent(num_fine, std::numeric_limits<std::size_t>::max());
    for (std::size_t z = 0; z < children.size(); ++z)
      for (std::size_t y : children[z]) {
        if (y >= num_fine || parent[y] != std::numeric_limits<std::size_t>::max()) {
          throw DataError("hierarchy: children sets must partition [0, " + std::to_string(num_fine) + ")");
        }
        parent[y] = z;
      }
    return ClassHierarchy(std::move(parent), children.size());
  }

  /// Single coarse class covering every fine class.
  static ClassHierarchy flat(std::size_t num_fine) {
    return ClassHierarchy(std::vector<std::size_t>(num_fine, 0), 1);
  }

  std::size_t num_fine() const { return parent_.size(); }
  std::size_t num_coarse() const { return children_.size(); }

  std::size_t coarse_of(std::size_t fine) const {
    if (fine >= parent_.size()) {
      throw DataError("hierarchy: fine class id " + std::to_string(fine) + " out of range [0, " +
                      std::to_string(parent_.size()) + ")");
    }
    return parent_[fine];
  }

  const std::vector<std::size_t>& children(std::size_t coarse) const {
    if (coarse >= children_.size()) throw DataError("hierarchy: coarse class id " + std::to_string(coarse) + " out of range");
    return children_[coarse];
  }

  const std::vector<std::size_t>& parents() const { return parent_; }
  const std::string& fine_name(std::size_t y) const { return fine_names_.at(y); }
  const std::string& coarse_name(std::size_t z) const { return coarse_names_.at(z); }
  const std::vector<std::string>& fine_names() const { return fine_names_; }
  const std::vector<std::string>& coarse_names() const { return coarse_names_; }

  std::optional<std::size_t> fine_id(const std::string& name) const {
    auto it = std::find(fine_names_.begin(), fine_names_.end(), name);
    if (it == fine_names_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - fine_names_.begin());
  }

  /// Same fine classes under a single coarse class (the hierarchy-off ablation).
  ClassHierarchy collapsed() const {
    return ClassHierarchy(std::vector<std::size_t>(parent_.size(), 0), 1, fine_names_, {"all"});
  }

  bool operator==(const ClassHierarchy& other) const {
    return parent_ == other.parent_ && children_.size() == other.children_.size() &&
           fine_names_ == other.fine_names_ && coarse_names_ == other.coarse_names_;
  }

 private:
  static std::vector<std::string> default_names(const char* prefix, std::size_t n) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back(prefix + std::to_string(i));
    return names;
  }

  std::vector<std::size_t> parent_;
  std::vector<std::vector<std::size_t>> children_;
  std::vector<std::string> fine_names_;
  std::vector<std::string> coarse_names_;
};

/// A hierarchy restricted to the fine classes of one task. Local fine id i
/// is global id fine_ids[i]; local coarse ids index the task's coarse
/// ancestors in ascending global order.
struct TaskHierarchy {
  ClassHierarchy local;
  std::vector<std::size_t> fine_ids;
  std::vector<std::size_t> coarse_ids;
};

inline TaskHierarchy restrict_hierarchy(const ClassHierarchy& h, std::span<const std::size_t> fine_classes) {
  if (fine_classes.empty()) throw DataError("hierarchy: cannot restrict to an empty class set");
  std::vector<std::size_t> coarse;
  for (std::size_t y : fine_classes) coarse.push_back(h.coarse_of(y));
  std::sort(coarse.begin(), coarse.end());
  coarse.erase(std::unique(coarse.begin(), coarse.end()), coarse.end());
  std::vector<std::size_t> parent;
  std::vector<std::string> fine_names, coarse_names;
  for (std::size_t y : fine_classes) {
    parent.push_back(static_cast<std::size_t>(std::lower_bound(coarse.begin(), coarse.end(), h.coarse_of(y)) - coarse.begin()));
    fine_names.push_back(h.fine_name(y));
  }
  for (std::size_t z : coarse) coarse_names.push_back(h.coarse_name(z));
  return {ClassHierarchy(std::move(parent), coarse.size(), std::move(fine_names), std::move(coarse_names)),
          std::vector<std::size_t>(fine_classes.begin(), fine_classes.end()), std::move(coarse)};
}

// ---------------------------------------------------------------------------
// Hierarchy file: one `<fine_name>\t<coarse_name>` line per fine class, ids
// assigned in first-appearance order.

inline ClassHierarchy parse_hierarchy_lines(const std::vector<std::string>& lines, std::size_t first_line_no = 1) {
  std::vector<std::string> fine_names, coarse_names;
  std::map<std::string, std::size_t> coarse_ids;
  std::vector<std::size_t> parent;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()) {
      throw DataError("hierarchy: line " + std::to_string(first_line_no + i) + ": expected '<fine>\\t<coarse>'");
    }
    std::string fine = line.substr(0, tab), coarse = line.substr(tab + 1);
    if (std::find(fine_names.begin(), fine_names.end(), fine) != fine_names.end()) {
      throw DataError("hierarchy: line " + std::to_string(first_line_no + i) + ": fine class '" + fine +
                      "' listed twice");
    }
    auto [it, inserted] = coarse_ids.emplace(coarse, coarse_names.size());
    if (inserted) coarse_names.push_back(coarse);
    fine_names.push_back(std::move(fine));
    parent.push_back(it->second);
  }
  if (parent.empty()) throw DataError("hierarchy: empty hierarchy");
  const std::size_t nc = coarse_names.size();
  return ClassHierarchy(std::move(parent), nc, std::move(fine_names), std::move(coarse_names));
}

inline ClassHierarchy read_hierarchy(std::istream& is) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return parse_hierarchy_lines(lines);
}

inline ClassHierarchy load_hierarchy(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("hierarchy: cannot open " + path.string());
  return read_hierarchy(is);
}

inline void write_hierarchy(std::ostream& os, const ClassHierarchy& h) {
  for (std::size_t y = 0; y < h.num_fine(); ++y) os << h.fine_name(y) << '\t' << h.coarse_name(h.coarse_of(y)) << '\n';
}

// ---------------------------------------------------------------------------
// Probability factorization. Fine logits `a` have one entry per fine class,
// coarse logits `b` one per coarse class.

namespace detail {

inline void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite logit");
}

inline double log_sum_exp(std::span<const double> v, const std::vector<std::size_t>* subset = nullptr) {
  double mx = -std::numeric_limits<double>::infinity();
  auto visit = [&](auto&& fn) {
    if (subset)
      for (std::size_t i : *subset) fn(v[i]);
    else
      for (double x : v) fn(x);
  };
  visit([&](double x) { mx = std::max(mx, x); });
  double s = 0.0;
  visit([&](double x) { s += std::exp(x - mx); });
  return mx + std::log(s);
}

inline void check_sizes(std::span<const double> a, std::span<const double> b, const ClassHierarchy& h) {
  if (a.size() != h.num_fine() || b.size() != h.num_coarse()) {
    throw ShapeError("hierarchy: logits sizes (" + std::to_string(a.size()) + ", " + std::to_string(b.size()) +
                     ") do not match hierarchy (" + std::to_string(h.num_fine()) + ", " +
                     std::to_string(h.num_coarse()) + ")");
  }
}

}  // namespace detail

/// Pr(y | z, x): softmax of `a` over the children of z; zero elsewhere.
inline std::vector<double> conditional_fine_probs(std::span<const double> a, std::size_t z, const ClassHierarchy& h) {
  if (a.size() != h.num_fine()) throw ShapeError("conditional_fine_probs: logits do not match hierarchy");
  detail::require_finite(a, "conditional_fine_probs");
  const auto& kids = h.children(z);
  const double lse = detail::log_sum_exp(a, &kids);
  std::vector<double> p(a.size(), 0.0);
  for (std::size_t y : kids) p[y] = std::exp(a[y] - lse);
  return p;
}

/// Pr(z | x): softmax over all coarse logits.
inline std::vector<double> coarse_probs(std::span<const double> b) {
  if (b.empty()) throw ShapeError("coarse_probs: empty logits");
  detail::require_finite(b, "coarse_probs");
  const double lse = detail::log_sum_exp(b);
  std::vector<double> p(b.size());
  for (std::size_t z = 0; z < b.size(); ++z) p[z] = std::exp(b[z] - lse);
  return p;
}

/// log Pr(y | x) for every fine class; cross terms vanish because the
/// conditional is zero outside each parent's children.
inline std::vector<double> marginal_fine_log_probs(std::span<const double> a, std::span<const double> b,
                                                   const ClassHierarchy& h) {
  detail::check_sizes(a, b, h);
  detail::require_finite(a, "marginal_fine_probs");
  detail::require_finite(b, "marginal_fine_probs");
  const double coarse_lse = detail::log_sum_exp(b);
  std::vector<double> fine_lse(h.num_coarse());
  for (std::size_t z = 0; z < h.num_coarse(); ++z) fine_lse[z] = detail::log_sum_exp(a, &h.children(z));
  std::vector<double> out(h.num_fine());
  for (std::size_t y = 0; y < h.num_fine(); ++y) {
    const std::size_t z = h.coarse_of(y);
    out[y] = (a[y] - fine_lse[z]) + (b[z] - coarse_lse);
  }
  return out;
}

/// Pr(y | x) = sum_z Pr(y | z, x) Pr(z | x).
inline std::vector<double> marginal_fine_probs(std::span<const double> a, std::span<const double> b,
                                               const ClassHierarchy& h) {
  detail::check_sizes(a, b, h);
  const auto pc = coarse_probs(b);
  std::vector<double> out(h.num_fine(), 0.0);
  for (std::size_t z = 0; z < h.num_coarse(); ++z) {
    const auto pf = conditional_fine_probs(a, z, h);
    for (std::size_t y : h.children(z)) out[y] += pf[y] * pc[z];
  }
  return out;
}

/// -log Pr(y | z_y, x) - log Pr(z_y | x) with z_y the true parent of y.
inline double hierarchical_nll(std::span<const double> a, std::span<const double> b, std::size_t y,
                               const ClassHierarchy& h) {
  detail::check_sizes(a, b, h);
  const std::size_t z = h.coarse_of(y);
  detail::require_finite(a, "hierarchical_nll");
  detail::require_finite(b, "hierarchical_nll");
  return -(a[y] - detail::log_sum_exp(a, &h.children(z))) - (b[z] - detail::log_sum_exp(b));
}

/// Keep-mask selecting, for each target, the siblings under its parent.
inline nd::Mask sibling_mask(const ClassHierarchy& h, const std::vector<std::size_t>& targets) {
  nd::Mask mask(targets.size() * h.num_fine(), 0);
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::size_t y : h.children(h.coarse_of(targets[i]))) mask[i * h.num_fine() + y] = 1;
  return mask;
}

/// Differentiable batch form: mean over rows of the two-term hierarchical
/// NLL. `fine_logits` is [n, |Y|], `coarse_logits` is [n, |Z|].
inline nd::Tensor hierarchical_nll(const nd::Tensor& fine_logits, const nd::Tensor& coarse_logits,
                                   const std::vector<std::size_t>& targets, const ClassHierarchy& h) {
  if (fine_logits.rank() != 2 || fine_logits.dim(1) != h.num_fine() || coarse_logits.rank() != 2 ||
      coarse_logits.dim(1) != h.num_coarse() || fine_logits.dim(0) != coarse_logits.dim(0)) {
    throw ShapeError("hierarchical_nll: logits " + nd::shape_str(fine_logits.shape()) + " and " +
                     nd::shape_str(coarse_logits.shape()) + " do not match hierarchy");
  }
  std::vector<std::size_t> parents;
  for (std::size_t y : targets) parents.push_back(h.coarse_of(y));
  auto fine_lp = nd::gather(nd::masked_log_softmax(fine_logits, sibling_mask(h, targets)), targets);
  auto coarse_lp = nd::gather(nd::log_softmax(coarse_logits), parents);
  return nd::neg(nd::mean(nd::add(fine_lp, coarse_lp)));
}

}  // namespace hikfs
