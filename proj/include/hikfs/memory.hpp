#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hikfs/error.hpp"
#include "hikfs/hierarchy.hpp"
#include "hikfs/layers.hpp"
#include "hikfs/ndgrad.hpp"
#include "hikfs/random.hpp"

namespace hikfs {

enum class Metric { dot_cosine, neg_euclidean };
enum class MemoryMode { mem1, mem2, mem3 };

/// Per-class support slots for the attention KNN classifier. Slots live in a
/// [classes * capacity, dim] tensor; slot (j, k) is row j * capacity + k and
/// only the first occupancy(j) slots of a class are live.
///
/// Banks built for a meta-learning task hold slots produced by graph ops so
/// that gradients reach the encoder; banks used in supervised training are
/// plain data mutated in place by the update rules.
class MemoryBank {
 public:
  MemoryBank() = default;

  MemoryBank(std::size_t classes, std::size_t capacity, std::size_t dim, Metric metric, std::size_t k)
      : classes_(classes), capacity_(capacity), dim_(dim), metric_(metric), k_(k),
        slots_(nd::Tensor::zeros({classes * capacity, dim})),
        utility_(classes * capacity, 1.0), occupancy_(classes, 0), cache_(classes) {
    if (classes == 0 || capacity == 0 || dim == 0) throw ConfigError("memory: classes, capacity and dim must be positive");
    if (k == 0) throw ConfigError("memory: K must be at least 1");
  }

  static MemoryBank from_slots(nd::Tensor slots, std::size_t classes, std::size_t capacity,
                               std::vector<std::size_t> occupancy, Metric metric, std::size_t k) {
    if (slots.rank() != 2 || slots.dim(0) != classes * capacity) {
      throw ShapeError("memory: slot tensor " + nd::shape_str(slots.shape()) + " does not hold " +
                       std::to_string(classes) + " x " + std::to_string(capacity) + " slots");
    }
    MemoryBank bank(classes, capacity, slots.dim(1), metric, k);
    bank.slots_ = std::move(slots);
    if (occupancy.size() != classes) throw ShapeError("memory: occupancy list does not match class count");
    for (std::size_t j = 0; j < classes; ++j) bank.set_occupancy(j, occupancy[j]);
    return bank;
  }

  std::size_t classes() const { return classes_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  Metric metric() const { return metric_; }
  std::size_t k() const { return k_; }
  const nd::Tensor& slots() const { return slots_; }

  std::size_t row(std::size_t j, std::size_t k) const {
    check_slot(j, k);
    return j * capacity_ + k;
  }

  std::span<const double> slot(std::size_t j, std::size_t k) const {
    return slots_.data().subspan(row(j, k) * dim_, dim_);
  }

  void write_slot(std::size_t j, std::size_t k, std::span<const double> value) {
    if (slots_.requires_grad()) throw GraphError("memory: cannot write into a bank built from graph tensors");
    if (value.size() != dim_) throw ShapeError("memory: slot value has dim " + std::to_string(value.size()));
    std::copy(value.begin(), value.end(), slots_.mutable_data().begin() + static_cast<std::ptrdiff_t>(row(j, k) * dim_));
  }

  std::size_t occupancy(std::size_t j) const { return occupancy_.at(j); }
  void set_occupancy(std::size_t j, std::size_t n) {
    if (j >= classes_ || n > capacity_) throw ShapeError("memory: occupancy out of range");
    occupancy_[j] = n;
  }

  double utility(std::size_t j, std::size_t k) const { return utility_[row(j, k)]; }
  void set_utility(std::size_t j, std::size_t k, double u) {
    if (!(u > 0.0) || !std::isfinite(u)) throw NumericError("memory: utility rates must be positive and finite");
    utility_[row(j, k)] = u;
  }

  const std::vector<std::vector<double>>& cache(std::size_t j) const { return cache_.at(j); }
  void push_cache(std::size_t j, std::span<const double> f) {
    if (f.size() != dim_) throw ShapeError("memory: cached feature has dim " + std::to_string(f.size()));
    cache_.at(j).emplace_back(f.begin(), f.end());
  }
  void clear_cache(std::size_t j) { cache_.at(j).clear(); }
  std::size_t cached_total() const {
    std::size_t n = 0;
    for (const auto& c : cache_) n += c.size();
    return n;
  }

  /// Copies share the slot tensor; clone() gives an independent bank with
  /// the slots detached from any graph.
  MemoryBank clone() const {
    MemoryBank out = *this;
    out.slots_ = slots_.detach();
    return out;
  }

  /// Bank rows of every live slot, class-major.
  std::vector<std::size_t> live_rows() const {
    std::vector<std::size_t> rows;
    for (std::size_t j = 0; j < classes_; ++j)
      for (std::size_t k = 0; k < occupancy_[j]; ++k) rows.push_back(j * capacity_ + k);
    return rows;
  }

  bool operator==(const MemoryBank& o) const {
    return classes_ == o.classes_ && capacity_ == o.capacity_ && dim_ == o.dim_ && metric_ == o.metric_ &&
           k_ == o.k_ && slots_.values() == o.slots_.values() && utility_ == o.utility_ &&
           occupancy_ == o.occupancy_ && cache_ == o.cache_;
  }

 private:
  void check_slot(std::size_t j, std::size_t k) const {
    if (j >= classes_ || k >= capacity_) {
      throw ShapeError("memory: slot (" + std::to_string(j) + ", " + std::to_string(k) + ") out of range");
    }
  }

  std::size_t classes_ = 0;
  std::size_t capacity_ = 0;
  std::size_t dim_ = 0;
  Metric metric_ = Metric::dot_cosine;
  std::size_t k_ = 1;
  nd::Tensor slots_;
  std::vector<double> utility_;
  std::vector<std::size_t> occupancy_;
  std::vector<std::vector<std::vector<double>>> cache_;
};

/// The learnable maps g (query side) and h (memory side); null means identity.
struct Transforms {
  const AttentionTransform* g = nullptr;
  const AttentionTransform* h = nullptr;
};

inline nd::Tensor apply_transform(const AttentionTransform* t, const nd::Tensor& x) { return t ? t->forward(x) : x; }

/// Similarities between query rows and every live slot.
struct SlotScores {
  nd::Tensor scores;               // [n, live slots]
  std::vector<std::size_t> rows;   // bank row of each column
  std::vector<std::size_t> owner;  // class of each column
};

inline SlotScores score_slots(const nd::Tensor& features, const MemoryBank& bank, Transforms t) {
  if (features.rank() != 2 || features.dim(1) != bank.dim()) {
    throw ShapeError("memory: features " + nd::shape_str(features.shape()) + " do not match slot dim " +
                     std::to_string(bank.dim()));
  }
  SlotScores out;
  out.rows = bank.live_rows();
  for (std::size_t r : out.rows) out.owner.push_back(r / bank.capacity());
  if (out.rows.empty()) throw ShapeError("memory: bank has no live slots");
  const bool all_live = out.rows.size() == bank.slots().dim(0);
  nd::Tensor slots = all_live ? bank.slots() : nd::select_rows(bank.slots(), out.rows);
  auto q = apply_transform(t.g, features);
  auto m = apply_transform(t.h, slots);
  if (bank.metric() == Metric::dot_cosine) {
    out.scores = nd::matmul(nd::l2_normalize(q), nd::transpose(nd::l2_normalize(m)));
  } else {
    out.scores = nd::neg(nd::euclidean_dist(q, m));
  }
  return out;
}

/// Class scores s(f, M_j): sum of the top-K slot similarities of each class.
/// These are the KNN logits; knn_probs is their softmax.
inline nd::Tensor class_scores(const SlotScores& s, const MemoryBank& bank) {
  for (std::size_t j = 0; j < bank.classes(); ++j)
    if (bank.occupancy(j) == 0) throw ShapeError("memory: class " + std::to_string(j) + " has no live slots");
  return nd::group_topk_sum(s.scores, s.owner, bank.classes(), bank.k());
}

inline nd::Tensor knn_logits(const nd::Tensor& features, const MemoryBank& bank, Transforms t) {
  return class_scores(score_slots(features, bank, t), bank);
}

/// Similarity of one feature to one slot vector.
inline double slot_score(std::span<const double> f, std::span<const double> slot, Transforms t, Metric metric) {
  if (f.size() != slot.size()) throw ShapeError("slot_score: feature and slot dims differ");
  nd::NoGradGuard guard;
  auto q = apply_transform(t.g, nd::Tensor::matrix(1, f.size(), {f.begin(), f.end()}));
  auto m = apply_transform(t.h, nd::Tensor::matrix(1, slot.size(), {slot.begin(), slot.end()}));
  if (metric == Metric::dot_cosine) return nd::matmul(nd::l2_normalize(q), nd::transpose(nd::l2_normalize(m))).item();
  return -nd::euclidean_dist(q, m).item();
}

inline double class_score(std::span<const double> f, const MemoryBank& bank, std::size_t j, Transforms t) {
  if (j >= bank.classes()) throw ShapeError("class_score: class id out of range");
  if (bank.occupancy(j) == 0) throw ShapeError("class_score: class " + std::to_string(j) + " has empty memory");
  std::vector<double> scores;
  for (std::size_t k = 0; k < bank.occupancy(j); ++k) scores.push_back(slot_score(f, bank.slot(j, k), t, bank.metric()));
  std::sort(scores.begin(), scores.end(), std::greater<>());
  scores.resize(std::min(bank.k(), scores.size()));
  double s = 0.0;
  for (double v : scores) s += v;
  return s;
}

inline std::vector<double> knn_probs(std::span<const double> f, const MemoryBank& bank, Transforms t) {
  nd::NoGradGuard guard;
  auto logits = knn_logits(nd::Tensor::matrix(1, f.size(), {f.begin(), f.end()}), bank, t);
  auto p = nd::softmax(logits);
  return {p.data().begin(), p.data().end()};
}

/// What the KNN head did for one training sample.
struct SampleOutcome {
  std::size_t predicted = 0;             // argmax class score
  std::size_t nearest_slot = 0;          // top-1 slot of the true class
  std::vector<std::size_t> topk_slots;   // true-class slots in the top-K
};

inline std::vector<SampleOutcome> knn_outcomes(const SlotScores& s, const nd::Tensor& logits, const MemoryBank& bank,
                                               const std::vector<std::size_t>& targets) {
  const std::size_t n = logits.dim(0), C = logits.dim(1), S = s.rows.size();
  std::vector<SampleOutcome> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = logits.data().subspan(i * C, C);
    out[i].predicted = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    auto cols = nd::topk_in_group(s.scores.data().subspan(i * S, S), s.owner, targets[i], bank.k());
    for (std::size_t c : cols) out[i].topk_slots.push_back(s.rows[c] % bank.capacity());
    out[i].nearest_slot = out[i].topk_slots.front();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Supervised life-cycle: merge/cache, utility rates, end-of-epoch refresh.

/// Correct prediction: the true class's nearest slot moves to the convex
/// combination gamma * slot + (1 - gamma) * f. Wrong prediction: memory is
/// untouched and f is cached for the true class.
inline void update_on_sample(MemoryBank& bank, std::span<const double> f, std::size_t y_true, std::size_t y_pred,
                             std::size_t nearest_slot, double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("update_on_sample: gamma must lie in (0, 1)");
  if (y_true >= bank.classes()) throw ShapeError("update_on_sample: class id out of range");
  if (nearest_slot >= bank.occupancy(y_true)) {
    throw ShapeError("update_on_sample: slot " + std::to_string(nearest_slot) + " is not live for class " +
                     std::to_string(y_true));
  }
  if (f.size() != bank.dim()) throw ShapeError("update_on_sample: feature dim mismatch");
  if (y_pred == y_true) {
    auto old = bank.slot(y_true, nearest_slot);
    std::vector<double> merged(bank.dim());
    for (std::size_t i = 0; i < merged.size(); ++i) merged[i] = gamma * old[i] + (1.0 - gamma) * f[i];
    bank.write_slot(y_true, nearest_slot, merged);
  } else {
    bank.push_cache(y_true, f);
  }
}

/// Multiplies the utility of the listed slots of class j by mu (correct) or
/// eta (wrong).
inline void update_utility(MemoryBank& bank, std::size_t j, std::span<const std::size_t> slots, bool correct, double mu,
                           double eta) {
  if (!(mu > 1.0 && mu < 2.0)) throw ConfigError("update_utility: mu must lie in (1, 2)");
  if (!(eta > 0.0 && eta < 1.0)) throw ConfigError("update_utility: eta must lie in (0, 1)");
  if (j >= bank.classes()) throw ShapeError("update_utility: class id out of range");
  for (std::size_t k : slots) {
    if (k >= bank.occupancy(j)) throw ShapeError("update_utility: slot " + std::to_string(k) + " is not live");
    bank.set_utility(j, k, bank.utility(j, k) * (correct ? mu : eta));
  }
}

using Point = std::vector<double>;

inline double squared_distance(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

/// Within-cluster sum of squared distances to the nearest centroid.
inline double clustering_sse(const std::vector<Point>& points, const std::vector<Point>& centroids) {
  double total = 0.0;
  for (const auto& p : points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : centroids) best = std::min(best, squared_distance(p, c));
    total += best;
  }
  return total;
}

struct KMeansOptions {
  std::size_t max_iters = 100;
  std::size_t restarts = 4;  // independent farthest-first starts; lowest SSE wins
};

namespace detail {

inline std::size_t nearest_centroid(const Point& p, const std::vector<Point>& centroids) {
  std::size_t best = 0;
  double best_d = squared_distance(p, centroids[0]);
  for (std::size_t c = 1; c < centroids.size(); ++c) {
    const double d = squared_distance(p, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

/// Single-point moves that lower the SSE (Hartigan's rule), applied after
/// Lloyd converges. Lloyd only reassigns points to the nearest centroid, which
/// leaves local minima that moving one point and updating both means escapes.
inline void hartigan_refine(const std::vector<Point>& points, std::vector<Point>& centroids, std::size_t max_passes) {
  const std::size_t r = centroids.size(), d = points[0].size();
  std::vector<std::size_t> assign(points.size());
  std::vector<double> counts(r, 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    assign[i] = nearest_centroid(points[i], centroids);
    counts[assign[i]] += 1.0;
  }
  auto recompute = [&](std::size_t c) {
    Point mean(d, 0.0);
    for (std::size_t i = 0; i < points.size(); ++i)
      if (assign[i] == c)
        for (std::size_t k = 0; k < d; ++k) mean[k] += points[i][k];
    if (counts[c] > 0)
      for (double& v : mean) v /= counts[c];
    centroids[c] = counts[c] > 0 ? mean : centroids[c];
  };
  for (std::size_t c = 0; c < r; ++c) recompute(c);
  for (std::size_t pass = 0; pass < max_passes; ++pass) {
    bool moved = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const std::size_t a = assign[i];
      if (counts[a] < 2) continue;
      const double leave = counts[a] / (counts[a] - 1.0) * squared_distance(points[i], centroids[a]);
      std::size_t best = a;
      double best_gain = 1e-12 * (1.0 + leave);
      for (std::size_t b = 0; b < r; ++b) {
        if (b == a) continue;
        const double join = counts[b] > 0 ? counts[b] / (counts[b] + 1.0) * squared_distance(points[i], centroids[b]) : 0.0;
        if (leave - join > best_gain) {
          best_gain = leave - join;
          best = b;
        }
      }
      if (best != a) {
        assign[i] = best;
        counts[a] -= 1.0;
        counts[best] += 1.0;
        recompute(a);
        recompute(best);
        moved = true;
      }
    }
    if (!moved) break;
  }
}

inline std::vector<Point> lloyd_from(const std::vector<Point>& points, std::size_t r, std::size_t first,
                                     std::size_t max_iters) {
  // Farthest-first seeding: each new centroid is the point farthest from its
  // nearest chosen centroid (lower index wins ties).
  std::vector<Point> centroids{points[first]};
  std::vector<double> dist(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) dist[i] = squared_distance(points[i], centroids[0]);
  while (centroids.size() < r) {
    const std::size_t far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
    centroids.push_back(points[far]);
    for (std::size_t i = 0; i < points.size(); ++i) dist[i] = std::min(dist[i], squared_distance(points[i], centroids.back()));
  }

  const std::size_t d = points[0].size();
  std::vector<std::size_t> assign(points.size(), std::numeric_limits<std::size_t>::max());
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const std::size_t c = nearest_centroid(points[i], centroids);
      changed = changed || c != assign[i];
      assign[i] = c;
    }
    if (!changed) break;
    std::vector<Point> sums(r, Point(d, 0.0));
    std::vector<std::size_t> counts(r, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      ++counts[assign[i]];
      for (std::size_t k = 0; k < d; ++k) sums[assign[i]][k] += points[i][k];
    }
    for (std::size_t c = 0; c < r; ++c) {
      if (counts[c] == 0) {
        // Re-seed with the point farthest from its current centroid.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
          const double dd = squared_distance(points[i], centroids[assign[i]]);
          if (dd > far_d) {
            far_d = dd;
            far = i;
          }
        }
        centroids[c] = points[far];
        assign[far] = c;
        continue;
      }
      for (std::size_t k = 0; k < d; ++k) centroids[c][k] = sums[c][k] / static_cast<double>(counts[c]);
    }
  }
  hartigan_refine(points, centroids, max_iters);
  return centroids;
}

}  // namespace detail

/// Lloyd's k-means from seeded farthest-first initializations. With at most
/// r points the points themselves are returned.
inline std::vector<Point> kmeans(const std::vector<Point>& points, std::size_t r, std::uint64_t seed,
                                 KMeansOptions opt = {}) {
  if (r == 0) throw ConfigError("kmeans: r must be at least 1");
  if (points.empty()) throw ShapeError("kmeans: no points");
  for (const auto& p : points)
    if (p.size() != points[0].size()) throw ShapeError("kmeans: points have different dimensions");
  if (points.size() <= r) return points;

  // Each restart starts the farthest-first chain from a different point.
  Rng rng(seed);
  std::vector<std::size_t> starts(points.size());
  std::iota(starts.begin(), starts.end(), std::size_t{0});
  const std::size_t attempts = std::min(points.size(), std::max<std::size_t>(1, opt.restarts));
  partial_shuffle(starts, attempts, rng);
  std::vector<Point> best;
  double best_sse = std::numeric_limits<double>::infinity();
  for (std::size_t attempt = 0; attempt < attempts; ++attempt) {
    auto centroids = detail::lloyd_from(points, r, starts[attempt], opt.max_iters);
    const double sse = clustering_sse(points, centroids);
    if (sse < best_sse) {
      best_sse = sse;
      best = std::move(centroids);
    }
  }
  return best;
}

/// Clusters each non-empty cache into at most r centroids and writes them
/// over the lowest-utility slots of that class (free slots are used first),
/// resetting those utilities to 1 and clearing the cache.
inline void end_of_epoch_refresh(MemoryBank& bank, std::size_t r, std::uint64_t seed, KMeansOptions opt = {}) {
  if (r > bank.capacity()) throw ConfigError("refresh: r exceeds the per-class memory size m");
  if (r == 0) throw ConfigError("refresh: r must be at least 1");
  for (std::size_t j = 0; j < bank.classes(); ++j) {
    if (bank.cache(j).empty()) continue;
    const auto centroids = kmeans(bank.cache(j), r, derive_seed(seed, "kmeans", j), opt);
    std::vector<std::size_t> targets;
    for (std::size_t k = bank.occupancy(j); k < bank.capacity() && targets.size() < centroids.size(); ++k)
      targets.push_back(k);
    std::vector<std::size_t> live(bank.occupancy(j));
    std::iota(live.begin(), live.end(), std::size_t{0});
    std::stable_sort(live.begin(), live.end(),
                     [&](std::size_t a, std::size_t b) { return bank.utility(j, a) < bank.utility(j, b); });
    for (std::size_t i = 0; i < live.size() && targets.size() < centroids.size(); ++i) targets.push_back(live[i]);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      bank.write_slot(j, targets[i], centroids[i]);
      bank.set_utility(j, targets[i], 1.0);
      bank.set_occupancy(j, std::max(bank.occupancy(j), targets[i] + 1));
    }
    bank.clear_cache(j);
  }
}

// ---------------------------------------------------------------------------
// Task memories for meta-learning. Slots are graph tensors derived from the
// encoded support set and are never updated.

/// `support` holds encoded support features; rows_per_class[j] lists the rows
/// of class j. Mem1 keeps the class mean, Mem2 every feature, Mem3 the mean
/// followed by every feature.
inline MemoryBank build_meta_memory(const nd::Tensor& support, const std::vector<std::vector<std::size_t>>& rows_per_class,
                                    MemoryMode mode, Metric metric, std::size_t k) {
  if (support.rank() != 2) throw ShapeError("build_meta_memory: support must be a matrix");
  if (rows_per_class.empty()) throw ShapeError("build_meta_memory: no classes");
  std::size_t max_shots = 0;
  for (std::size_t j = 0; j < rows_per_class.size(); ++j) {
    if (rows_per_class[j].empty()) throw DataError("build_meta_memory: class " + std::to_string(j) + " has no support");
    max_shots = std::max(max_shots, rows_per_class[j].size());
  }
  const std::size_t C = rows_per_class.size(), d = support.dim(1), n = support.dim(0);
  const bool with_mean = mode != MemoryMode::mem2;
  const bool with_items = mode != MemoryMode::mem1;
  const std::size_t capacity = (with_mean ? 1 : 0) + (with_items ? max_shots : 0);

  std::vector<nd::Tensor> sources{support};
  if (with_mean) sources.push_back(nd::mean_rows_grouped(support, rows_per_class));
  const std::size_t mean_base = n;
  const std::size_t zero_row = n + (with_mean ? C : 0);
  bool need_zero = false;
  std::vector<std::size_t> plan;
  std::vector<std::size_t> occupancy(C);
  for (std::size_t j = 0; j < C; ++j) {
    std::size_t used = 0;
    if (with_mean) {
      plan.push_back(mean_base + j);
      ++used;
    }
    if (with_items)
      for (std::size_t r : rows_per_class[j]) {
        plan.push_back(r);
        ++used;
      }
    occupancy[j] = used;
    for (; used < capacity; ++used) {
      plan.push_back(zero_row);
      need_zero = true;
    }
  }
  if (need_zero) sources.push_back(nd::Tensor::zeros({1, d}));
  auto pool = sources.size() == 1 ? sources[0] : nd::concat_rows(sources);
  return MemoryBank::from_slots(nd::select_rows(pool, plan), C, capacity, std::move(occupancy), metric, k);
}

/// Coarse-level memory: the slots of coarse class z are the live slots of
/// its member fine classes (fine bank classes are local ids of `local`).
inline MemoryBank group_memory(const MemoryBank& fine, const ClassHierarchy& local) {
  if (local.num_fine() != fine.classes()) throw ShapeError("group_memory: hierarchy does not match fine bank");
  std::size_t capacity = 0;
  for (std::size_t z = 0; z < local.num_coarse(); ++z) {
    std::size_t total = 0;
    for (std::size_t y : local.children(z)) total += fine.occupancy(y);
    capacity = std::max(capacity, total);
  }
  const std::size_t zero_row = fine.slots().dim(0);
  bool need_zero = false;
  std::vector<std::size_t> plan;
  std::vector<std::size_t> occupancy(local.num_coarse());
  for (std::size_t z = 0; z < local.num_coarse(); ++z) {
    std::size_t used = 0;
    for (std::size_t y : local.children(z))
      for (std::size_t k = 0; k < fine.occupancy(y); ++k, ++used) plan.push_back(fine.row(y, k));
    occupancy[z] = used;
    for (; used < capacity; ++used) {
      plan.push_back(zero_row);
      need_zero = true;
    }
  }
  auto pool = need_zero ? nd::concat_rows({fine.slots(), nd::Tensor::zeros({1, fine.dim()})}) : fine.slots();
  return MemoryBank::from_slots(nd::select_rows(pool, plan), local.num_coarse(), capacity, std::move(occupancy),
                                fine.metric(), fine.k());
}

// ---------------------------------------------------------------------------
// Snapshot in the parameter container format.

inline std::vector<nd::NamedTensor> memory_to_tensors(const MemoryBank& bank) {
  const std::size_t C = bank.classes(), m = bank.capacity();
  std::vector<double> util(C * m), occ(C);
  for (std::size_t j = 0; j < C; ++j) {
    occ[j] = static_cast<double>(bank.occupancy(j));
    for (std::size_t k = 0; k < m; ++k) util[j * m + k] = bank.utility(j, k);
  }
  return {
      {"memory.slots", nd::Tensor({C, m, bank.dim()}, bank.slots().values())},
      {"memory.utility", nd::Tensor({C, m}, std::move(util))},
      {"memory.occupancy", nd::Tensor({C}, std::move(occ))},
      {"memory.config", nd::Tensor::vector({bank.metric() == Metric::dot_cosine ? 0.0 : 1.0,
                                            static_cast<double>(bank.k())})},
  };
}

inline MemoryBank memory_from_tensors(std::span<const nd::NamedTensor> tensors) {
  const auto& slots = nd::find_tensor(tensors, "memory.slots");
  const auto& util = nd::find_tensor(tensors, "memory.utility");
  const auto& occ = nd::find_tensor(tensors, "memory.occupancy");
  const auto& cfg = nd::find_tensor(tensors, "memory.config");
  if (slots.rank() != 3 || util.rank() != 2 || occ.rank() != 1 || cfg.numel() != 2) {
    throw DataError("memory snapshot: unexpected tensor shapes");
  }
  const std::size_t C = slots.dim(0), m = slots.dim(1), d = slots.dim(2);
  MemoryBank bank(C, m, d, cfg.at(0) == 0.0 ? Metric::dot_cosine : Metric::neg_euclidean,
                  static_cast<std::size_t>(cfg.at(1)));
  for (std::size_t j = 0; j < C; ++j) {
    bank.set_occupancy(j, static_cast<std::size_t>(occ.at(j)));
    for (std::size_t k = 0; k < m; ++k) {
      bank.write_slot(j, k, slots.data().subspan((j * m + k) * d, d));
      bank.set_utility(j, k, util.at(j * m + k));
    }
  }
  return bank;
}

}  // namespace hikfs
