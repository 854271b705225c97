#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <vector>

#include <json.hpp>

#include "facaid/decoder.hpp"
#include "facaid/generator.hpp"
#include "facaid/io.hpp"

namespace facaid {

// ---------------------------------------------------------------------------
// Tree edit distance

/// Ordered tree with integer labels.
struct OrderedTree {
  int label = 0;
  std::vector<OrderedTree> children;

  friend bool operator==(const OrderedTree&, const OrderedTree&) = default;
};

namespace detail {

struct Postorder {
  std::vector<int> label;     // 1-based
  std::vector<int> leftmost;  // leftmost leaf descendant, 1-based
  std::vector<int> keyroots;
};

inline int postorder_walk(const OrderedTree& t, Postorder& p) {
  int first = -1;
  for (const auto& c : t.children) {
    const int l = postorder_walk(c, p);
    if (first < 0) first = l;
  }
  p.label.push_back(t.label);
  const int self = static_cast<int>(p.label.size()) - 1;
  p.leftmost.push_back(first < 0 ? self : first);
  return p.leftmost.back();
}

inline Postorder postorder(const OrderedTree& t) {
  Postorder p;
  p.label.push_back(0);
  p.leftmost.push_back(0);
  postorder_walk(t, p);
  const int n = static_cast<int>(p.label.size()) - 1;
  std::vector<char> seen(static_cast<std::size_t>(n) + 1, 0);
  for (int i = n; i >= 1; --i) {
    auto& s = seen[static_cast<std::size_t>(p.leftmost[static_cast<std::size_t>(i)])];
    if (!s) {
      s = 1;
      p.keyroots.push_back(i);
    }
  }
  std::sort(p.keyroots.begin(), p.keyroots.end());
  return p;
}

}  // namespace detail

/// Unit-cost insert/delete/relabel distance between ordered trees.
inline int tree_edit_distance(const OrderedTree& a, const OrderedTree& b) {
  const auto pa = detail::postorder(a), pb = detail::postorder(b);
  const int n = static_cast<int>(pa.label.size()) - 1, m = static_cast<int>(pb.label.size()) - 1;
  std::vector<int> td(static_cast<std::size_t>((n + 1) * (m + 1)), 0);
  std::vector<int> fd(static_cast<std::size_t>((n + 2) * (m + 2)), 0);
  auto T = [&](int i, int j) -> int& { return td[static_cast<std::size_t>(i * (m + 1) + j)]; };
  auto& la = pa.leftmost;
  auto& lb = pb.leftmost;

  for (int i : pa.keyroots) {
    for (int j : pb.keyroots) {
      const int li = la[static_cast<std::size_t>(i)], lj = lb[static_cast<std::size_t>(j)];
      const int w = j - lj + 2;
      // forest distance indexed by offsets from li - 1 and lj - 1
      auto F = [&](int x, int y) -> int& {
        return fd[static_cast<std::size_t>((x - li + 1) * w + (y - lj + 1))];
      };
      F(li - 1, lj - 1) = 0;
      for (int x = li; x <= i; ++x) F(x, lj - 1) = F(x - 1, lj - 1) + 1;
      for (int y = lj; y <= j; ++y) F(li - 1, y) = F(li - 1, y - 1) + 1;
      for (int x = li; x <= i; ++x) {
        for (int y = lj; y <= j; ++y) {
          const int lx = la[static_cast<std::size_t>(x)], ly = lb[static_cast<std::size_t>(y)];
          const int del = F(x - 1, y) + 1, ins = F(x, y - 1) + 1;
          if (lx == li && ly == lj) {
            const int rel = F(x - 1, y - 1) +
                            (pa.label[static_cast<std::size_t>(x)] != pb.label[static_cast<std::size_t>(y)]);
            F(x, y) = std::min({del, ins, rel});
            T(x, y) = F(x, y);
          } else {
            F(x, y) = std::min({del, ins, F(lx - 1, ly - 1) + T(x, y)});
          }
        }
      }
    }
  }
  return T(n, m);
}

/// Labels are (production, structural arguments); sizing is ignored.
class TreeLabeler {
 public:
  OrderedTree operator()(const Node& n) {
    OrderedTree t;
    auto key = std::make_pair(n.prod, n.structural);
    auto it = ids_.try_emplace(std::move(key), static_cast<int>(ids_.size())).first;
    t.label = it->second;
    t.children.reserve(n.children.size());
    for (const auto& c : n.children) t.children.push_back((*this)(c));
    return t;
  }

 private:
  std::map<std::pair<ProductionId, std::vector<double>>, int> ids_;
};

inline int tree_edit_distance(const DerivationTree& a, const DerivationTree& b) {
  TreeLabeler label;
  const auto ta = label(a.root);
  const auto tb = label(b.root);
  return tree_edit_distance(ta, tb);
}

// ---------------------------------------------------------------------------
// Production frequency

struct FrequencyTable {
  std::vector<std::int64_t> ground_truth;
  std::vector<std::int64_t> reconstructed;
  std::size_t inferences = 0;

  std::vector<double> normalized_difference() const {
    std::vector<double> d(ground_truth.size(), 0.0);
    if (inferences == 0) return d;
    for (std::size_t i = 0; i < d.size(); ++i)
      d[i] = static_cast<double>(reconstructed[i] - ground_truth[i]) / static_cast<double>(inferences);
    return d;
  }
};

inline void count_productions(const Node& n, std::vector<std::int64_t>& counts) {
  ++counts[static_cast<std::size_t>(n.prod)];
  for (const auto& c : n.children) count_productions(c, counts);
}

inline std::vector<std::int64_t> production_frequency(const std::vector<DerivationTree>& trees,
                                                      const Grammar& g = facade_grammar()) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(g.production_count()), 0);
  for (const auto& t : trees) count_productions(t.root, counts);
  return counts;
}

inline FrequencyTable production_frequency(const std::vector<DerivationTree>& truth,
                                           const std::vector<DerivationTree>& recon,
                                           const Grammar& g = facade_grammar()) {
  return {production_frequency(truth, g), production_frequency(recon, g), recon.size()};
}

inline json frequency_to_json(const FrequencyTable& f, const Grammar& g = facade_grammar()) {
  json rows = json::array();
  const auto diff = f.normalized_difference();
  for (std::size_t i = 0; i < f.ground_truth.size(); ++i)
    rows.push_back({{"production", g.production(static_cast<ProductionId>(i)).name},
                    {"ground_truth", f.ground_truth[i]},
                    {"reconstructed", f.reconstructed[i]},
                    {"normalized_difference", diff[i]}});
  return {{"inferences", f.inferences}, {"rows", std::move(rows)}};
}

// ---------------------------------------------------------------------------
// Pixel classification error

inline double pixel_classification_error(const RectLayout& a, const RectLayout& b, int res = 256) {
  if (res < 16) throw Error(ErrorCode::BadInput, "resolution must be at least 16");
  return pixel_difference(hard_rasterize(a, res, res), hard_rasterize(b, res, res));
}

// ---------------------------------------------------------------------------
// Noise robustness

struct NoisePoint {
  double level = 0.0;
  double mean_ted = 0.0;
  double mean_achieved = 0.0;
  std::size_t count = 0;
};

template <class S>
std::vector<NoisePoint> noise_robustness_curve(const SeqModel<S>& model, const std::vector<DatasetRecord>& testset,
                                               const std::vector<double>& levels, std::uint64_t seed,
                                               const Vocabulary& vocab) {
  if (levels.empty() || levels.front() != 0.0 || !std::is_sorted(levels.begin(), levels.end()))
    throw Error(ErrorCode::BadInput, "noise levels must ascend from 0");
  std::vector<NoisePoint> curve;
  for (std::size_t li = 0; li < levels.size(); ++li) {
    NoisePoint p{levels[li]};
    double ted = 0, achieved = 0;
    for (std::size_t i = 0; i < testset.size(); ++i) {
      const auto& rec = testset[i];
      RectLayout input = rec.layout;
      if (levels[li] > 0) {
        auto noisy = inject_noise(rec.layout, levels[li], splitmix64(seed ^ splitmix64(li * 1000003 + i)));
        input = std::move(noisy.layout);
        achieved += noisy.achieved;
      }
      ted += tree_edit_distance(infer_procedure(model, input, vocab).tree, rec.tree);
    }
    p.count = testset.size();
    if (p.count) {
      p.mean_ted = ted / static_cast<double>(p.count);
      p.mean_achieved = achieved / static_cast<double>(p.count);
    }
    curve.push_back(p);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  std::vector<int> ted;
  std::vector<double> normalized_ted;
  std::vector<double> pixel_error;
  FrequencyTable frequency;
  std::vector<NoisePoint> noise;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Clean-inference metrics for each record.
template <class S>
EvalReport evaluate(const SeqModel<S>& model, const std::vector<DatasetRecord>& testset, const Vocabulary& vocab,
                    int res = 256) {
  EvalReport r;
  std::vector<DerivationTree> truth, recon;
  for (const auto& rec : testset) {
    auto out = infer_procedure(model, rec.layout, vocab);
    const int d = tree_edit_distance(out.tree, rec.tree);
    r.ted.push_back(d);
    r.normalized_ted.push_back(static_cast<double>(d) / static_cast<double>(node_count(rec.tree)));
    r.pixel_error.push_back(pixel_classification_error(execute(out.tree), rec.layout, res));
    truth.push_back(rec.tree);
    recon.push_back(std::move(out.tree));
  }
  r.frequency = production_frequency(truth, recon);
  return r;
}

inline json histogram(const std::vector<double>& values, double lo, double hi, int bins) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    const int b = std::clamp(static_cast<int>((v - lo) / (hi - lo) * bins), 0, bins - 1);
    ++counts[static_cast<std::size_t>(b)];
  }
  return {{"lo", lo}, {"hi", hi}, {"counts", counts}};
}

inline json report_to_json(const EvalReport& r) {
  std::map<int, std::int64_t> ted_hist;
  for (int d : r.ted) ++ted_hist[d];
  json th = json::array();
  for (auto [d, c] : ted_hist) th.push_back({{"distance", d}, {"count", c}});
  std::vector<double> ted(r.ted.begin(), r.ted.end());
  json noise = json::array();
  for (const auto& p : r.noise)
    noise.push_back({{"level", p.level}, {"mean_ted", p.mean_ted}, {"achieved", p.mean_achieved}, {"count", p.count}});
  return {{"samples", r.ted.size()},
          {"ted", {{"median", median(ted)}, {"histogram", std::move(th)}, {"values", r.ted}}},
          {"normalized_ted", {{"median", median(r.normalized_ted)}, {"histogram", histogram(r.normalized_ted, 0, 2, 20)}}},
          {"pixel_error", {{"median", median(r.pixel_error)}, {"histogram", histogram(r.pixel_error, 0, 1, 20)}}},
          {"frequency", frequency_to_json(r.frequency)},
          {"noise", std::move(noise)}};
}

}  // namespace facaid
