#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "facaid/error.hpp"
#include "facaid/geometry.hpp"
#include "facaid/grammar.hpp"
#include "facaid/io.hpp"

namespace facaid {

struct IntRange {
  int lo = 0;
  int hi = 0;
  friend bool operator==(const IntRange&, const IntRange&) = default;
};

struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
  friend bool operator==(const RealRange&, const RealRange&) = default;
};

/// Architectural style record that steers production and argument choice.
struct StyleParams {
  IntRange floor_count_range{1, 6};
  IntRange tiles_per_floor_range{1, 8};
  RealRange ground_floor_height_range{0.15, 0.35};
  double balcony_probability = 0.3;
  double attic_probability = 0.3;
  double shop_probability = 0.5;
  RealRange window_margin_range{0.1, 0.3};
  bool column_symmetry = true;

  friend bool operator==(const StyleParams&, const StyleParams&) = default;
};

/// Global bounds every style must respect.
struct StyleBounds {
  static constexpr IntRange floors{1, 6};
  static constexpr IntRange tiles{1, 8};
  static constexpr RealRange ground_height{0.1, 0.45};
  static constexpr RealRange window_margin{0.05, 0.4};
};

inline void validate_style(const StyleParams& s) {
  auto in = [](IntRange r, IntRange b) { return r.lo <= r.hi && r.lo >= b.lo && r.hi <= b.hi; };
  auto inr = [](RealRange r, RealRange b) { return r.lo <= r.hi && r.lo >= b.lo && r.hi <= b.hi; };
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!in(s.floor_count_range, StyleBounds::floors) ||
      !in(s.tiles_per_floor_range, StyleBounds::tiles) ||
      !inr(s.ground_floor_height_range, StyleBounds::ground_height) ||
      !inr(s.window_margin_range, StyleBounds::window_margin) || !prob(s.balcony_probability) ||
      !prob(s.attic_probability) || !prob(s.shop_probability))
    throw Error(ErrorCode::BadInput, "style parameters outside their bounds");
}

/// Output of the stream-splitting hash used for per-record seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t record_seed(std::uint64_t master_seed, std::uint64_t index) {
  return splitmix64(splitmix64(master_seed) ^ (index * 0xd1b54a32d192ed03ull));
}

namespace detail {

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}
inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
}
inline bool bernoulli(std::mt19937_64& rng, double p) {
  return std::bernoulli_distribution(p)(rng);
}

}  // namespace detail

/// The single "default" style policy: deterministic in the seed.
inline StyleParams sample_style(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  using detail::uniform;
  using detail::uniform_int;
  StyleParams s;
  const int flo = uniform_int(rng, 1, 5);
  s.floor_count_range = {flo, std::min(6, flo + uniform_int(rng, 0, 2))};
  const int tlo = uniform_int(rng, 1, 6);
  s.tiles_per_floor_range = {tlo, std::min(8, tlo + uniform_int(rng, 0, 2))};
  const double glo = uniform(rng, 0.15, 0.3);
  s.ground_floor_height_range = {glo, glo + uniform(rng, 0.0, 0.1)};
  s.balcony_probability = uniform(rng, 0.0, 1.0);
  s.attic_probability = uniform(rng, 0.0, 1.0);
  s.shop_probability = uniform(rng, 0.0, 1.0);
  const double mlo = uniform(rng, 0.1, 0.25);
  s.window_margin_range = {mlo, mlo + uniform(rng, 0.0, 0.1)};
  s.column_symmetry = detail::bernoulli(rng, 0.5);
  return s;
}

struct GeneratorLimits {
  /// Keeps every layout encodable: 100 rects * 5 tokens fits a 512-token input.
  int max_rects = 100;
};

struct DatasetRecord {
  std::uint64_t id = 0;
  DerivationTree tree;
  RectLayout layout;
  StyleParams style;
  std::uint64_t seed = 0;
};

namespace detail {

/// H_p: categorical choice among the productions of one non-terminal.
struct Categorical {
  std::vector<std::string_view> names;
  std::vector<double> weights;

  std::string_view sample(std::mt19937_64& rng) const {
    return names[std::discrete_distribution<std::size_t>(weights.begin(), weights.end())(rng)];
  }
};

class FacadeBuilder {
 public:
  FacadeBuilder(const StyleParams& style, std::uint64_t seed, GeneratorLimits limits)
      : s_(style), rng_(splitmix64(seed ^ 0x5eed5eed5eed5eedull)), limits_(limits) {}

  DerivationTree build() {
    const int floors = uniform_int(rng_, s_.floor_count_range.lo, s_.floor_count_range.hi);
    const bool attic =
        Categorical{{"P1", "P2"}, {1.0 - s_.attic_probability, s_.attic_probability}}.sample(rng_) == "P2";

    Node ground = ground_floor();
    int budget = limits_.max_rects - ground_rects_;
    Node attic_node;
    if (attic) {
      attic_node = attic_row();
      budget -= attic_rects_;
    }
    const int tile_cap = std::max(1, budget / (5 * floors));
    Node upper = upper_body(floors, tile_cap);

    const double gh = uniform(rng_, s_.ground_floor_height_range.lo, s_.ground_floor_height_range.hi);
    if (!attic)
      return {make_node(g_, "P1", {}, {gh, 1.0 - gh}, {std::move(ground), std::move(upper)})};
    const double ah = uniform(rng_, 0.06, 0.12);
    return {make_node(g_, "P2", {}, {gh, 1.0 - gh - ah, ah},
                      {std::move(ground), std::move(upper), std::move(attic_node)})};
  }

 private:
  Node leaf(TerminalLabel l) const { return make_leaf(g_, l); }

  int tiles() {
    return uniform_int(rng_, s_.tiles_per_floor_range.lo, s_.tiles_per_floor_range.hi);
  }

  // One door per facade; remaining cells are shops or blank wall.
  Node ground_floor() {
    const int cells = std::clamp(tiles(), 2, 8);
    const int door = uniform_int(rng_, 0, cells - 1);
    std::vector<double> args{double(cells)};
    std::vector<double> widths;
    std::vector<Node> kids;
    for (int i = 0; i < cells; ++i) {
      if (i == door) {
        args.push_back(1);
        widths.push_back(uniform(rng_, 0.6, 0.9));
        const double dh = uniform(rng_, 0.65, 0.85);
        kids.push_back(make_node(g_, "P12", {}, {dh, 1.0 - dh},
                                 {leaf(TerminalLabel::Door), leaf(TerminalLabel::Wall)}));
        ground_rects_ += 2;
      } else if (bernoulli(rng_, s_.shop_probability)) {
        args.push_back(0);
        widths.push_back(uniform(rng_, 1.0, 1.6));
        kids.push_back(make_node(g_, "P11", {},
                                 {uniform(rng_, 0.04, 0.1), uniform(rng_, 0.55, 0.75), uniform(rng_, 0.15, 0.3)},
                                 {leaf(TerminalLabel::Wall), leaf(TerminalLabel::Shop), leaf(TerminalLabel::Wall)}));
        ground_rects_ += 3;
      } else {
        args.push_back(2);
        widths.push_back(uniform(rng_, 0.3, 0.8));
        kids.push_back(make_node(g_, "P14"));
        ground_rects_ += 1;
      }
    }
    return make_node(g_, "P6", std::move(args), std::move(widths), std::move(kids));
  }

  Node attic_row() {
    const int cells = std::clamp(tiles(), 1, 8);
    const double sill = uniform(rng_, 0.2, 0.35);
    const double win = uniform(rng_, 0.35, 0.5);
    std::vector<Node> kids;
    for (int i = 0; i < cells; ++i)
      kids.push_back(make_node(g_, "P8", {}, {sill, win, 1.0 - sill - win},
                               {leaf(TerminalLabel::Wall), leaf(TerminalLabel::Window), leaf(TerminalLabel::Wall)}));
    attic_rects_ = 3 * cells;
    return make_node(g_, "P13", {double(cells)}, std::vector<double>(cells, 1.0), std::move(kids));
  }

  struct FloorStyle {
    double margin, sill, lintel, balcony_height;
    bool balconies;
  };

  Node window_tile(const FloorStyle& f) {
    Node cell = f.balconies
                    ? make_node(g_, "P9", {}, {f.balcony_height, 1.0 - f.balcony_height - f.lintel, f.lintel},
                                {leaf(TerminalLabel::Balcony), leaf(TerminalLabel::Window), leaf(TerminalLabel::Wall)})
                    : make_node(g_, "P8", {}, {f.sill, 1.0 - f.sill - f.lintel, f.lintel},
                                {leaf(TerminalLabel::Wall), leaf(TerminalLabel::Window), leaf(TerminalLabel::Wall)});
    return make_node(g_, "P7", {}, {f.margin, 1.0 - 2.0 * f.margin, f.margin},
                     {leaf(TerminalLabel::Wall), std::move(cell), leaf(TerminalLabel::Wall)});
  }

  Node upper_floor(int count, bool symmetric) {
    FloorStyle f{uniform(rng_, s_.window_margin_range.lo, s_.window_margin_range.hi),
                 uniform(rng_, 0.15, 0.3), uniform(rng_, 0.1, 0.25), uniform(rng_, 0.15, 0.3),
                 bernoulli(rng_, s_.balcony_probability)};
    const Categorical hp{{"P4", "P5"}, {1.0, symmetric || count < 2 ? 0.0 : 1.0}};
    if (hp.sample(rng_) == "P4") {
      std::vector<Node> kids;
      for (int i = 0; i < count; ++i)
        kids.push_back(bernoulli(rng_, 0.06) ? make_node(g_, "P10") : window_tile(f));
      return make_node(g_, "P4", {double(count)}, std::vector<double>(count, 1.0), std::move(kids));
    }
    std::vector<double> args{double(count)};
    std::vector<double> widths;
    std::vector<Node> kids;
    for (int i = 0; i < count; ++i) {
      if (bernoulli(rng_, 0.7)) {
        args.push_back(0);
        widths.push_back(uniform(rng_, 0.8, 1.4));
        kids.push_back(window_tile(f));
      } else {
        args.push_back(1);
        widths.push_back(uniform(rng_, 0.25, 0.6));
        kids.push_back(leaf(TerminalLabel::Wall));
      }
    }
    return make_node(g_, "P5", std::move(args), std::move(widths), std::move(kids));
  }

  Node upper_body(int floors, int tile_cap) {
    std::vector<Node> kids;
    const int shared = std::min(tiles(), tile_cap);
    for (int i = 0; i < floors; ++i) {
      const int count = s_.column_symmetry ? shared : std::min(tiles(), tile_cap);
      kids.push_back(upper_floor(count, s_.column_symmetry));
    }
    return make_node(g_, "P3", {double(floors)}, std::vector<double>(floors, 1.0), std::move(kids));
  }

  const Grammar& g_ = facade_grammar();
  const StyleParams& s_;
  std::mt19937_64 rng_;
  GeneratorLimits limits_;
  int ground_rects_ = 0;
  int attic_rects_ = 0;
};

}  // namespace detail

/// Derives one coherent facade. Deterministic in (style, seed).
inline DatasetRecord generate_facade(const StyleParams& style, std::uint64_t seed,
                                     GeneratorLimits limits = {}) {
  validate_style(style);
  DatasetRecord rec;
  rec.style = style;
  rec.seed = seed;
  rec.tree = detail::FacadeBuilder(style, seed, limits).build();
  rec.layout = execute(rec.tree);
  return rec;
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetStats {
  std::size_t records = 0;
  /// Node occurrences per production index.
  std::vector<std::size_t> production_uses;
  /// Records using each production at least once.
  std::vector<std::size_t> records_using;
  std::map<std::size_t, std::size_t> rect_count_histogram;
  std::map<std::size_t, std::size_t> node_count_histogram;

  void add(const DatasetRecord& rec, const Grammar& g = facade_grammar()) {
    production_uses.resize(g.production_count());
    records_using.resize(g.production_count());
    std::vector<bool> seen(g.production_count());
    std::function<void(const Node&)> walk = [&](const Node& n) {
      ++production_uses[n.prod];
      seen[n.prod] = true;
      for (const auto& c : n.children) walk(c);
    };
    walk(rec.tree.root);
    for (std::size_t p = 0; p < seen.size(); ++p) records_using[p] += seen[p];
    ++rect_count_histogram[rec.layout.rects.size()];
    ++node_count_histogram[node_count(rec.tree)];
    ++records;
  }
};

using RecordSink = std::function<void(const DatasetRecord&)>;

inline DatasetRecord generate_record(std::uint64_t master_seed, std::uint64_t index,
                                     GeneratorLimits limits = {}) {
  const auto seed = record_seed(master_seed, index);
  auto rec = generate_facade(sample_style(seed), seed, limits);
  rec.id = index;
  return rec;
}

/// Emits records 0..count-1 in id order. Output depends only on
/// (count, master_seed, limits); `workers` only changes wall-clock time.
inline DatasetStats generate_dataset(std::size_t count, std::uint64_t master_seed,
                                     const RecordSink& sink, unsigned workers = 1,
                                     GeneratorLimits limits = {}) {
  if (count == 0) throw Error(ErrorCode::BadInput, "count must be at least 1");
  workers = std::max(1u, workers);
  DatasetStats stats;
  constexpr std::size_t kChunk = 512;
  std::vector<DatasetRecord> chunk;
  for (std::size_t begin = 0; begin < count; begin += kChunk) {
    const std::size_t n = std::min(kChunk, count - begin);
    chunk.assign(n, {});
    auto fill = [&](unsigned w) {
      for (std::size_t i = w; i < n; i += workers) chunk[i] = generate_record(master_seed, begin + i, limits);
    };
    if (workers == 1) {
      fill(0);
    } else {
      std::vector<std::thread> pool;
      for (unsigned w = 0; w < workers; ++w) pool.emplace_back(fill, w);
      for (auto& t : pool) t.join();
    }
    for (const auto& rec : chunk) {
      try {
        sink(rec);
      } catch (const std::exception& e) {
        throw Error(ErrorCode::SinkFailure, e.what());
      }
      stats.add(rec);
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// JSONL storage: a header line, then one record per line.

inline constexpr int kDatasetSchemaVersion = 1;

inline json style_to_json(const StyleParams& s) {
  return {{"floor_count_range", {s.floor_count_range.lo, s.floor_count_range.hi}},
          {"tiles_per_floor_range", {s.tiles_per_floor_range.lo, s.tiles_per_floor_range.hi}},
          {"ground_floor_height_range", {s.ground_floor_height_range.lo, s.ground_floor_height_range.hi}},
          {"balcony_probability", s.balcony_probability},
          {"attic_probability", s.attic_probability},
          {"shop_probability", s.shop_probability},
          {"window_margin_range", {s.window_margin_range.lo, s.window_margin_range.hi}},
          {"column_symmetry", s.column_symmetry}};
}

inline StyleParams style_from_json(const json& j) {
  StyleParams s;
  try {
    auto ir = [&](const char* k, IntRange& r) {
      if (j.contains(k)) r = {j[k].at(0).get<int>(), j[k].at(1).get<int>()};
    };
    auto rr = [&](const char* k, RealRange& r) {
      if (j.contains(k)) r = {j[k].at(0).get<double>(), j[k].at(1).get<double>()};
    };
    ir("floor_count_range", s.floor_count_range);
    ir("tiles_per_floor_range", s.tiles_per_floor_range);
    rr("ground_floor_height_range", s.ground_floor_height_range);
    rr("window_margin_range", s.window_margin_range);
    s.balcony_probability = j.value("balcony_probability", s.balcony_probability);
    s.attic_probability = j.value("attic_probability", s.attic_probability);
    s.shop_probability = j.value("shop_probability", s.shop_probability);
    s.column_symmetry = j.value("column_symmetry", s.column_symmetry);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadInput, std::string("style: ") + e.what());
  }
  validate_style(s);
  return s;
}

inline json record_to_json(const DatasetRecord& r) {
  return {{"id", r.id},
          {"seed", r.seed},
          {"style", style_to_json(r.style)},
          {"tree", tree_to_json(r.tree)},
          {"layout", layout_to_json(r.layout)}};
}

inline DatasetRecord record_from_json(const json& j) {
  DatasetRecord r;
  try {
    r.id = j.at("id").get<std::uint64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadInput, std::string("record: ") + e.what());
  }
  r.style = style_from_json(j.at("style"));
  r.tree = tree_from_json(j.at("tree"));
  r.layout = layout_from_json(j.at("layout"));
  return r;
}

inline json dataset_header(std::size_t count, std::uint64_t master_seed) {
  return {{"schema_version", kDatasetSchemaVersion},
          {"grammar_hash", grammar_hash()},
          {"style_policy", "default"},
          {"count", count},
          {"master_seed", master_seed}};
}

inline RecordSink jsonl_sink(std::ostream& out) {
  return [&out](const DatasetRecord& r) {
    out << record_to_json(r).dump() << '\n';
    if (!out) throw std::runtime_error("write failed");
  };
}

inline std::vector<DatasetRecord> read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::BadInput, "dataset: missing header line");
  const auto header = json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("schema_version", 0) != kDatasetSchemaVersion)
    throw Error(ErrorCode::BadInput, "dataset: unsupported header");
  if (header.value("grammar_hash", std::string{}) != grammar_hash())
    throw Error(ErrorCode::BadInput, "dataset: grammar hash mismatch");
  std::vector<DatasetRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::BadInput, "dataset: malformed line");
    out.push_back(record_from_json(j));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noise injection

struct NoiseResult {
  RectLayout layout;
  double achieved = 0.0;
  /// False when the target could not be met within one percentage point.
  bool reached = true;
};

/// Gaussian jitter on rect corners, scaled by a sigma found by bisection so the
/// eval_res x eval_res pixel difference approaches `target_noise`.
inline NoiseResult inject_noise(const RectLayout& layout, double target_noise, std::uint64_t seed,
                                int eval_res = 256) {
  if (!(target_noise >= 0.0 && target_noise <= 0.3))
    throw Error(ErrorCode::BadInput, "target noise must lie in [0, 0.3]");
  if (target_noise == 0.0 || layout.rects.empty()) return {layout, 0.0, true};

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<std::array<double, 4>> z(layout.rects.size());
  for (auto& c : z)
    for (auto& v : c) v = normal(rng);

  const auto reference = hard_rasterize(layout, eval_res, eval_res);
  auto perturb = [&](double sigma) {
    RectLayout out = layout;
    for (std::size_t i = 0; i < out.rects.size(); ++i) {
      auto& r = out.rects[i];
      double x0 = std::clamp(r.x + sigma * z[i][0], 0.0, 1.0);
      double y0 = std::clamp(r.y + sigma * z[i][1], 0.0, 1.0);
      double x1 = std::clamp(r.x + r.w + sigma * z[i][2], 0.0, 1.0);
      double y1 = std::clamp(r.y + r.h + sigma * z[i][3], 0.0, 1.0);
      if (x1 < x0) std::swap(x0, x1);
      if (y1 < y0) std::swap(y0, y1);
      constexpr double kMin = 1e-6;
      if (x1 - x0 < kMin) x0 = std::max(0.0, x1 - kMin), x1 = x0 + kMin;
      if (y1 - y0 < kMin) y0 = std::max(0.0, y1 - kMin), y1 = y0 + kMin;
      r = {r.label, x0, y0, x1 - x0, y1 - y0};
    }
    return out;
  };
  auto measure = [&](const RectLayout& l) {
    return pixel_difference(reference, hard_rasterize(l, eval_res, eval_res));
  };

  NoiseResult best{layout, 0.0, false};
  auto consider = [&](double sigma) {
    auto l = perturb(sigma);
    const double d = measure(l);
    if (std::abs(d - target_noise) < std::abs(best.achieved - target_noise)) best = {std::move(l), d, false};
    return d;
  };

  double lo = 0.0, hi = 1e-3;
  while (consider(hi) < target_noise && hi < 4.0) {
    lo = hi;
    hi *= 2.0;
  }
  for (int it = 0; it < 60 && std::abs(best.achieved - target_noise) > 1e-4; ++it) {
    const double mid = 0.5 * (lo + hi);
    (consider(mid) < target_noise ? lo : hi) = mid;
  }
  best.reached = std::abs(best.achieved - target_noise) <= 0.01;
  return best;
}

}  // namespace facaid
