#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "facaid/error.hpp"
#include "facaid/geometry.hpp"

namespace facaid {

using SymbolId = std::uint16_t;
using ProductionId = std::uint16_t;

enum class ProductionKind : std::uint8_t { SplitX, SplitY, RepeatX, RepeatY, Assign };

inline constexpr std::string_view kind_name(ProductionKind kind) {
  switch (kind) {
    case ProductionKind::SplitX: return "SplitX";
    case ProductionKind::SplitY: return "SplitY";
    case ProductionKind::RepeatX: return "RepeatX";
    case ProductionKind::RepeatY: return "RepeatY";
    case ProductionKind::Assign: return "Assign";
  }
  return "?";
}

/// How a production's children follow from its structural arguments.
///   Fixed:    children listed verbatim, no leading arguments
///   Repeat:   argument 0 is a count n, children are n copies of one symbol
///   Variadic: argument 0 is a count n, then n category arguments each
///             picking a child symbol from `children`
///   Leaf:     no children (Assign)
enum class ChildRule : std::uint8_t { Fixed, Repeat, Variadic, Leaf };

struct IntDomain {
  int lo = 0;
  int hi = 0;

  bool contains(double v) const {
    return v == std::floor(v) && v >= lo && v <= hi;
  }
  friend bool operator==(const IntDomain&, const IntDomain&) = default;
};

/// Trailing argument that does not influence the child list. None of the
/// facade productions use one; they exist for grammar extensions.
struct ExtraArg {
  enum class Type : std::uint8_t { Integer, Real };
  std::string name;
  Type type = Type::Integer;
  IntDomain ints{};
  double real_lo = 0.0;
  double real_hi = 1.0;

  bool contains(double v) const {
    if (type == Type::Integer) return ints.contains(v);
    return std::isfinite(v) && v >= real_lo && v <= real_hi;
  }
};

struct ProductionSpec {
  std::string name;
  SymbolId lhs = 0;
  ProductionKind kind = ProductionKind::Assign;
  ChildRule rule = ChildRule::Leaf;
  /// Fixed: the children. Repeat: the single repeated symbol.
  /// Variadic: the category options.
  std::vector<SymbolId> children;
  IntDomain count{};
  TerminalLabel label = TerminalLabel::Wall;
  std::vector<ExtraArg> extras;
};

class Grammar {
 public:
  Grammar(std::vector<std::string> nonterminals, std::string_view axiom,
          std::vector<ProductionSpec> productions)
      : productions_(std::move(productions)) {
    for (auto label : kAllLabels) symbols_.emplace_back(label_name(label));
    for (auto& nt : nonterminals) symbols_.push_back(std::move(nt));
    auto ax = symbol(axiom);
    if (!ax) throw Error(ErrorCode::BadInput, "unknown axiom " + std::string(axiom));
    axiom_ = *ax;
    by_lhs_.resize(symbols_.size());
    for (std::size_t p = 0; p < productions_.size(); ++p)
      by_lhs_[productions_[p].lhs].push_back(static_cast<ProductionId>(p));
  }

  std::size_t symbol_count() const { return symbols_.size(); }
  std::size_t production_count() const { return productions_.size(); }
  SymbolId axiom() const { return axiom_; }
  const std::string& symbol_name(SymbolId s) const { return symbols_.at(s); }
  bool is_terminal(SymbolId s) const { return s < kLabelCount; }
  const ProductionSpec& production(ProductionId p) const { return productions_.at(p); }
  std::span<const ProductionSpec> productions() const { return productions_; }
  std::span<const ProductionId> productions_for(SymbolId lhs) const { return by_lhs_.at(lhs); }

  std::optional<SymbolId> symbol(std::string_view name) const {
    for (std::size_t i = 0; i < symbols_.size(); ++i)
      if (symbols_[i] == name) return static_cast<SymbolId>(i);
    return std::nullopt;
  }

  std::optional<ProductionId> production_id(std::string_view name) const {
    for (std::size_t i = 0; i < productions_.size(); ++i)
      if (productions_[i].name == name) return static_cast<ProductionId>(i);
    return std::nullopt;
  }

  ProductionId require_production(std::string_view name) const {
    auto id = production_id(name);
    if (!id) throw Error(ErrorCode::InvalidTree, "unknown production " + std::string(name));
    return *id;
  }

  /// Number of leading arguments that determine the children, given the
  /// first argument (the count) where the rule has one.
  static std::size_t child_arg_count(const ProductionSpec& spec, int count) {
    switch (spec.rule) {
      case ChildRule::Repeat: return 1;
      case ChildRule::Variadic: return 1 + static_cast<std::size_t>(count);
      default: return 0;
    }
  }

  /// Children implied by structural arguments. Arguments must already be in
  /// domain.
  std::vector<SymbolId> child_symbols(const ProductionSpec& spec,
                                      std::span<const double> structural) const {
    switch (spec.rule) {
      case ChildRule::Fixed: return spec.children;
      case ChildRule::Repeat:
        return std::vector<SymbolId>(static_cast<std::size_t>(structural[0]), spec.children[0]);
      case ChildRule::Variadic: {
        std::vector<SymbolId> out;
        const auto n = static_cast<std::size_t>(structural[0]);
        for (std::size_t i = 0; i < n; ++i)
          out.push_back(spec.children[static_cast<std::size_t>(structural[1 + i])]);
        return out;
      }
      case ChildRule::Leaf: return {};
    }
    return {};
  }

 private:
  std::vector<std::string> symbols_;
  SymbolId axiom_ = 0;
  std::vector<ProductionSpec> productions_;
  std::vector<std::vector<ProductionId>> by_lhs_;
};

namespace detail {

inline ProductionSpec fixed(std::string name, SymbolId lhs, ProductionKind kind,
                            std::vector<SymbolId> children) {
  ProductionSpec p;
  p.name = std::move(name);
  p.lhs = lhs;
  p.kind = kind;
  p.rule = ChildRule::Fixed;
  p.children = std::move(children);
  return p;
}

inline ProductionSpec repeat(std::string name, SymbolId lhs, ProductionKind kind, SymbolId child,
                             IntDomain count) {
  ProductionSpec p;
  p.name = std::move(name);
  p.lhs = lhs;
  p.kind = kind;
  p.rule = ChildRule::Repeat;
  p.children = {child};
  p.count = count;
  return p;
}

inline ProductionSpec variadic(std::string name, SymbolId lhs, ProductionKind kind,
                               std::vector<SymbolId> options, IntDomain count) {
  ProductionSpec p;
  p.name = std::move(name);
  p.lhs = lhs;
  p.kind = kind;
  p.rule = ChildRule::Variadic;
  p.children = std::move(options);
  p.count = count;
  return p;
}

inline ProductionSpec assign(std::string name, SymbolId lhs, TerminalLabel label) {
  ProductionSpec p;
  p.name = std::move(name);
  p.lhs = lhs;
  p.kind = ProductionKind::Assign;
  p.rule = ChildRule::Leaf;
  p.label = label;
  return p;
}

}  // namespace detail

/// The facade rule set. Symbol ids: terminals 0..4 in TerminalLabel order,
/// then Facade, GroundFloor, UpperBody, Attic, Floor, Tile, Cell, ShopCell,
/// DoorCell, WallCell.
inline Grammar build_facade_grammar() {
  enum : SymbolId {
    Wall, Window, Door, Balcony, Shop,
    Facade, GroundFloor, UpperBody, Attic, Floor, Tile, Cell, ShopCell, DoorCell, WallCell
  };
  using K = ProductionKind;
  using namespace detail;
  std::vector<ProductionSpec> ps;
  ps.push_back(fixed("P1", Facade, K::SplitY, {GroundFloor, UpperBody}));
  ps.push_back(fixed("P2", Facade, K::SplitY, {GroundFloor, UpperBody, Attic}));
  ps.push_back(repeat("P3", UpperBody, K::RepeatY, Floor, {1, 6}));
  ps.push_back(repeat("P4", Floor, K::RepeatX, Tile, {1, 8}));
  ps.push_back(variadic("P5", Floor, K::SplitX, {Tile, Wall}, {2, 8}));
  ps.push_back(variadic("P6", GroundFloor, K::SplitX, {ShopCell, DoorCell, WallCell}, {2, 8}));
  ps.push_back(fixed("P7", Tile, K::SplitX, {Wall, Cell, Wall}));
  ps.push_back(fixed("P8", Cell, K::SplitY, {Wall, Window, Wall}));
  ps.push_back(fixed("P9", Cell, K::SplitY, {Balcony, Window, Wall}));
  ps.push_back(assign("P10", Tile, TerminalLabel::Wall));
  ps.push_back(fixed("P11", ShopCell, K::SplitY, {Wall, Shop, Wall}));
  ps.push_back(fixed("P12", DoorCell, K::SplitY, {Door, Wall}));
  ps.push_back(repeat("P13", Attic, K::RepeatX, Cell, {1, 8}));
  ps.push_back(assign("P14", WallCell, TerminalLabel::Wall));
  for (auto label : kAllLabels)
    ps.push_back(assign(std::string(label_name(label)), static_cast<SymbolId>(label), label));
  return Grammar({"Facade", "GroundFloor", "UpperBody", "Attic", "Floor", "Tile", "Cell",
                  "ShopCell", "DoorCell", "WallCell"},
                 "Facade", std::move(ps));
}

inline const Grammar& facade_grammar() {
  static const Grammar g = build_facade_grammar();
  return g;
}

// ---------------------------------------------------------------------------
// Derivation trees

struct Node {
  ProductionId prod = 0;
  std::vector<double> structural;
  /// Positive split weights; empty when sizing has not been assigned yet.
  std::vector<double> sizing;
  std::vector<Node> children;

  friend bool operator==(const Node&, const Node&) = default;
};

struct DerivationTree {
  Node root;

  friend bool operator==(const DerivationTree&, const DerivationTree&) = default;
};

inline std::size_t node_count(const Node& n) {
  std::size_t c = 1;
  for (const auto& ch : n.children) c += node_count(ch);
  return c;
}
inline std::size_t node_count(const DerivationTree& t) { return node_count(t.root); }

inline std::size_t tree_depth(const Node& n) {
  std::size_t d = 0;
  for (const auto& ch : n.children) d = std::max(d, tree_depth(ch));
  return d + 1;
}

/// Same structure with all sizing stripped.
inline Node strip_sizing(Node n) {
  n.sizing.clear();
  for (auto& ch : n.children) ch = strip_sizing(std::move(ch));
  return n;
}
inline DerivationTree strip_sizing(DerivationTree t) { return {strip_sizing(std::move(t.root))}; }

inline std::size_t sizing_arity(const ProductionSpec& spec, std::span<const double> structural) {
  switch (spec.rule) {
    case ChildRule::Fixed: return spec.children.size();
    case ChildRule::Repeat:
    case ChildRule::Variadic: return structural.empty() ? 0 : static_cast<std::size_t>(structural[0]);
    case ChildRule::Leaf: return 0;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string path;
  std::string message;
};

struct ValidityReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

enum class SizingCheck { Required, Ignored };

/// Axiom: the root must expand the grammar's axiom. AnySymbol: the tree may be
/// a subtree rooted at whatever its root production expands.
enum class RootCheck { Axiom, AnySymbol };

namespace detail {

inline std::string domain_text(IntDomain d) {
  return "[" + std::to_string(d.lo) + "," + std::to_string(d.hi) + "]";
}

/// Returns false when the children cannot be checked any further.
inline bool check_structural(const Grammar& g, const ProductionSpec& spec, const Node& node,
                             const std::string& path, std::vector<Violation>& out) {
  const auto& args = node.structural;
  std::size_t lead = 0;
  if (spec.rule == ChildRule::Repeat || spec.rule == ChildRule::Variadic) {
    if (args.empty()) {
      out.push_back({path, spec.name + ": missing count argument"});
      return false;
    }
    if (!spec.count.contains(args[0])) {
      out.push_back({path, "count outside " + domain_text(spec.count)});
      return false;
    }
    lead = Grammar::child_arg_count(spec, static_cast<int>(args[0]));
  }
  const std::size_t expected = lead + spec.extras.size();
  if (args.size() != expected) {
    out.push_back({path, spec.name + ": expected " + std::to_string(expected) +
                             " structural arguments, got " + std::to_string(args.size())});
    return false;
  }
  bool ok = true;
  if (spec.rule == ChildRule::Variadic) {
    const IntDomain kinds{0, static_cast<int>(spec.children.size()) - 1};
    for (std::size_t i = 1; i < lead; ++i)
      if (!kinds.contains(args[i])) {
        out.push_back({path, "category argument " + std::to_string(i) + " outside " +
                                 domain_text(kinds)});
        ok = false;
      }
  }
  for (std::size_t i = 0; i < spec.extras.size(); ++i)
    if (!spec.extras[i].contains(args[lead + i])) {
      out.push_back({path, "argument " + spec.extras[i].name + " outside its domain"});
      ok = false;
    }
  (void)g;
  return ok;
}

inline void validate_node(const Grammar& g, const Node& node, SymbolId expected,
                          const std::string& path, SizingCheck sizing,
                          std::vector<Violation>& out) {
  if (node.prod >= g.production_count()) {
    out.push_back({path, "unknown production id " + std::to_string(node.prod)});
    return;
  }
  const auto& spec = g.production(node.prod);
  if (spec.lhs != expected) {
    out.push_back({path, "child symbol mismatch: expected " + g.symbol_name(expected) +
                             ", production " + spec.name + " expands " +
                             g.symbol_name(spec.lhs)});
    return;
  }
  if (!check_structural(g, spec, node, path, out)) return;
  if (sizing == SizingCheck::Required) {
    const auto arity = sizing_arity(spec, node.structural);
    if (node.sizing.size() != arity) {
      out.push_back({path, "arity mismatch: " + spec.name + " needs " + std::to_string(arity) +
                               " sizing parameters, got " + std::to_string(node.sizing.size())});
    } else {
      for (double w : node.sizing)
        if (!(w > 0.0) || !std::isfinite(w)) {
          out.push_back({path, "non-positive sizing parameter"});
          break;
        }
    }
  }
  const auto kids = g.child_symbols(spec, node.structural);
  if (kids.size() != node.children.size()) {
    out.push_back({path, "arity mismatch: " + spec.name + " has " + std::to_string(kids.size()) +
                             " children, node has " + std::to_string(node.children.size())});
    return;
  }
  if (spec.rule == ChildRule::Leaf) return;
  for (std::size_t i = 0; i < kids.size(); ++i)
    validate_node(g, node.children[i], kids[i], path + "/" + std::to_string(i), sizing, out);
}

}  // namespace detail

/// Lists every violation; an empty report means the tree derives from the
/// axiom and (with SizingCheck::Required) can be executed.
inline ValidityReport validate_tree(const DerivationTree& tree,
                                    const Grammar& g = facade_grammar(),
                                    SizingCheck sizing = SizingCheck::Required,
                                    RootCheck root = RootCheck::Axiom) {
  ValidityReport report;
  SymbolId expected = g.axiom();
  if (root == RootCheck::AnySymbol && tree.root.prod < g.production_count())
    expected = g.production(tree.root.prod).lhs;
  detail::validate_node(g, tree.root, expected, "root", sizing, report.violations);
  return report;
}

// ---------------------------------------------------------------------------
// Execution

namespace detail {

/// Edges of a weighted split; the final edge lands exactly on origin + extent.
inline void split_edges(double origin, double extent, std::span<const double> weights,
                        std::vector<double>& edges) {
  double total = 0.0;
  for (double w : weights) total += w;
  edges.resize(weights.size() + 1);
  edges[0] = origin;
  double cum = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    cum += weights[i];
    edges[i + 1] = origin + extent * (cum / total);
  }
}

inline void execute_node(const Grammar& g, const Node& node, const Extent& region,
                         RectLayout& out) {
  const auto& spec = g.production(node.prod);
  if (spec.kind == ProductionKind::Assign) {
    out.rects.push_back({spec.label, region.x, region.y, region.w, region.h});
    return;
  }
  std::vector<double> edges;
  const bool along_x = spec.kind == ProductionKind::SplitX || spec.kind == ProductionKind::RepeatX;
  if (along_x)
    split_edges(region.x, region.w, node.sizing, edges);
  else
    split_edges(region.y, region.h, node.sizing, edges);
  for (std::size_t i = 0; i < node.children.size(); ++i) {
    Extent child = region;
    if (along_x) {
      child.x = edges[i];
      child.w = edges[i + 1] - edges[i];
    } else {
      child.y = edges[i];
      child.h = edges[i + 1] - edges[i];
    }
    execute_node(g, node.children[i], child, out);
  }
}

inline void throw_if_invalid(const ValidityReport& report) {
  if (report.ok()) return;
  const auto& v = report.violations.front();
  const bool sizing_only =
      std::all_of(report.violations.begin(), report.violations.end(),
                  [](const Violation& x) { return x.message == "non-positive sizing parameter"; });
  throw Error(sizing_only ? ErrorCode::NonPositiveSizing : ErrorCode::InvalidTree,
              v.path + ": " + v.message);
}

}  // namespace detail

/// Leaf rectangles in depth-first order. SplitX/RepeatX children run left to
/// right, SplitY/RepeatY bottom to top.
inline RectLayout execute(const DerivationTree& tree, const Extent& region = kUnitSquare,
                          const Grammar& g = facade_grammar(),
                          RootCheck root = RootCheck::Axiom) {
  if (!(region.w > 0.0) || !(region.h > 0.0))
    throw Error(ErrorCode::BadInput, "region must have positive extent");
  detail::throw_if_invalid(validate_tree(tree, g, SizingCheck::Required, root));
  RectLayout out;
  detail::execute_node(g, tree.root, region, out);
  return out;
}

namespace detail {
inline void default_node(const Grammar& g, Node& node) {
  const auto& spec = g.production(node.prod);
  node.sizing.assign(sizing_arity(spec, node.structural), 1.0);
  for (auto& ch : node.children) default_node(g, ch);
}
}  // namespace detail

/// Every sizing weight set to 1 (uniform splits); structure untouched.
inline DerivationTree default_sizing(DerivationTree tree, const Grammar& g = facade_grammar(),
                                    RootCheck root = RootCheck::Axiom) {
  detail::throw_if_invalid(validate_tree(tree, g, SizingCheck::Ignored, root));
  detail::default_node(g, tree.root);
  return tree;
}

// Small builders used by tests, the generator and the CLI.
inline Node make_node(const Grammar& g, std::string_view prod, std::vector<double> structural = {},
                      std::vector<double> sizing = {}, std::vector<Node> children = {}) {
  return Node{g.require_production(prod), std::move(structural), std::move(sizing),
              std::move(children)};
}

inline Node make_leaf(const Grammar& g, TerminalLabel label) {
  return make_node(g, label_name(label));
}

}  // namespace facaid
