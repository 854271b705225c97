#include <gtest/gtest.h>

#include <random>

#include "facaid/grammar.hpp"
#include "facaid/io.hpp"

using namespace facaid;

namespace {

const Grammar& g = facade_grammar();

Node leaf(TerminalLabel l) { return make_leaf(g, l); }

Node blank_floor(int tiles) {
  std::vector<Node> kids(static_cast<std::size_t>(tiles), make_node(g, "P10"));
  return make_node(g, "P4", {double(tiles)}, std::vector<double>(tiles, 1.0), std::move(kids));
}

// Ground floor 0.35 with a shop cell and a door cell, two blank upper floors
// of three tiles each.
DerivationTree two_floor_tree() {
  Node shop = make_node(g, "P11", {}, {1, 2, 1},
                        {leaf(TerminalLabel::Wall), leaf(TerminalLabel::Shop), leaf(TerminalLabel::Wall)});
  Node door = make_node(g, "P12", {}, {3, 1}, {leaf(TerminalLabel::Door), leaf(TerminalLabel::Wall)});
  Node ground = make_node(g, "P6", {2, 0, 1}, {1, 1}, {shop, door});
  Node upper = make_node(g, "P3", {2}, {1, 1}, {blank_floor(3), blank_floor(3)});
  return {make_node(g, "P1", {}, {0.35, 0.65}, {ground, upper})};
}

void expect_rect(const Rect& r, TerminalLabel l, double x, double y, double w, double h) {
  EXPECT_EQ(r.label, l);
  EXPECT_NEAR(r.x, x, 1e-12);
  EXPECT_NEAR(r.y, y, 1e-12);
  EXPECT_NEAR(r.w, w, 1e-12);
  EXPECT_NEAR(r.h, h, 1e-12);
}

}  // namespace

TEST(Grammar, RuleSetShape) {
  EXPECT_EQ(g.production_count(), 19u);
  EXPECT_EQ(g.symbol_name(g.axiom()), "Facade");
  for (const auto& p : g.productions()) {
    if (p.rule == ChildRule::Repeat) {
      EXPECT_GE(p.count.lo, 1);
      EXPECT_LE(p.count.hi, 8);
    }
    if (p.kind == ProductionKind::SplitX || p.kind == ProductionKind::SplitY) {
      if (p.rule == ChildRule::Fixed) EXPECT_GE(p.children.size(), 2u);
      if (p.rule == ChildRule::Variadic) EXPECT_GE(p.count.lo, 2);
    }
    if (p.kind == ProductionKind::Assign) EXPECT_TRUE(p.children.empty());
  }
}

TEST(Execute, SingleAssignCoversRegion) {
  DerivationTree t{leaf(TerminalLabel::Wall)};
  auto out = execute(t, kUnitSquare, g, RootCheck::AnySymbol);
  ASSERT_EQ(out.rects.size(), 1u);
  expect_rect(out.rects[0], TerminalLabel::Wall, 0, 0, 1, 1);
  // Against the axiom a bare terminal is not derivable.
  EXPECT_FALSE(validate_tree(t).ok());
}

TEST(Execute, SplitYFollowsWeights) {
  // P12 is the rule set's two-child SplitY (Door below Wall).
  DerivationTree t{make_node(g, "P12", {}, {0.3, 0.7},
                             {leaf(TerminalLabel::Door), leaf(TerminalLabel::Wall)})};
  auto out = execute(t, kUnitSquare, g, RootCheck::AnySymbol);
  ASSERT_EQ(out.rects.size(), 2u);
  expect_rect(out.rects[0], TerminalLabel::Door, 0, 0, 1, 0.3);
  expect_rect(out.rects[1], TerminalLabel::Wall, 0, 0.3, 1, 0.7);
}

TEST(Execute, RepeatXUniformThirds) {
  DerivationTree t{make_node(g, "P13", {3}, {1, 1, 1},
                             {make_node(g, "P8", {}, {1, 1, 1}, {leaf(TerminalLabel::Wall), leaf(TerminalLabel::Window), leaf(TerminalLabel::Wall)}),
                              make_node(g, "P8", {}, {1, 1, 1}, {leaf(TerminalLabel::Wall), leaf(TerminalLabel::Window), leaf(TerminalLabel::Wall)}),
                              make_node(g, "P8", {}, {1, 1, 1}, {leaf(TerminalLabel::Wall), leaf(TerminalLabel::Window), leaf(TerminalLabel::Wall)})})};
  auto out = execute(t, kUnitSquare, g, RootCheck::AnySymbol);
  ASSERT_EQ(out.rects.size(), 9u);
  for (int i = 0; i < 3; ++i) {
    const auto& window = out.rects[static_cast<std::size_t>(3 * i + 1)];
    EXPECT_EQ(window.label, TerminalLabel::Window);
    EXPECT_NEAR(window.x, i / 3.0, 1e-15);
    EXPECT_NEAR(window.w, 1 / 3.0, 1e-15);
  }
}

TEST(Execute, TwoFloorFacadeMatchesHandExpansion) {
  auto t = two_floor_tree();
  ASSERT_TRUE(validate_tree(t).ok());
  auto out = execute(t);
  ASSERT_EQ(out.rects.size(), 11u);
  // Shop cell: x in [0, .5], y edges 0, .35/4, .35*3/4, .35
  expect_rect(out.rects[0], TerminalLabel::Wall, 0, 0, 0.5, 0.0875);
  expect_rect(out.rects[1], TerminalLabel::Shop, 0, 0.0875, 0.5, 0.175);
  expect_rect(out.rects[2], TerminalLabel::Wall, 0, 0.2625, 0.5, 0.0875);
  // Door cell: weights 3:1
  expect_rect(out.rects[3], TerminalLabel::Door, 0.5, 0, 0.5, 0.2625);
  expect_rect(out.rects[4], TerminalLabel::Wall, 0.5, 0.2625, 0.5, 0.0875);
  // Floors [.35, .675] and [.675, 1], three tiles each
  for (int f = 0; f < 2; ++f)
    for (int c = 0; c < 3; ++c)
      expect_rect(out.rects[static_cast<std::size_t>(5 + 3 * f + c)], TerminalLabel::Wall, c / 3.0,
                  0.35 + 0.325 * f, 1 / 3.0, 0.325);
  EXPECT_TRUE(audit_tiling(out).ok());
}

TEST(Execute, Errors) {
  auto t = two_floor_tree();
  t.root.children[0].children[0].sizing[1] = 0.0;
  try {
    execute(t);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonPositiveSizing);
  }
  auto u = two_floor_tree();
  u.root.children[1].children.pop_back();
  try {
    execute(u);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidTree);
  }
  auto v = two_floor_tree();
  v.root.prod = 999;
  EXPECT_THROW(execute(v), Error);
}

TEST(Validate, RepeatCountZero) {
  auto t = two_floor_tree();
  auto& floor = t.root.children[1].children[0];
  floor.structural[0] = 0;
  auto report = validate_tree(t);
  ASSERT_FALSE(report.ok());
  EXPECT_EQ(report.violations[0].message, "count outside [1,8]");
  EXPECT_EQ(report.violations[0].path, "root/1/0");
}

TEST(Validate, SplitSizingArity) {
  auto t = two_floor_tree();
  // P11 (SplitY, three children) with two sizing parameters
  t.root.children[0].children[0].sizing = {1, 1};
  auto report = validate_tree(t);
  ASSERT_EQ(report.violations.size(), 1u);
  EXPECT_NE(report.violations[0].message.find("arity"), std::string::npos);
}

TEST(Validate, ChildSymbolMismatchAndNonLeaf) {
  auto t = two_floor_tree();
  t.root.children[0] = blank_floor(2);  // Floor where GroundFloor is expected
  auto report = validate_tree(t);
  ASSERT_FALSE(report.ok());
  EXPECT_NE(report.violations[0].message.find("child symbol mismatch"), std::string::npos);

  auto u = two_floor_tree();
  u.root.children[1].children[0].children[0].children.push_back(leaf(TerminalLabel::Wall));
  EXPECT_FALSE(validate_tree(u).ok());
}

TEST(DefaultSizing, UniformAndIdempotent) {
  auto t = strip_sizing(two_floor_tree());
  EXPECT_FALSE(validate_tree(t).ok());
  EXPECT_TRUE(validate_tree(t, g, SizingCheck::Ignored).ok());
  auto d = default_sizing(t);
  EXPECT_TRUE(validate_tree(d).ok());
  EXPECT_EQ(default_sizing(d), d);
  auto out = execute(d);
  // equal ground floor and upper body, equal floors
  EXPECT_NEAR(out.rects[0].h + out.rects[1].h + out.rects[2].h, 0.5, 1e-15);
  EXPECT_NEAR(out.rects[5].h, 0.25, 1e-15);
  EXPECT_NEAR(out.rects[8].h, 0.25, 1e-15);
}

TEST(DefaultSizing, MissingSplitSizingGivesHalves) {
  DerivationTree t{make_node(g, "P12", {}, {}, {leaf(TerminalLabel::Door), leaf(TerminalLabel::Wall)})};
  auto d = default_sizing(t, g, RootCheck::AnySymbol);
  EXPECT_EQ(d.root.sizing, (std::vector<double>{1.0, 1.0}));
  auto out = execute(d, kUnitSquare, g, RootCheck::AnySymbol);
  EXPECT_EQ(out.rects[0].h, 0.5);
  EXPECT_EQ(out.rects[1].y, 0.5);
}

TEST(DefaultSizing, RejectsStructurallyInvalid) {
  auto t = two_floor_tree();
  t.root.children[1].structural = {9};
  EXPECT_THROW(default_sizing(t), Error);
}

TEST(Execute, ScaleEquivarianceAndDeterminism) {
  auto t = two_floor_tree();
  const auto base = execute(t);
  // Power-of-two factors are exact in binary floating point.
  for (double k : {0.25, 2.0, 1024.0}) {
    auto s = t;
    for (auto& w : s.root.children[0].children[0].sizing) w *= k;
    for (auto& w : s.root.sizing) w *= k;
    EXPECT_EQ(execute(s), base);
  }
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> k(0.01, 100.0);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = t;
    const double f = k(rng);
    for (auto& w : s.root.children[1].sizing) w *= f;
    auto out = execute(s);
    for (std::size_t i = 0; i < out.rects.size(); ++i) {
      EXPECT_NEAR(out.rects[i].y, base.rects[i].y, 1e-15);
      EXPECT_NEAR(out.rects[i].h, base.rects[i].h, 1e-15);
    }
  }
  EXPECT_EQ(execute(t), execute(t));
}

TEST(Io, TreeJsonRoundTrip) {
  auto t = two_floor_tree();
  auto j = tree_to_json(t);
  EXPECT_EQ(j["root"]["prod"], "P1");
  EXPECT_EQ(j["root"]["children"][0]["structural"][1], "ShopCell");
  EXPECT_EQ(tree_from_json(json::parse(j.dump())), t);
}

TEST(Io, LayoutJsonKeepsPrecision) {
  RectLayout l{{{TerminalLabel::Window, 0.1 + 0.2, 1.0 / 3.0, 0.123456789123, 0.5}}};
  auto text = layout_to_json(l).dump();
  EXPECT_EQ(layout_from_json(json::parse(text)), l);
  EXPECT_THROW(layout_from_json(json::parse(R"({"rects":[{"label":"Tree","x":0,"y":0,"w":1,"h":1}]})")),
               Error);
}

TEST(Io, GrammarTableAndHash) {
  auto j = grammar_to_json();
  EXPECT_EQ(j["productions"].size(), 19u);
  EXPECT_EQ(j["productions"][2]["kind"], "RepeatY");
  EXPECT_EQ(grammar_hash().size(), 16u);
  EXPECT_EQ(grammar_hash(), grammar_hash());
}
