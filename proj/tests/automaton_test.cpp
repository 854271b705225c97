#include <gtest/gtest.h>

#include <random>

#include "facaid/automaton.hpp"
#include "facaid/generator.hpp"

using namespace facaid;

namespace {

const Grammar& g = facade_grammar();

std::vector<Token> allowed(const TokenMask& m) {
  std::vector<Token> out;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) out.push_back(static_cast<Token>(i));
  return out;
}

// Random walk through the mask until EOS.
std::vector<Token> random_decode(const DecodeAutomaton& a, std::mt19937_64& rng, int budget) {
  std::vector<Token> seq{Vocabulary::kBos};
  auto s = a.initial_state(std::nullopt, budget);
  while (!s.finished) {
    auto options = allowed(a.valid_next_tokens(s));
    std::uniform_int_distribution<std::size_t> pick(0, options.size() - 1);
    const Token t = options[pick(rng)];
    s = a.advance(s, t);
    seq.push_back(t);
  }
  return seq;
}

}  // namespace

TEST(Automaton, InitialStateAllowsOnlyAxiomRules) {
  Vocabulary v;
  DecodeAutomaton a(v);
  auto s = a.initial_state();
  EXPECT_EQ(allowed(a.valid_next_tokens(s)),
            (std::vector<Token>{v.production_token(*g.production_id("P1")),
                                v.production_token(*g.production_id("P2"))}));
}

TEST(Automaton, RepeatYCountDomain) {
  Vocabulary v;
  DecodeAutomaton a(v);
  auto rec = generate_record(4, 4);
  auto seq = encode_tree(rec.tree, v).tokens;
  auto s = a.initial_state();
  std::size_t i = 1;
  // walk to the group of UpperBody and stop right after its production token
  for (; i < seq.size(); ++i) {
    s = a.advance(s, seq[i]);
    if (seq[i] == v.production_token(*g.production_id("P3"))) break;
  }
  std::vector<Token> counts;
  for (int c = 1; c <= 6; ++c) counts.push_back(v.int_token(c));
  EXPECT_EQ(allowed(a.valid_next_tokens(s)), counts);
}

TEST(Automaton, OnlyEosWhenComplete) {
  Vocabulary v;
  DecodeAutomaton a(v);
  auto seq = encode_tree(generate_record(2, 9).tree, v).tokens;
  seq.pop_back();
  auto s = a.replay(seq);
  EXPECT_TRUE(s.terminal());
  EXPECT_EQ(allowed(a.valid_next_tokens(s)), std::vector<Token>{Vocabulary::kEos});
  s = a.advance(s, Vocabulary::kEos);
  EXPECT_TRUE(s.finished);
  EXPECT_TRUE(allowed(a.valid_next_tokens(s)).empty());
}

TEST(Automaton, IllegalTransitionAndReplayDeterminism) {
  Vocabulary v;
  DecodeAutomaton a(v);
  auto s = a.initial_state();
  try {
    a.advance(s, Vocabulary::kEos);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IllegalTransition);
  }
  auto seq = encode_tree(generate_record(3, 1).tree, v).tokens;
  for (std::size_t n = 1; n < seq.size(); n += 7) {
    std::vector<Token> prefix(seq.begin(), seq.begin() + static_cast<long>(n));
    EXPECT_EQ(a.replay(prefix), a.replay(prefix));
  }
}

TEST(Automaton, CompletenessOverGeneratedTrees) {
  Vocabulary v;
  DecodeAutomaton a(v);
  for (std::uint64_t i = 0; i < 10000; ++i) {
    auto seq = encode_tree(generate_record(31, i).tree, v).tokens;
    auto s = a.initial_state();
    for (std::size_t k = 1; k < seq.size(); ++k) {
      ASSERT_TRUE(a.valid_next_tokens(s)[static_cast<std::size_t>(seq[k])]) << "record " << i << " token " << k;
      s = a.advance(s, seq[k]);
    }
    ASSERT_TRUE(s.finished);
  }
}

TEST(Automaton, MinimalLengthMatchesHandBuiltTree) {
  Vocabulary v;
  DecodeAutomaton a(v);
  // Smallest facade: two wall cells on the ground floor, one blank tile above.
  Node ground = make_node(g, "P6", {2, 2, 2}, {}, {make_node(g, "P14"), make_node(g, "P14")});
  Node floor = make_node(g, "P4", {1}, {}, {make_node(g, "P10")});
  Node upper = make_node(g, "P3", {1}, {}, {floor});
  DerivationTree t{make_node(g, "P1", {}, {}, {ground, upper})};
  const auto len = encode_tree(t, v).size();
  EXPECT_EQ(len, 21u);
  EXPECT_EQ(a.min_length(g.axiom()) + 2, static_cast<std::int64_t>(len));
  EXPECT_EQ(a.min_length(static_cast<SymbolId>(TerminalLabel::Wall)), 2);

  EXPECT_THROW(a.initial_state(std::nullopt, 20), Error);
  std::mt19937_64 rng(1);
  for (int k = 0; k < 20; ++k) EXPECT_EQ(random_decode(a, rng, 21).size(), 21u);
}

TEST(Automaton, RandomWalksAlwaysParseWithinBudget) {
  Vocabulary v;
  DecodeAutomaton a(v);
  std::mt19937_64 rng(7);
  for (int budget : {21, 40, 90, 200, kMaxOutputTokens}) {
    for (int k = 0; k < 200; ++k) {
      auto seq = random_decode(a, rng, budget);
      ASSERT_LE(static_cast<int>(seq.size()), budget);
      auto tree = decode_tree(seq, v);
      EXPECT_NO_THROW(execute(default_sizing(tree)));
    }
  }
}

TEST(Nullify, Examples) {
  auto out = nullify_and_renormalize(std::vector<double>{0.5, 0.3, 0.2}, TokenMask{1, 0, 1});
  EXPECT_NEAR(out[0], 0.714286, 1e-6);
  EXPECT_EQ(out[1], 0.0);
  EXPECT_NEAR(out[2], 0.285714, 1e-6);

  std::vector<double> p{0.1, 0.6, 0.3};
  EXPECT_EQ(nullify_and_renormalize(p, TokenMask{1, 1, 1}), p);

  EXPECT_EQ(nullify_and_renormalize(std::vector<double>{1, 0, 0}, TokenMask{0, 1, 1}),
            (std::vector<double>{0, 0.5, 0.5}));
  try {
    nullify_and_renormalize(p, TokenMask{0, 0, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyMask);
  }
}

TEST(Nullify, NeverLowersAllowedProbability) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> p(20);
    double sum = 0;
    for (auto& x : p) sum += x = u(rng);
    for (auto& x : p) x /= sum;
    TokenMask m(20);
    for (auto& b : m) b = u(rng) < 0.5;
    m[static_cast<std::size_t>(trial % 20)] = 1;
    auto q = nullify_and_renormalize(p, m);
    for (std::size_t i = 0; i < p.size(); ++i)
      if (m[i]) EXPECT_GE(q[i], p[i] - 1e-15);
  }
}
