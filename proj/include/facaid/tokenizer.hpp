#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "facaid/error.hpp"
#include "facaid/geometry.hpp"
#include "facaid/grammar.hpp"
#include "facaid/io.hpp"

namespace facaid {

using Token = int;

/// Token id space, laid out as disjoint contiguous ranges:
///   specials | terminal labels | coordinate bins 0..R | productions |
///   integer argument values | category symbols
class Vocabulary {
 public:
  static constexpr Token kPad = 0;
  static constexpr Token kBos = 1;
  static constexpr Token kEos = 2;
  static constexpr Token kSep = 3;
  static constexpr int kSpecials = 4;

  explicit Vocabulary(int resolution = 100, const Grammar& g = facade_grammar())
      : grammar_(&g), resolution_(resolution) {
    if (resolution < 1) throw Error(ErrorCode::BadInput, "resolution must be positive");
    int lo = 0, hi = -1;
    auto widen = [&](IntDomain d) {
      if (hi < lo) {
        lo = d.lo;
        hi = d.hi;
      } else {
        lo = std::min(lo, d.lo);
        hi = std::max(hi, d.hi);
      }
    };
    for (const auto& p : g.productions()) {
      if (p.rule == ChildRule::Repeat || p.rule == ChildRule::Variadic) widen(p.count);
      if (p.rule == ChildRule::Variadic)
        for (auto c : p.children)
          if (std::find(categories_.begin(), categories_.end(), c) == categories_.end())
            categories_.push_back(c);
      for (const auto& e : p.extras)
        if (e.type == ExtraArg::Type::Integer) widen(e.ints);
    }
    int_lo_ = lo;
    int_count_ = std::max(0, hi - lo + 1);
    label_base_ = kSpecials;
    bin_base_ = label_base_ + static_cast<int>(kLabelCount);
    prod_base_ = bin_base_ + resolution_ + 1;
    int_base_ = prod_base_ + static_cast<int>(g.production_count());
    cat_base_ = int_base_ + int_count_;
    size_ = cat_base_ + static_cast<int>(categories_.size());
  }

  int size() const { return size_; }
  int resolution() const { return resolution_; }
  const Grammar& grammar() const { return *grammar_; }

  Token label_token(TerminalLabel l) const { return label_base_ + static_cast<int>(l); }
  Token bin_token(int bin) const { return bin_base_ + bin; }
  Token production_token(ProductionId p) const { return prod_base_ + p; }
  Token int_token(int v) const { return int_base_ + (v - int_lo_); }
  std::optional<Token> category_token(SymbolId s) const {
    for (std::size_t i = 0; i < categories_.size(); ++i)
      if (categories_[i] == s) return cat_base_ + static_cast<int>(i);
    return std::nullopt;
  }

  std::optional<TerminalLabel> label_of(Token t) const {
    if (t < label_base_ || t >= bin_base_) return std::nullopt;
    return static_cast<TerminalLabel>(t - label_base_);
  }
  std::optional<int> bin_of(Token t) const {
    if (t < bin_base_ || t >= prod_base_) return std::nullopt;
    return t - bin_base_;
  }
  std::optional<ProductionId> production_of(Token t) const {
    if (t < prod_base_ || t >= int_base_) return std::nullopt;
    return static_cast<ProductionId>(t - prod_base_);
  }
  std::optional<int> int_of(Token t) const {
    if (t < int_base_ || t >= cat_base_) return std::nullopt;
    return t - int_base_ + int_lo_;
  }
  std::optional<SymbolId> category_of(Token t) const {
    if (t < cat_base_ || t >= size_) return std::nullopt;
    return categories_[static_cast<std::size_t>(t - cat_base_)];
  }

  int quantize(double v) const {
    return std::clamp(static_cast<int>(std::lround(v * resolution_)), 0, resolution_);
  }
  double dequantize(int bin) const { return static_cast<double>(bin) / resolution_; }

  std::string name(Token t) const {
    switch (t) {
      case kPad: return "<pad>";
      case kBos: return "<bos>";
      case kEos: return "<eos>";
      case kSep: return "<sep>";
      default: break;
    }
    if (auto l = label_of(t)) return "L:" + std::string(label_name(*l));
    if (auto b = bin_of(t)) return "B:" + std::to_string(*b);
    if (auto p = production_of(t)) return "P:" + grammar_->production(*p).name;
    if (auto i = int_of(t)) return "I:" + std::to_string(*i);
    if (auto c = category_of(t)) return "C:" + grammar_->symbol_name(*c);
    throw Error(ErrorCode::MalformedSequence, "token id out of range: " + std::to_string(t));
  }

  std::optional<Token> token(const std::string& name) const {
    for (Token t = 0; t < size_; ++t)
      if (this->name(t) == name) return t;
    return std::nullopt;
  }

  /// {"resolution": R, "tokens": [name of id 0, name of id 1, ...]}
  json to_json() const {
    json names = json::array();
    for (Token t = 0; t < size_; ++t) names.push_back(name(t));
    return {{"resolution", resolution_}, {"tokens", std::move(names)}};
  }

  /// Rebuilds from the grammar and checks the stored table matches exactly.
  static Vocabulary from_json(const json& j, const Grammar& g = facade_grammar()) {
    Vocabulary v(j.at("resolution").get<int>(), g);
    if (j.at("tokens") != v.to_json()["tokens"])
      throw Error(ErrorCode::CheckpointLoadFailure, "vocabulary does not match the grammar");
    return v;
  }

 private:
  const Grammar* grammar_;
  int resolution_;
  std::vector<SymbolId> categories_;
  int int_lo_ = 0, int_count_ = 0;
  int label_base_ = 0, bin_base_ = 0, prod_base_ = 0, int_base_ = 0, cat_base_ = 0, size_ = 0;
};

struct TokenSeq {
  std::vector<Token> tokens;
  std::vector<int> global_pos;
  std::vector<int> local_pos;

  std::size_t size() const { return tokens.size(); }
  void push(Token t, int local) {
    global_pos.push_back(static_cast<int>(tokens.size()));
    tokens.push_back(t);
    local_pos.push_back(local);
  }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

/// Default sequence limits (tokens).
inline constexpr int kMaxInputTokens = 512;
inline constexpr int kMaxOutputTokens = 768;
/// Largest local index: production + count + 8 categories + SEP.
inline constexpr int kMaxLocalIndex = 16;

// ---------------------------------------------------------------------------
// Layouts

/// Five tokens per rect (label, x, y, w, h), rects ordered by quantized
/// (y, x, label, w, h). Local indices cycle 0..4; no BOS/EOS.
inline TokenSeq encode_layout(const RectLayout& layout, const Vocabulary& vocab,
                              int max_tokens = kMaxInputTokens) {
  if (static_cast<long>(layout.rects.size()) * 5 > max_tokens)
    throw Error(ErrorCode::TooManyRects, std::to_string(layout.rects.size()) + " rects exceed " +
                                             std::to_string(max_tokens) + " input tokens");
  using Key = std::tuple<int, int, int, int, int>;
  std::vector<Key> keys;
  keys.reserve(layout.rects.size());
  for (const auto& r : layout.rects)
    keys.emplace_back(vocab.quantize(r.y), vocab.quantize(r.x), static_cast<int>(r.label),
                      vocab.quantize(r.w), vocab.quantize(r.h));
  std::sort(keys.begin(), keys.end());
  TokenSeq seq;
  for (const auto& [y, x, label, w, h] : keys) {
    seq.push(vocab.label_token(static_cast<TerminalLabel>(label)), 0);
    seq.push(vocab.bin_token(x), 1);
    seq.push(vocab.bin_token(y), 2);
    seq.push(vocab.bin_token(w), 3);
    seq.push(vocab.bin_token(h), 4);
  }
  return seq;
}

inline RectLayout decode_layout(const TokenSeq& seq, const Vocabulary& vocab) {
  if (seq.tokens.size() % 5 != 0)
    throw Error(ErrorCode::MalformedSequence, "layout sequence length is not a multiple of 5");
  RectLayout out;
  for (std::size_t i = 0; i < seq.tokens.size(); i += 5) {
    const auto label = vocab.label_of(seq.tokens[i]);
    if (!label) throw Error(ErrorCode::MalformedSequence, "expected a terminal label at " + std::to_string(i));
    double v[4];
    for (std::size_t k = 0; k < 4; ++k) {
      const auto bin = vocab.bin_of(seq.tokens[i + 1 + k]);
      if (!bin)
        throw Error(ErrorCode::MalformedSequence,
                    "coordinate token out of range at " + std::to_string(i + 1 + k));
      v[k] = vocab.dequantize(*bin);
    }
    out.rects.push_back({*label, v[0], v[1], v[2], v[3]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Derivation trees

namespace detail {

inline Token argument_token(const Vocabulary& vocab, const ProductionSpec& spec, std::size_t index,
                            double value, std::size_t lead) {
  if (index < lead) {
    if (index == 0) return vocab.int_token(static_cast<int>(value));
    return *vocab.category_token(spec.children[static_cast<std::size_t>(value)]);
  }
  const auto& e = spec.extras[index - lead];
  if (e.type == ExtraArg::Type::Integer) return vocab.int_token(static_cast<int>(value));
  return vocab.bin_token(vocab.quantize((value - e.real_lo) / (e.real_hi - e.real_lo)));
}

}  // namespace detail

/// Breadth-first groups [production, structural args..., SEP] between BOS and
/// EOS. Local index counts position within a group; BOS and EOS carry 0.
inline TokenSeq encode_tree(const DerivationTree& tree, const Vocabulary& vocab,
                            RootCheck root = RootCheck::Axiom) {
  const auto& g = vocab.grammar();
  detail::throw_if_invalid(validate_tree(tree, g, SizingCheck::Ignored, root));
  TokenSeq seq;
  seq.push(Vocabulary::kBos, 0);
  std::deque<const Node*> queue{&tree.root};
  while (!queue.empty()) {
    const Node& n = *queue.front();
    queue.pop_front();
    const auto& spec = g.production(n.prod);
    int local = 0;
    seq.push(vocab.production_token(n.prod), local++);
    const std::size_t lead =
        n.structural.empty() ? 0 : Grammar::child_arg_count(spec, static_cast<int>(n.structural[0]));
    for (std::size_t i = 0; i < n.structural.size(); ++i)
      seq.push(detail::argument_token(vocab, spec, i, n.structural[i], lead), local++);
    seq.push(Vocabulary::kSep, local);
    for (const auto& c : n.children) queue.push_back(&c);
  }
  seq.push(Vocabulary::kEos, 0);
  return seq;
}

/// Rebuilds the unique tree whose breadth-first encoding is `seq`. Sizing is
/// left empty. `root` defaults to the grammar's axiom.
inline DerivationTree decode_tree(const std::vector<Token>& tokens, const Vocabulary& vocab,
                                  std::optional<SymbolId> root = std::nullopt) {
  const auto& g = vocab.grammar();
  auto fail = [](const std::string& why) { throw Error(ErrorCode::MalformedSequence, why); };
  struct Flat {
    ProductionId prod;
    std::vector<double> structural;
    std::vector<std::size_t> children;
  };
  std::vector<Flat> nodes;
  // pending slots: (parent index or npos for root, expected symbol)
  constexpr auto kNone = static_cast<std::size_t>(-1);
  std::deque<std::pair<std::size_t, SymbolId>> pending{{kNone, root.value_or(g.axiom())}};

  std::size_t i = 0;
  auto next = [&]() -> Token {
    if (i >= tokens.size()) fail("early end");
    return tokens[i++];
  };
  if (next() != Vocabulary::kBos) fail("missing BOS");
  while (true) {
    const Token t = next();
    if (t == Vocabulary::kEos) {
      if (!pending.empty()) fail("dangling non-terminal " + g.symbol_name(pending.front().second));
      break;
    }
    if (pending.empty()) fail("group after the tree is complete");
    const auto prod = vocab.production_of(t);
    if (!prod) fail("expected a production token at " + std::to_string(i - 1));
    const auto [parent, symbol] = pending.front();
    pending.pop_front();
    const auto& spec = g.production(*prod);
    if (spec.lhs != symbol)
      fail("production " + spec.name + " cannot expand " + g.symbol_name(symbol));
    Flat node{*prod, {}, {}};
    std::size_t lead = 0;
    if (spec.rule == ChildRule::Repeat || spec.rule == ChildRule::Variadic) {
      const auto count = vocab.int_of(next());
      if (!count || !spec.count.contains(*count)) fail("wrong arity: bad count for " + spec.name);
      node.structural.push_back(*count);
      lead = Grammar::child_arg_count(spec, *count);
      for (std::size_t k = 1; k < lead; ++k) {
        const auto cat = vocab.category_of(next());
        auto it = cat ? std::find(spec.children.begin(), spec.children.end(), *cat) : spec.children.end();
        if (it == spec.children.end()) fail("wrong arity: bad category for " + spec.name);
        node.structural.push_back(static_cast<double>(it - spec.children.begin()));
      }
    }
    for (const auto& e : spec.extras) {
      const Token a = next();
      if (e.type == ExtraArg::Type::Integer) {
        const auto v = vocab.int_of(a);
        if (!v || !e.ints.contains(*v)) fail("bad integer argument for " + spec.name);
        node.structural.push_back(*v);
      } else {
        const auto b = vocab.bin_of(a);
        if (!b) fail("bad real argument for " + spec.name);
        node.structural.push_back(e.real_lo + (e.real_hi - e.real_lo) * vocab.dequantize(*b));
      }
    }
    if (next() != Vocabulary::kSep) fail("wrong arity: group for " + spec.name + " not closed by SEP");
    const std::size_t index = nodes.size();
    if (parent != kNone) nodes[parent].children.push_back(index);
    for (auto child : g.child_symbols(spec, node.structural)) pending.emplace_back(index, child);
    nodes.push_back(std::move(node));
  }
  if (i != tokens.size()) fail("tokens after EOS");

  std::function<Node(std::size_t)> build = [&](std::size_t k) {
    Node n{nodes[k].prod, std::move(nodes[k].structural), {}, {}};
    for (auto c : nodes[k].children) n.children.push_back(build(c));
    return n;
  };
  return {build(0)};
}

inline DerivationTree decode_tree(const TokenSeq& seq, const Vocabulary& vocab,
                                  std::optional<SymbolId> root = std::nullopt) {
  return decode_tree(seq.tokens, vocab, root);
}

/// Local index for the token following `prev` in an output sequence.
inline int next_local_index(Token prev, int prev_local) {
  return (prev == Vocabulary::kBos || prev == Vocabulary::kSep) ? 0 : prev_local + 1;
}

}  // namespace facaid
