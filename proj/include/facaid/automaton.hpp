#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <vector>

#include "facaid/error.hpp"
#include "facaid/grammar.hpp"
#include "facaid/tokenizer.hpp"

namespace facaid {

using TokenMask = std::vector<char>;

/// Position of a partial output sequence inside the grammar. Value type: the
/// same prefix always yields an equal state.
struct DecodeState {
  std::deque<SymbolId> frontier;        // symbols still to expand, BFS order
  std::int64_t frontier_cost = 0;       // sum of their minimal encoding lengths
  std::optional<ProductionId> current;  // production of the open group
  std::vector<double> args;             // structural args read so far in the open group
  int used = 0;                         // tokens consumed, BOS included
  int budget = kMaxOutputTokens;
  bool finished = false;                // EOS consumed

  bool group_closed() const { return !current; }
  bool terminal() const { return frontier.empty() && !current; }
  friend bool operator==(const DecodeState&, const DecodeState&) = default;
};

class DecodeAutomaton {
 public:
  static constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;

  explicit DecodeAutomaton(const Vocabulary& vocab) : vocab_(&vocab), g_(&vocab.grammar()) {
    min_len_.assign(g_->symbol_count(), kInf);
    // Fixed point: minimal token count of a group subtree rooted at each symbol.
    for (bool changed = true; changed;) {
      changed = false;
      for (ProductionId p = 0; p < g_->production_count(); ++p) {
        const auto c = sat_add(1, group_rest(p, {}));
        auto& m = min_len_[g_->production(p).lhs];
        if (c < m) {
          m = c;
          changed = true;
        }
      }
    }
  }

  const Vocabulary& vocab() const { return *vocab_; }

  /// Shortest encoding (in tokens, BOS/EOS excluded) of any tree rooted at `s`.
  std::int64_t min_length(SymbolId s) const { return min_len_.at(s); }

  /// State after BOS.
  DecodeState initial_state(std::optional<SymbolId> root = std::nullopt,
                            int budget = kMaxOutputTokens) const {
    DecodeState s;
    const SymbolId r = root.value_or(g_->axiom());
    s.frontier.push_back(r);
    s.frontier_cost = min_len_.at(r);
    s.used = 1;
    s.budget = budget;
    if (s.used + min_remaining(s) > budget)
      throw Error(ErrorCode::LengthBudgetExhausted,
                  "shortest procedure needs " + std::to_string(s.used + min_remaining(s)) + " tokens, budget is " +
                      std::to_string(budget));
    return s;
  }

  /// Fewest tokens (EOS included) that complete a valid sequence from `s`.
  std::int64_t min_remaining(const DecodeState& s) const {
    if (s.finished) return 0;
    std::int64_t c = sat_add(s.frontier_cost, 1);
    if (s.current) c = sat_add(c, group_rest(*s.current, s.args));
    return c;
  }

  TokenMask valid_next_tokens(const DecodeState& s) const {
    TokenMask mask(static_cast<std::size_t>(vocab_->size()), 0);
    for_each_candidate(s, [&](Token t, std::int64_t cost) {
      if (cost <= s.budget) mask[static_cast<std::size_t>(t)] = 1;
    });
    return mask;
  }

  DecodeState advance(DecodeState s, Token t) const {
    bool ok = false;
    for_each_candidate(s, [&](Token c, std::int64_t cost) { ok = ok || (c == t && cost <= s.budget); });
    if (!ok)
      throw Error(ErrorCode::IllegalTransition,
                  "token " + safe_name(t) + " not allowed after " + std::to_string(s.used) + " tokens");
    apply(s, t);
    return s;
  }

  /// Replays a full or partial sequence starting with BOS.
  DecodeState replay(const std::vector<Token>& tokens, std::optional<SymbolId> root = std::nullopt,
                     int budget = kMaxOutputTokens) const {
    if (tokens.empty() || tokens[0] != Vocabulary::kBos)
      throw Error(ErrorCode::IllegalTransition, "sequence must start with BOS");
    auto s = initial_state(root, budget);
    for (std::size_t i = 1; i < tokens.size(); ++i) s = advance(std::move(s), tokens[i]);
    return s;
  }

 private:
  static std::int64_t sat_add(std::int64_t a, std::int64_t b) { return std::min(kInf, a + b); }

  std::string safe_name(Token t) const {
    return (t >= 0 && t < vocab_->size()) ? vocab_->name(t) : std::to_string(t);
  }

  std::int64_t child_min(const ProductionSpec& spec) const {
    std::int64_t m = kInf;
    for (auto c : spec.children) m = std::min(m, min_len_[c]);
    return m;
  }

  /// Tokens still needed by an open group given the args read so far: the
  /// remaining args, SEP, and the cheapest subtrees for its children.
  std::int64_t group_rest(ProductionId p, const std::vector<double>& args) const {
    const auto& spec = g_->production(p);
    const bool counted = spec.rule == ChildRule::Repeat || spec.rule == ChildRule::Variadic;
    if (counted && args.empty()) {
      std::int64_t best = kInf;
      for (int c = spec.count.lo; c <= spec.count.hi; ++c)
        best = std::min(best, sat_add(1, group_rest(p, {double(c)})));
      return best;
    }
    const int count = counted ? static_cast<int>(args[0]) : 0;
    const std::size_t total = Grammar::child_arg_count(spec, count) + spec.extras.size();
    std::int64_t cost = static_cast<std::int64_t>(total - args.size()) + 1;
    switch (spec.rule) {
      case ChildRule::Leaf: break;
      case ChildRule::Fixed:
        for (auto c : spec.children) cost = sat_add(cost, min_len_[c]);
        break;
      case ChildRule::Repeat:
        for (int i = 0; i < count; ++i) cost = sat_add(cost, min_len_[spec.children[0]]);
        break;
      case ChildRule::Variadic: {
        const auto cheapest = child_min(spec);
        for (int i = 0; i < count; ++i) {
          const auto k = static_cast<std::size_t>(i) + 1;
          cost = sat_add(cost, k < args.size() ? min_len_[spec.children[static_cast<std::size_t>(args[k])]] : cheapest);
        }
        break;
      }
    }
    return cost;
  }

  /// Calls f(token, total length of the shortest completion after taking it).
  template <class F>
  void for_each_candidate(const DecodeState& s, F&& f) const {
    if (s.finished) return;
    const std::int64_t after = s.used + 1;
    if (!s.current) {
      if (s.frontier.empty()) {
        f(Vocabulary::kEos, after);
        return;
      }
      const SymbolId sym = s.frontier.front();
      const std::int64_t rest = s.frontier_cost - min_len_[sym] + 1;
      for (auto p : g_->productions_for(sym))
        f(vocab_->production_token(p), sat_add(after, sat_add(rest, group_rest(p, {}))));
      return;
    }
    const auto& spec = g_->production(*s.current);
    const std::int64_t rest = s.frontier_cost + 1;
    auto with = [&](double v) {
      auto a = s.args;
      a.push_back(v);
      return sat_add(after, sat_add(rest, group_rest(*s.current, a)));
    };
    const bool counted = spec.rule == ChildRule::Repeat || spec.rule == ChildRule::Variadic;
    const std::size_t k = s.args.size();
    if (counted && k == 0) {
      for (int c = spec.count.lo; c <= spec.count.hi; ++c) f(vocab_->int_token(c), with(c));
      return;
    }
    const std::size_t lead = counted ? Grammar::child_arg_count(spec, static_cast<int>(s.args[0])) : 0;
    if (k < lead) {
      for (std::size_t i = 0; i < spec.children.size(); ++i)
        f(*vocab_->category_token(spec.children[i]), with(static_cast<double>(i)));
      return;
    }
    if (k < lead + spec.extras.size()) {
      const auto& e = spec.extras[k - lead];
      if (e.type == ExtraArg::Type::Integer) {
        for (int v = e.ints.lo; v <= e.ints.hi; ++v) f(vocab_->int_token(v), with(v));
      } else {
        const auto c = with(e.real_lo);
        for (int b = 0; b <= vocab_->resolution(); ++b) f(vocab_->bin_token(b), c);
      }
      return;
    }
    f(Vocabulary::kSep, sat_add(after, sat_add(rest, group_rest(*s.current, s.args) - 1)));
  }

  void apply(DecodeState& s, Token t) const {
    ++s.used;
    if (t == Vocabulary::kEos) {
      s.finished = true;
      return;
    }
    if (!s.current) {
      const SymbolId sym = s.frontier.front();
      s.frontier.pop_front();
      s.frontier_cost -= min_len_[sym];
      s.current = *vocab_->production_of(t);
      return;
    }
    const auto& spec = g_->production(*s.current);
    if (t == Vocabulary::kSep) {
      for (auto c : g_->child_symbols(spec, s.args)) {
        s.frontier.push_back(c);
        s.frontier_cost = sat_add(s.frontier_cost, min_len_[c]);
      }
      s.current.reset();
      s.args.clear();
      return;
    }
    const bool counted = spec.rule == ChildRule::Repeat || spec.rule == ChildRule::Variadic;
    const std::size_t k = s.args.size();
    const std::size_t lead = !counted ? 0 : k == 0 ? 1 : Grammar::child_arg_count(spec, static_cast<int>(s.args[0]));
    if (counted && k == 0) {
      s.args.push_back(*vocab_->int_of(t));
    } else if (k < lead) {
      const auto cat = *vocab_->category_of(t);
      s.args.push_back(static_cast<double>(std::find(spec.children.begin(), spec.children.end(), cat) -
                                           spec.children.begin()));
    } else {
      const auto& e = spec.extras[k - lead];
      if (e.type == ExtraArg::Type::Integer)
        s.args.push_back(*vocab_->int_of(t));
      else
        s.args.push_back(e.real_lo + (e.real_hi - e.real_lo) * vocab_->dequantize(*vocab_->bin_of(t)));
    }
  }

  const Vocabulary* vocab_;
  const Grammar* g_;
  std::vector<std::int64_t> min_len_;
};

/// Zeroes entries outside `mask` and rescales the rest to sum 1. Falls back to
/// uniform over the mask when every allowed entry is below 1e-12.
template <class Vec>
Vec nullify_and_renormalize(const Vec& probs, const TokenMask& mask) {
  if (probs.size() != mask.size())
    throw Error(ErrorCode::DimensionMismatch, "probability and mask sizes differ");
  Vec out(probs.size());
  double total = 0.0;
  std::size_t allowed = 0;
  bool any_mass = false;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!mask[i]) continue;
    ++allowed;
    total += probs[i];
    any_mass = any_mass || probs[i] >= 1e-12;
  }
  if (allowed == 0) throw Error(ErrorCode::EmptyMask, "no valid token");
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!mask[i])
      out[i] = 0;
    else
      out[i] = any_mass ? probs[i] / total : 1.0 / static_cast<double>(allowed);
  }
  return out;
}

}  // namespace facaid
