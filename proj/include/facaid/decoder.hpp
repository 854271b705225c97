#pragma once

#include <random>
#include <vector>

#include "facaid/automaton.hpp"
#include "facaid/transformer.hpp"

namespace facaid {

struct DecodeConfig {
  double temperature = 0.0;  // 0 selects greedy argmax
  std::uint64_t seed = 0;
  int max_tokens = kMaxOutputTokens;
  std::vector<Token> resume_prefix;  // user-corrected leading tokens, BOS optional
};

struct Inference {
  DerivationTree tree;  // default sizing applied
  std::vector<Token> tokens;
};

/// Autoregressive decode with invalid-token nullification; the result always
/// parses, validates and executes.
template <class S>
Inference infer_procedure(const SeqModel<S>& model, const RectLayout& layout, const Vocabulary& vocab,
                          const DecodeConfig& cfg = {}) {
  if (cfg.temperature < 0) throw Error(ErrorCode::BadInput, "temperature must be non-negative");
  const DecodeAutomaton automaton(vocab);
  const int budget = std::min(cfg.max_tokens, model.config().max_output);
  auto state = automaton.initial_state(std::nullopt, budget);
  typename SeqModel<S>::Session session(model, model.encode(encode_layout(layout, vocab, model.config().max_input)));

  std::vector<Token> tokens{Vocabulary::kBos};
  int local = 0;
  auto logits = session.step(Vocabulary::kBos, local);
  auto feed = [&](Token t) {
    state = automaton.advance(std::move(state), t);
    local = next_local_index(tokens.back(), local);
    tokens.push_back(t);
    if (!state.finished) logits = session.step(t, local);
  };
  const auto& prefix = cfg.resume_prefix;
  for (std::size_t i = (!prefix.empty() && prefix[0] == Vocabulary::kBos) ? 1 : 0; i < prefix.size(); ++i)
    feed(prefix[i]);

  std::mt19937_64 rng(splitmix64(cfg.seed));
  std::vector<double> probs(static_cast<std::size_t>(vocab.size()));
  while (!state.finished) {
    const double t = cfg.temperature > 0 ? cfg.temperature : 1.0;
    const double mx = static_cast<double>(logits.maxCoeff());
    double sum = 0;
    for (std::size_t k = 0; k < probs.size(); ++k)
      sum += probs[k] = std::exp((static_cast<double>(logits(static_cast<Eigen::Index>(k))) - mx) / t);
    for (auto& p : probs) p /= sum;
    const auto q = nullify_and_renormalize(probs, automaton.valid_next_tokens(state));
    Token next;
    if (cfg.temperature > 0) {
      std::discrete_distribution<Token> pick(q.begin(), q.end());
      next = pick(rng);
    } else {
      next = static_cast<Token>(std::max_element(q.begin(), q.end()) - q.begin());
    }
    feed(next);
  }
  return {default_sizing(decode_tree(tokens, vocab)), std::move(tokens)};
}

}  // namespace facaid
