#pragma once

// Exhaustive edit search over every labeled ordered forest up to a node bound.
// Unit-cost edit scripts can always be reordered as deletions, relabels, then
// insertions, so no intermediate forest needs more nodes than the larger end,
// which makes breadth-first search over the bounded graph exact.

#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "facaid/evaluation.hpp"

namespace oracle {

using facaid::OrderedTree;
using Forest = std::vector<OrderedTree>;

inline void encode(const Forest& f, std::string& out) {
  for (const auto& t : f) {
    out.push_back(static_cast<char>('a' + t.label));
    out.push_back('(');
    encode(t.children, out);
    out.push_back(')');
  }
}

inline std::string key(const Forest& f) {
  std::string s;
  encode(f, s);
  return s;
}

inline int size(const Forest& f) {
  int n = 0;
  for (const auto& t : f) n += 1 + size(t.children);
  return n;
}

inline void lists(Forest& f, std::vector<Forest*>& out) {
  out.push_back(&f);
  for (auto& t : f) lists(t.children, out);
}

inline std::vector<Forest> neighbours(const Forest& f, int labels, int bound) {
  std::vector<Forest> out;
  std::vector<Forest*> ls;
  Forest probe = f;
  lists(probe, ls);
  const std::size_t count = ls.size();
  const int n = size(f);
  auto edit = [&](std::size_t li, auto&& fn) {
    Forest copy = f;
    std::vector<Forest*> cl;
    lists(copy, cl);
    fn(*cl[li]);
    out.push_back(std::move(copy));
  };
  for (std::size_t li = 0; li < count; ++li) {
    const std::size_t len = ls[li]->size();
    for (std::size_t k = 0; k < len; ++k) {
      edit(li, [&](Forest& l) {
        auto kids = std::move(l[k].children);
        l.erase(l.begin() + static_cast<std::ptrdiff_t>(k));
        l.insert(l.begin() + static_cast<std::ptrdiff_t>(k), kids.begin(), kids.end());
      });
      for (int lab = 0; lab < labels; ++lab)
        if (lab != (*ls[li])[k].label) edit(li, [&](Forest& l) { l[k].label = lab; });
    }
    if (n >= bound) continue;
    for (std::size_t i = 0; i <= len; ++i)
      for (std::size_t j = i; j <= len; ++j)
        for (int lab = 0; lab < labels; ++lab)
          edit(li, [&](Forest& l) {
            OrderedTree t{lab, {}};
            t.children.assign(std::make_move_iterator(l.begin() + static_cast<std::ptrdiff_t>(i)),
                              std::make_move_iterator(l.begin() + static_cast<std::ptrdiff_t>(j)));
            l.erase(l.begin() + static_cast<std::ptrdiff_t>(i), l.begin() + static_cast<std::ptrdiff_t>(j));
            l.insert(l.begin() + static_cast<std::ptrdiff_t>(i), std::move(t));
          });
  }
  return out;
}

/// The bounded edit graph, with every single-rooted forest marked as a tree.
struct EditGraph {
  std::vector<Forest> states;
  std::vector<std::vector<int>> adj;
  std::vector<int> trees;

  EditGraph(int labels, int bound) {
    std::unordered_map<std::string, int> index;
    auto intern = [&](Forest f) {
      auto [it, fresh] = index.try_emplace(key(f), static_cast<int>(states.size()));
      if (fresh) states.push_back(std::move(f));
      return it->second;
    };
    intern({});
    for (std::size_t s = 0; s < states.size(); ++s) {
      std::vector<int> nb;
      for (auto& g : neighbours(states[s], labels, bound)) nb.push_back(intern(std::move(g)));
      adj.push_back(std::move(nb));
    }
    for (std::size_t s = 0; s < states.size(); ++s)
      if (states[s].size() == 1) trees.push_back(static_cast<int>(s));
  }

  std::vector<int> distances_from(int source) const {
    std::vector<int> d(states.size(), -1);
    std::deque<int> q{source};
    d[static_cast<std::size_t>(source)] = 0;
    while (!q.empty()) {
      const int s = q.front();
      q.pop_front();
      for (int t : adj[static_cast<std::size_t>(s)])
        if (d[static_cast<std::size_t>(t)] < 0) {
          d[static_cast<std::size_t>(t)] = d[static_cast<std::size_t>(s)] + 1;
          q.push_back(t);
        }
    }
    return d;
  }
};

}  // namespace oracle
