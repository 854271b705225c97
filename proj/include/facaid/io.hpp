#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "facaid/error.hpp"
#include "facaid/geometry.hpp"
#include "facaid/grammar.hpp"

namespace facaid {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Layout JSON: {"rects": [{"label": "Window", "x": .., "y": .., "w": .., "h": ..}]}

inline json layout_to_json(const RectLayout& layout) {
  json rects = json::array();
  for (const auto& r : layout.rects)
    rects.push_back({{"label", label_name(r.label)}, {"x", r.x}, {"y", r.y}, {"w", r.w}, {"h", r.h}});
  return {{"rects", std::move(rects)}};
}

inline RectLayout layout_from_json(const json& j) {
  if (!j.is_object() || !j.contains("rects") || !j["rects"].is_array())
    throw Error(ErrorCode::BadInput, "/rects: expected an array");
  RectLayout out;
  std::size_t i = 0;
  for (const auto& r : j["rects"]) {
    const std::string where = "/rects/" + std::to_string(i++);
    if (!r.is_object()) throw Error(ErrorCode::BadInput, where + ": expected an object");
    const auto label = r.contains("label") && r["label"].is_string()
                           ? parse_label(r["label"].get<std::string>())
                           : std::nullopt;
    if (!label) throw Error(ErrorCode::BadInput, where + "/label: unknown terminal label");
    Rect rect{*label};
    for (auto [key, field] : {std::pair{"x", &rect.x}, std::pair{"y", &rect.y},
                              std::pair{"w", &rect.w}, std::pair{"h", &rect.h}}) {
      if (!r.contains(key) || !r[key].is_number())
        throw Error(ErrorCode::BadInput, where + "/" + key + ": expected a number");
      *field = r[key].get<double>();
    }
    out.rects.push_back(rect);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Procedure JSON: {"root": {"prod": "P1", "structural": [...], "sizing": [...], "children": [...]}}
// Category arguments are written as the chosen symbol's name.

namespace detail {

inline json node_to_json(const Grammar& g, const Node& n) {
  const auto& spec = g.production(n.prod);
  json structural = json::array();
  std::size_t lead = 0;
  if (spec.rule == ChildRule::Repeat || spec.rule == ChildRule::Variadic) {
    lead = n.structural.empty() ? 0
                                : Grammar::child_arg_count(spec, static_cast<int>(n.structural[0]));
  }
  for (std::size_t i = 0; i < n.structural.size(); ++i) {
    const double v = n.structural[i];
    const bool category = spec.rule == ChildRule::Variadic && i >= 1 && i < lead;
    const auto idx = static_cast<std::size_t>(v);
    if (category && v == std::floor(v) && v >= 0 && idx < spec.children.size())
      structural.push_back(g.symbol_name(spec.children[idx]));
    else if (v == std::floor(v) && std::abs(v) < 1e15)
      structural.push_back(static_cast<std::int64_t>(v));
    else
      structural.push_back(v);
  }
  json children = json::array();
  for (const auto& ch : n.children) children.push_back(node_to_json(g, ch));
  return {{"prod", spec.name}, {"structural", std::move(structural)},
          {"sizing", n.sizing}, {"children", std::move(children)}};
}

inline Node node_from_json(const Grammar& g, const json& j, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::BadInput, where + ": expected an object");
  if (!j.contains("prod") || !j["prod"].is_string())
    throw Error(ErrorCode::BadInput, where + "/prod: expected a production name");
  const auto id = g.production_id(j["prod"].get<std::string>());
  if (!id) throw Error(ErrorCode::InvalidTree, where + "/prod: unknown production");
  const auto& spec = g.production(*id);
  Node n;
  n.prod = *id;
  if (j.contains("structural")) {
    if (!j["structural"].is_array())
      throw Error(ErrorCode::BadInput, where + "/structural: expected an array");
    std::size_t i = 0;
    for (const auto& a : j["structural"]) {
      if (a.is_number()) {
        n.structural.push_back(a.get<double>());
      } else if (a.is_string() && spec.rule == ChildRule::Variadic) {
        const auto sym = g.symbol(a.get<std::string>());
        double idx = -1;
        for (std::size_t k = 0; sym && k < spec.children.size(); ++k)
          if (spec.children[k] == *sym) idx = static_cast<double>(k);
        if (idx < 0)
          throw Error(ErrorCode::InvalidTree,
                      where + "/structural/" + std::to_string(i) + ": not a valid category");
        n.structural.push_back(idx);
      } else {
        throw Error(ErrorCode::BadInput,
                    where + "/structural/" + std::to_string(i) + ": expected a number");
      }
      ++i;
    }
  }
  if (j.contains("sizing") && !j["sizing"].is_null()) {
    if (!j["sizing"].is_array())
      throw Error(ErrorCode::BadInput, where + "/sizing: expected an array");
    for (const auto& s : j["sizing"]) {
      if (!s.is_number()) throw Error(ErrorCode::BadInput, where + "/sizing: expected numbers");
      n.sizing.push_back(s.get<double>());
    }
  }
  if (j.contains("children")) {
    if (!j["children"].is_array())
      throw Error(ErrorCode::BadInput, where + "/children: expected an array");
    std::size_t i = 0;
    for (const auto& c : j["children"])
      n.children.push_back(node_from_json(g, c, where + "/children/" + std::to_string(i++)));
  }
  return n;
}

}  // namespace detail

inline json tree_to_json(const DerivationTree& t, const Grammar& g = facade_grammar()) {
  return {{"root", detail::node_to_json(g, t.root)}};
}

inline DerivationTree tree_from_json(const json& j, const Grammar& g = facade_grammar()) {
  if (!j.is_object() || !j.contains("root"))
    throw Error(ErrorCode::BadInput, "/root: missing");
  return {detail::node_from_json(g, j["root"], "/root")};
}

// ---------------------------------------------------------------------------
// Grammar introspection table and its content hash.

inline json grammar_to_json(const Grammar& g = facade_grammar()) {
  json symbols = json::array();
  for (std::size_t s = 0; s < g.symbol_count(); ++s)
    symbols.push_back({{"name", g.symbol_name(static_cast<SymbolId>(s))},
                       {"terminal", g.is_terminal(static_cast<SymbolId>(s))}});
  json prods = json::array();
  for (std::size_t p = 0; p < g.production_count(); ++p) {
    const auto& spec = g.production(static_cast<ProductionId>(p));
    json entry{{"id", spec.name},
               {"index", p},
               {"lhs", g.symbol_name(spec.lhs)},
               {"kind", kind_name(spec.kind)}};
    json args = json::array();
    json kids = json::array();
    for (auto c : spec.children) kids.push_back(g.symbol_name(c));
    switch (spec.rule) {
      case ChildRule::Fixed:
        entry["children"] = kids;
        entry["sizing_arity"] = spec.children.size();
        break;
      case ChildRule::Repeat:
        args.push_back({{"name", "count"}, {"type", "int"}, {"min", spec.count.lo}, {"max", spec.count.hi}});
        entry["repeated_child"] = kids[0];
        entry["sizing_arity"] = "count";
        break;
      case ChildRule::Variadic:
        args.push_back({{"name", "count"}, {"type", "int"}, {"min", spec.count.lo}, {"max", spec.count.hi}});
        args.push_back({{"name", "kind"}, {"type", "category"}, {"options", kids}, {"repeat", "count"}});
        entry["sizing_arity"] = "count";
        break;
      case ChildRule::Leaf:
        entry["label"] = label_name(spec.label);
        entry["sizing_arity"] = 0;
        break;
    }
    for (const auto& e : spec.extras) {
      if (e.type == ExtraArg::Type::Integer)
        args.push_back({{"name", e.name}, {"type", "int"}, {"min", e.ints.lo}, {"max", e.ints.hi}});
      else
        args.push_back({{"name", e.name}, {"type", "real"}, {"min", e.real_lo}, {"max", e.real_hi}});
    }
    entry["structural"] = std::move(args);
    prods.push_back(std::move(entry));
  }
  return {{"axiom", g.symbol_name(g.axiom())}, {"symbols", std::move(symbols)},
          {"productions", std::move(prods)}};
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string grammar_hash(const Grammar& g = facade_grammar()) {
  static constexpr char hex[] = "0123456789abcdef";
  auto h = fnv1a64(grammar_to_json(g).dump());
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = hex[h & 0xf];
  return out;
}

}  // namespace facaid
