#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "facaid/error.hpp"
#include "facaid/geometry.hpp"
#include "facaid/grammar.hpp"

namespace facaid {

/// Per-label channel image, channel-major then row-major, row 0 at the bottom.
struct ClassRaster {
  int width = 0;
  int height = 0;
  std::vector<double> values;  // kLabelCount × height × width

  ClassRaster() = default;
  ClassRaster(int w, int h) : width(w), height(h), values(kLabelCount * static_cast<std::size_t>(w) * h, 0.0) {}

  double& at(std::size_t channel, int row, int col) {
    return values[(channel * static_cast<std::size_t>(height) + static_cast<std::size_t>(row)) * width + col];
  }
  const double& at(std::size_t channel, int row, int col) const {
    return values[(channel * static_cast<std::size_t>(height) + static_cast<std::size_t>(row)) * width + col];
  }
};

inline ClassRaster one_hot(const LabelImage& img) {
  ClassRaster r(img.width, img.height);
  for (int row = 0; row < img.height; ++row)
    for (int col = 0; col < img.width; ++col) r.at(label_index(img.at(row, col)), row, col) = 1.0;
  return r;
}

inline ClassRaster hard_class_raster(const RectLayout& layout, int width, int height) {
  return one_hot(hard_rasterize(layout, width, height));
}

/// Log-space sizing weights of every node with a non-empty sizing vector, in
/// depth-first order.
struct SizingVector {
  std::vector<double> values;
  std::vector<std::size_t> node_offset;  // per depth-first node; start of its slots
  std::vector<std::size_t> node_arity;

  std::size_t size() const { return values.size(); }
};

struct OptimizeConfig {
  int width = 128;
  int height = 128;
  double tau = 0.0;  // 0 selects half a pixel: 1 / (2 max(W, H))
  double step = 0.05;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int max_iterations = 2000;
  int window = 50;
  double tolerance = 1e-6;
  double grad_tolerance = 1e-10;  // stop once every gradient entry is below this
  // Coarse-to-fine: tau shrinks geometrically from anneal_from pixels to the
  // final tau over anneal_iterations; 0 disables.
  double anneal_from = 8.0;
  int anneal_iterations = 300;

  double temperature() const { return tau > 0 ? tau : 1.0 / (2.0 * std::max(width, height)); }
  double temperature_at(int iteration) const {
    const double final_tau = temperature();
    const double start = anneal_from / std::max(width, height);
    if (anneal_from <= 0 || start <= final_tau || iteration >= anneal_iterations) return final_tau;
    const double t = static_cast<double>(iteration) / anneal_iterations;
    return start * std::pow(final_tau / start, t);
  }
  void validate() const {
    if (width < 1 || height < 1) throw Error(ErrorCode::BadInput, "raster size must be positive");
    if (tau < 0) throw Error(ErrorCode::BadInput, "tau must be positive");
    if (max_iterations < 1) throw Error(ErrorCode::BadInput, "max_iterations must be at least 1");
    if (window < 1) throw Error(ErrorCode::BadInput, "window must be at least 1");
    if (anneal_from < 0 || anneal_iterations < 0) throw Error(ErrorCode::BadInput, "annealing settings must be non-negative");
  }
};

namespace detail {

struct FlatNode {
  const Node* node;
  int parent;
  std::size_t slot_in_parent;
  bool along_x;
  bool leaf;
  TerminalLabel label;
  std::size_t offset, arity;
};

inline void flatten(const Grammar& g, const Node& n, int parent, std::size_t slot, std::vector<FlatNode>& out,
                    std::size_t& offset) {
  const auto& spec = g.production(n.prod);
  FlatNode f{&n,
             parent,
             slot,
             spec.kind == ProductionKind::SplitX || spec.kind == ProductionKind::RepeatX,
             spec.kind == ProductionKind::Assign,
             spec.label,
             offset,
             sizing_arity(spec, n.structural)};
  offset += f.arity;
  const int me = static_cast<int>(out.size());
  out.push_back(f);
  for (std::size_t i = 0; i < n.children.size(); ++i) flatten(g, n.children[i], me, i, out, offset);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Forward and reverse passes of the soft renderer over one tree.
class SoftRenderer {
 public:
  SoftRenderer(const DerivationTree& tree, const Grammar& g, RootCheck root) {
    throw_if_invalid(validate_tree(tree, g, SizingCheck::Ignored, root));
    std::size_t offset = 0;
    flatten(g, tree.root, -1, 0, nodes_, offset);
    params_ = offset;
    kids_.resize(nodes_.size());
    for (std::size_t i = 1; i < nodes_.size(); ++i) kids_[static_cast<std::size_t>(nodes_[i].parent)].push_back(i);
  }

  std::size_t parameter_count() const { return params_; }
  const std::vector<FlatNode>& nodes() const { return nodes_; }

  /// Region edges per node and split fractions per slot.
  void layout(const std::vector<double>& logw) {
    const std::size_t n = nodes_.size();
    box_.assign(n, {0, 1, 0, 1});
    frac_.assign(params_, 0.0);
    cum_.assign(params_, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& f = nodes_[i];
      if (f.parent >= 0) {
        const auto& p = nodes_[static_cast<std::size_t>(f.parent)];
        auto b = box_[static_cast<std::size_t>(f.parent)];
        const int lo = p.along_x ? 0 : 2;
        const double origin = b[lo], extent = b[lo + 1] - b[lo];
        const double c0 = f.slot_in_parent == 0 ? 0.0 : cum_[p.offset + f.slot_in_parent - 1];
        b[lo] = origin + extent * c0;
        b[lo + 1] = f.slot_in_parent + 1 == p.arity ? box_[static_cast<std::size_t>(f.parent)][lo + 1]
                                                     : origin + extent * cum_[p.offset + f.slot_in_parent];
        box_[i] = b;
      }
      if (f.arity == 0) continue;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < f.arity; ++k) mx = std::max(mx, logw[f.offset + k]);
      double total = 0;
      for (std::size_t k = 0; k < f.arity; ++k) total += frac_[f.offset + k] = std::exp(logw[f.offset + k] - mx);
      double c = 0;
      for (std::size_t k = 0; k < f.arity; ++k) {
        frac_[f.offset + k] /= total;
        c += frac_[f.offset + k];
        cum_[f.offset + k] = c;
      }
    }
  }

  std::vector<Rect> rects() const {
    std::vector<Rect> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].leaf) {
        const auto& b = box_[i];
        out.push_back({nodes_[i].label, b[0], b[2], b[1] - b[0], b[3] - b[2]});
      }
    return out;
  }

  const std::vector<double>& fractions() const { return frac_; }

  /// Adds each leaf's soft coverage into `out`.
  void rasterize(ClassRaster& out, double tau) {
    const int W = out.width, H = out.height;
    ax_.assign(nodes_.size(), {});
    ay_.assign(nodes_.size(), {});
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].leaf) continue;
      const auto& b = box_[i];
      axis(b[0], b[1], W, tau, ax_[i]);
      axis(b[2], b[3], H, tau, ay_[i]);
      const auto ch = label_index(nodes_[i].label);
      for (int r = ay_[i].first; r < ay_[i].first + static_cast<int>(ay_[i].f.size()); ++r) {
        const double yv = ay_[i].f[static_cast<std::size_t>(r - ay_[i].first)];
        double* row = &out.at(ch, r, 0);
        for (std::size_t c = 0; c < ax_[i].f.size(); ++c) row[ax_[i].first + static_cast<int>(c)] += yv * ax_[i].f[c];
      }
    }
  }

  /// Soft coverage of fixed rectangles, used for blurred targets.
  static void rasterize_rects(const std::vector<Rect>& rects, ClassRaster& out, double tau) {
    Axis ax, ay;
    for (const auto& rect : rects) {
      axis(rect.x, rect.x + rect.w, out.width, tau, ax);
      axis(rect.y, rect.y + rect.h, out.height, tau, ay);
      const auto ch = label_index(rect.label);
      for (std::size_t r = 0; r < ay.f.size(); ++r) {
        double* row = &out.at(ch, ay.first + static_cast<int>(r), 0);
        for (std::size_t c = 0; c < ax.f.size(); ++c) row[ax.first + static_cast<int>(c)] += ay.f[r] * ax.f[c];
      }
    }
  }

  /// Reverse pass: `dr` is dLoss/dRaster; returns dLoss/dlogw.
  std::vector<double> backward(const ClassRaster& dr) const {
    const std::size_t n = nodes_.size();
    std::vector<std::array<double, 4>> gbox(n, {0, 0, 0, 0});
    for (std::size_t i = 0; i < n; ++i) {
      if (!nodes_[i].leaf) continue;
      const auto ch = label_index(nodes_[i].label);
      const auto& X = ax_[i];
      const auto& Y = ay_[i];
      std::vector<double> gx(X.f.size(), 0.0), gy(Y.f.size(), 0.0);
      for (std::size_t r = 0; r < Y.f.size(); ++r) {
        const double* row = &dr.at(ch, Y.first + static_cast<int>(r), 0);
        double acc = 0;
        for (std::size_t c = 0; c < X.f.size(); ++c) {
          const double d = row[X.first + static_cast<int>(c)];
          acc += d * X.f[c];
          gx[c] += d * Y.f[r];
        }
        gy[r] = acc;
      }
      for (std::size_t c = 0; c < X.f.size(); ++c) {
        gbox[i][0] += gx[c] * X.d_lo[c];
        gbox[i][1] += gx[c] * X.d_hi[c];
      }
      for (std::size_t r = 0; r < Y.f.size(); ++r) {
        gbox[i][2] += gy[r] * Y.d_lo[r];
        gbox[i][3] += gy[r] * Y.d_hi[r];
      }
    }
    std::vector<double> grad(params_, 0.0);
    std::vector<double> gedge;
    for (std::size_t i = n; i-- > 0;) {
      const auto& f = nodes_[i];
      if (f.arity == 0) continue;
      const auto& b = box_[i];
      const int lo = f.along_x ? 0 : 2;
      const double extent = b[lo + 1] - b[lo];
      // gedge[k]: gradient on edge k (0..arity) from the children's boxes
      gedge.assign(f.arity + 1, 0.0);
      for (std::size_t j : kids_[i]) {
        const auto k = nodes_[j].slot_in_parent;
        gedge[k] += gbox[j][lo];
        gedge[k + 1] += gbox[j][lo + 1];
        // the other axis passes straight through
        const int o = f.along_x ? 2 : 0;
        gbox[i][o] += gbox[j][o];
        gbox[i][o + 1] += gbox[j][o + 1];
      }
      gbox[i][lo] += gedge[0];
      gbox[i][lo + 1] += gedge[f.arity];
      // inner edges: e_k = lo + extent * C_k
      std::vector<double> dcum(f.arity, 0.0);
      for (std::size_t k = 1; k < f.arity; ++k) {
        const double C = cum_[f.offset + k - 1];
        gbox[i][lo] += gedge[k] * (1.0 - C);
        gbox[i][lo + 1] += gedge[k] * C;
        dcum[k - 1] = gedge[k] * extent;
      }
      // C_k = sum_{j<=k} frac_j, so dfrac_j = sum_{k>=j} dC_k
      std::vector<double> dfrac(f.arity, 0.0);
      double acc = 0;
      for (std::size_t k = f.arity; k-- > 0;) {
        acc += dcum[k];
        dfrac[k] = acc;
      }
      double dot = 0;
      for (std::size_t k = 0; k < f.arity; ++k) dot += frac_[f.offset + k] * dfrac[k];
      for (std::size_t k = 0; k < f.arity; ++k)
        grad[f.offset + k] = frac_[f.offset + k] * (dfrac[k] - dot);
    }
    return grad;
  }

 private:
  struct Axis {
    int first = 0;
    std::vector<double> f, d_lo, d_hi;
  };

  /// σ((u−lo)/τ)·σ((hi−u)/τ) at pixel centers within 40τ of [lo, hi].
  static void axis(double lo, double hi, int n, double tau, Axis& a) {
    const double margin = 40.0 * tau;
    const int c0 = std::clamp(static_cast<int>(std::floor((lo - margin) * n - 0.5)), 0, n);
    const int c1 = std::clamp(static_cast<int>(std::ceil((hi + margin) * n - 0.5)) + 1, 0, n);
    a.first = c0;
    const auto len = static_cast<std::size_t>(std::max(0, c1 - c0));
    a.f.resize(len);
    a.d_lo.resize(len);
    a.d_hi.resize(len);
    for (std::size_t k = 0; k < len; ++k) {
      const double u = (c0 + static_cast<int>(k) + 0.5) / n;
      const double s1 = sigmoid((u - lo) / tau), s2 = sigmoid((hi - u) / tau);
      a.f[k] = s1 * s2;
      a.d_lo[k] = -s1 * (1.0 - s1) * s2 / tau;
      a.d_hi[k] = s2 * (1.0 - s2) * s1 / tau;
    }
  }

  std::vector<FlatNode> nodes_;
  std::vector<std::vector<std::size_t>> kids_;
  std::size_t params_ = 0;
  std::vector<std::array<double, 4>> box_;  // x0, x1, y0, y1
  std::vector<double> frac_, cum_;
  std::vector<Axis> ax_, ay_;
};

}  // namespace detail

/// Log of the tree's current weights; nodes without sizing start at 0.
inline SizingVector sizing_vector(const DerivationTree& tree, const Grammar& g = facade_grammar(),
                                  RootCheck root = RootCheck::Axiom) {
  detail::SoftRenderer r(tree, g, root);
  SizingVector sv;
  sv.values.assign(r.parameter_count(), 0.0);
  for (const auto& f : r.nodes()) {
    sv.node_offset.push_back(f.offset);
    sv.node_arity.push_back(f.arity);
    if (f.node->sizing.size() == f.arity)
      for (std::size_t k = 0; k < f.arity; ++k) {
        if (!(f.node->sizing[k] > 0)) throw Error(ErrorCode::NonPositiveSizing, "sizing weight must be positive");
        sv.values[f.offset + k] = std::log(f.node->sizing[k]);
      }
  }
  return sv;
}

/// Tree with sizing set to the normalized split fractions of `sv`.
inline DerivationTree apply_sizing(DerivationTree tree, const SizingVector& sv, const Grammar& g = facade_grammar(),
                                   RootCheck root = RootCheck::Axiom) {
  detail::SoftRenderer r(tree, g, root);
  if (sv.size() != r.parameter_count()) throw Error(ErrorCode::DimensionMismatch, "sizing vector length");
  r.layout(sv.values);
  std::size_t i = 0;
  std::function<void(Node&)> walk = [&](Node& n) {
    const auto& f = r.nodes()[i++];
    n.sizing.assign(r.fractions().begin() + static_cast<long>(f.offset),
                    r.fractions().begin() + static_cast<long>(f.offset + f.arity));
    for (auto& c : n.children) walk(c);
  };
  walk(tree.root);
  return tree;
}

inline ClassRaster soft_rasterize(const DerivationTree& tree, const SizingVector& sv, const OptimizeConfig& cfg = {},
                                  const Grammar& g = facade_grammar(), RootCheck root = RootCheck::Axiom) {
  cfg.validate();
  detail::SoftRenderer r(tree, g, root);
  if (sv.size() != r.parameter_count()) throw Error(ErrorCode::DimensionMismatch, "sizing vector length");
  r.layout(sv.values);
  ClassRaster out(cfg.width, cfg.height);
  r.rasterize(out, cfg.temperature());
  return out;
}

struct LossGrad {
  double loss = 0;
  std::vector<double> grad;
};

namespace detail {

inline LossGrad loss_and_grad(SoftRenderer& r, const std::vector<double>& logw, const ClassRaster& target,
                              const OptimizeConfig& cfg) {
  r.layout(logw);
  ClassRaster soft(target.width, target.height);
  const double tau = cfg.temperature();
  r.rasterize(soft, tau);
  LossGrad out;
  const double inv = 1.0 / static_cast<double>(soft.values.size());
  for (std::size_t i = 0; i < soft.values.size(); ++i) {
    const double d = soft.values[i] - target.values[i];
    out.loss += d * d;
    soft.values[i] = 2.0 * d * inv;  // reuse as dLoss/dRaster
  }
  out.loss *= inv;
  out.grad = r.backward(soft);
  return out;
}

}  // namespace detail

/// Mean squared error over pixels and channels between the soft render and
/// `target`, and its exact gradient in log-space sizing.
inline LossGrad loss_and_grad(const DerivationTree& tree, const SizingVector& sv, const ClassRaster& target,
                              const OptimizeConfig& cfg = {}, const Grammar& g = facade_grammar(),
                              RootCheck root = RootCheck::Axiom) {
  cfg.validate();
  if (target.width != cfg.width || target.height != cfg.height ||
      target.values.size() != kLabelCount * static_cast<std::size_t>(cfg.width) * cfg.height)
    throw Error(ErrorCode::DimensionMismatch, "target raster is " + std::to_string(target.width) + "x" +
                                                  std::to_string(target.height) + ", config wants " +
                                                  std::to_string(cfg.width) + "x" + std::to_string(cfg.height));
  detail::SoftRenderer r(tree, g, root);
  if (sv.size() != r.parameter_count()) throw Error(ErrorCode::DimensionMismatch, "sizing vector length");
  return detail::loss_and_grad(r, sv.values, target, cfg);
}

struct SizingFit {
  DerivationTree tree;
  std::vector<double> trace;  // loss per iteration
  int iterations = 0;
  bool converged = false;
};

namespace detail {

/// Adam on log-space sizing from uniform weights; `target_at(tau)` supplies
/// the raster to match at each temperature.
template <class Target>
SizingFit fit_sizing(const DerivationTree& tree, Target&& target_at, const OptimizeConfig& cfg, const Grammar& g,
                     RootCheck root) {
  SoftRenderer r(tree, g, root);
  std::vector<double> w(r.parameter_count(), 0.0), m(w.size(), 0.0), v(w.size(), 0.0);
  SizingFit fit;
  std::size_t settled = 0;  // first trace index at the final tau
  for (int it = 1; it <= cfg.max_iterations; ++it) {
    auto step_cfg = cfg;
    step_cfg.tau = cfg.temperature_at(it - 1);
    const bool annealing = step_cfg.tau != cfg.temperature();
    auto lg = loss_and_grad(r, w, target_at(step_cfg.tau), step_cfg);
    if (!std::isfinite(lg.loss)) throw Error(ErrorCode::NonFiniteLoss, "loss at iteration " + std::to_string(it));
    if (annealing) settled = fit.trace.size() + 1;
    fit.trace.push_back(lg.loss);
    fit.iterations = it;
    double gmax = 0;
    for (double x : lg.grad) gmax = std::max(gmax, std::abs(x));
    const auto n = fit.trace.size();
    const auto win = static_cast<std::size_t>(cfg.window);
    const bool flat = n > settled + win &&
                      fit.trace[n - 1 - win] - lg.loss <= cfg.tolerance * std::max(fit.trace[n - 1 - win], 1e-300);
    if (gmax <= cfg.grad_tolerance || (!annealing && flat)) {
      fit.converged = true;
      break;
    }
    if (it == cfg.max_iterations) break;
    const double bc1 = 1.0 - std::pow(cfg.beta1, it), bc2 = 1.0 - std::pow(cfg.beta2, it);
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * lg.grad[k];
      v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * lg.grad[k] * lg.grad[k];
      w[k] -= cfg.step * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.eps);
    }
  }
  SizingVector sv;
  sv.values = w;
  fit.tree = apply_sizing(tree, sv, g, root);
  return fit;
}

}  // namespace detail

/// Fits sizing to a fixed raster at the final temperature only; annealing
/// needs the target geometry to blur it consistently.
inline SizingFit optimize_sizing(const DerivationTree& tree, const ClassRaster& target, OptimizeConfig cfg = {},
                                 const Grammar& g = facade_grammar(), RootCheck root = RootCheck::Axiom) {
  cfg.validate();
  cfg.anneal_from = 0;
  if (target.width != cfg.width || target.height != cfg.height)
    throw Error(ErrorCode::DimensionMismatch, "target raster size differs from config");
  return detail::fit_sizing(tree, [&](double) -> const ClassRaster& { return target; }, cfg, g, root);
}

/// Fits sizing to a layout. While annealing, the target is blurred with the
/// same temperature as the render; at the final temperature it is one-hot.
inline SizingFit optimize_sizing(const DerivationTree& tree, const RectLayout& target, const OptimizeConfig& cfg = {},
                                 const Grammar& g = facade_grammar(), RootCheck root = RootCheck::Axiom) {
  cfg.validate();
  const auto hard = hard_class_raster(target, cfg.width, cfg.height);
  ClassRaster blurred(cfg.width, cfg.height);
  double blurred_tau = -1;
  auto target_at = [&](double tau) -> const ClassRaster& {
    if (tau == cfg.temperature()) return hard;
    if (tau != blurred_tau) {
      std::fill(blurred.values.begin(), blurred.values.end(), 0.0);
      detail::SoftRenderer::rasterize_rects(target.rects, blurred, tau);
      blurred_tau = tau;
    }
    return blurred;
  };
  return detail::fit_sizing(tree, target_at, cfg, g, root);
}

}  // namespace facaid
