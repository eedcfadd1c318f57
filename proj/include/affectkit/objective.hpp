#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "affectkit/errors.hpp"
#include "affectkit/graph.hpp"
#include "affectkit/tensor.hpp"

namespace affectkit {

enum class Aggregator { mean, median };

inline const char* to_string(Aggregator a) { return a == Aggregator::mean ? "mean" : "median"; }

inline Aggregator parse_aggregator(const std::string& text) {
  if (text == "mean") return Aggregator::mean;
  if (text == "median") return Aggregator::median;
  throw ArgumentError("unknown aggregator '" + text + "' (expected mean or median)");
}

/// Population moments of a (prediction, gold) pair of series.
struct CccStats {
  double mean_pred = 0.0;
  double mean_gold = 0.0;
  double var_pred = 0.0;
  double var_gold = 0.0;
  double covar = 0.0;
};

inline CccStats ccc_stats(std::span<const double> pred, std::span<const double> gold) {
  if (pred.size() != gold.size()) {
    throw ArgumentError("ccc: length mismatch " + std::to_string(pred.size()) + " vs " + std::to_string(gold.size()));
  }
  if (pred.size() < 2) throw ArgumentError("ccc needs at least 2 points, got " + std::to_string(pred.size()));
  const double n = static_cast<double>(pred.size());
  CccStats s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    s.mean_pred += pred[i];
    s.mean_gold += gold[i];
  }
  s.mean_pred /= n;
  s.mean_gold /= n;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dp = pred[i] - s.mean_pred;
    const double dg = gold[i] - s.mean_gold;
    s.var_pred += dp * dp;
    s.var_gold += dg * dg;
    s.covar += dp * dg;
  }
  s.var_pred /= n;
  s.var_gold /= n;
  s.covar /= n;
  return s;
}

/// Concordance from moments. A zero denominator (both series constant and equal) counts as perfect agreement.
inline double ccc_from_stats(const CccStats& s) {
  const double gap = s.mean_pred - s.mean_gold;
  const double denom = s.var_pred + s.var_gold + gap * gap;
  if (denom == 0.0) return 1.0;
  return 2.0 * s.covar / denom;
}

/**
 * Concordance correlation coefficient with population (1/N) moments:
 * 2 cov / (var_pred + var_gold + (mean_pred - mean_gold)^2).
 */
inline double ccc(std::span<const double> pred, std::span<const double> gold) {
  return ccc_from_stats(ccc_stats(pred, gold));
}

/// Pearson correlation; 0 when either series is constant. Diagnostic only.
inline double pearson(std::span<const double> pred, std::span<const double> gold) {
  const CccStats s = ccc_stats(pred, gold);
  if (s.var_pred == 0.0 || s.var_gold == 0.0) return 0.0;
  return s.covar / std::sqrt(s.var_pred * s.var_gold);
}

/// Elements that make up an aggregate, each with its weight (d aggregate / d element).
struct Selection {
  std::vector<std::pair<std::size_t, double>> terms;
};

/**
 * Which of `values` feed the aggregate. Entries with a nonzero `mask` byte
 * are skipped. The median of an even count averages the two middle order
 * statistics; ties resolve by position.
 */
inline Selection aggregate_selection(std::span<const double> values, Aggregator agg,
                                     std::span<const std::uint8_t> mask = {}) {
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (mask.empty() || mask[i] == 0) live.push_back(i);
  }
  if (live.empty()) throw ArgumentError("aggregate over an empty list");
  Selection sel;
  if (agg == Aggregator::mean) {
    const double w = 1.0 / static_cast<double>(live.size());
    for (std::size_t i : live) sel.terms.emplace_back(i, w);
    return sel;
  }
  std::stable_sort(live.begin(), live.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  const std::size_t mid = live.size() / 2;
  if (live.size() % 2 == 1) {
    sel.terms.emplace_back(live[mid], 1.0);
  } else {
    sel.terms.emplace_back(live[mid - 1], 0.5);
    sel.terms.emplace_back(live[mid], 0.5);
  }
  return sel;
}

inline double aggregate(std::span<const double> values, Aggregator agg, std::span<const std::uint8_t> mask = {}) {
  const Selection sel = aggregate_selection(values, agg, mask);
  if (agg == Aggregator::mean) {
    double total = 0.0;
    for (const auto& [i, w] : sel.terms) total += values[i];
    return total / static_cast<double>(sel.terms.size());
  }
  double total = 0.0;
  for (const auto& [i, w] : sel.terms) total += w * values[i];
  return total;
}

/// Side information from a CCC loss evaluation.
struct LossDiagnostics {
  /// Dimensions whose gold batch was constant; their gradient is forced to zero.
  std::vector<std::size_t> degenerate_dims;
  std::vector<double> per_dim_loss;
};

namespace detail {

/**
 * 1 - CCC between per-sequence aggregates of column `dim` of preds [B,T,D]
 * and `gold`. Writes d loss / d preds into `grad` (same layout) when given.
 */
inline double ccc_loss_column(const Tensor& preds, std::size_t batch, std::size_t time, std::size_t dims,
                              std::size_t dim, std::span<const double> gold, Aggregator agg,
                              std::span<const std::uint8_t> mask, double grad_scale, Tensor* grad, bool* degenerate) {
  std::vector<double> aggs(batch);
  std::vector<Selection> selections(batch);
  std::vector<double> column(time);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < time; ++t) column[t] = preds[(b * time + t) * dims + dim];
    const auto m = mask.empty() ? std::span<const std::uint8_t>{} : mask.subspan(b * time, time);
    selections[b] = aggregate_selection(column, agg, m);
    double a = 0.0;
    for (const auto& [i, w] : selections[b].terms) a += w * column[i];
    aggs[b] = a;
  }
  const CccStats s = ccc_stats(aggs, gold);
  const double loss = 1.0 - ccc_from_stats(s);
  const double gap = s.mean_pred - s.mean_gold;
  const double denom = s.var_pred + s.var_gold + gap * gap;
  *degenerate = s.var_gold == 0.0;
  if (grad == nullptr || denom == 0.0 || *degenerate) return loss;

  // d rho / d a_i = [2 (y_i - ybar) D - 2 cov (2 (a_i - abar) + 2 gap)] / (N D^2)
  const double n = static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const double drho = (2.0 * (gold[b] - s.mean_gold) * denom -
                         2.0 * s.covar * (2.0 * (aggs[b] - s.mean_pred) + 2.0 * gap)) /
                        (n * denom * denom);
    const double dloss = -drho * grad_scale;
    for (const auto& [t, w] : selections[b].terms) (*grad)[(b * time + t) * dims + dim] += dloss * w;
  }
  return loss;
}

inline void check_loss_inputs(const Tensor& preds, std::size_t expected_rank, std::size_t labels,
                              std::span<const std::uint8_t> mask) {
  if (preds.rank() != expected_rank) {
    throw ShapeError("ccc loss expects predictions of rank " + std::to_string(expected_rank) + ", got " +
                     to_string(preds.shape()));
  }
  const std::size_t batch = preds.dim(0);
  if (batch < 2) throw ArgumentError("ccc loss needs a batch of at least 2 sequences, got " + std::to_string(batch));
  if (labels != batch) {
    throw ShapeError("ccc loss: " + std::to_string(labels) + " labels for a batch of " + std::to_string(batch));
  }
  if (!mask.empty() && mask.size() != batch * preds.dim(1)) throw ShapeError("ccc loss: mask size mismatch");
}

}  // namespace detail

/**
 * Training loss 1 - CCC for one dimension. Each sequence's frame predictions
 * (preds [B,T], masked frames excluded) are reduced by `agg`, and CCC is taken
 * across the B aggregates against the B sequence labels.
 */
inline NodeId ccc_loss(Graph& g, NodeId preds, std::span<const double> labels, Aggregator agg,
                       std::span<const std::uint8_t> mask = {}, LossDiagnostics* diagnostics = nullptr) {
  const Tensor& p = g.value(preds);
  detail::check_loss_inputs(p, 2, labels.size(), mask);
  const std::size_t batch = p.dim(0);
  const std::size_t time = p.dim(1);
  bool degenerate = false;
  const double loss = detail::ccc_loss_column(p, batch, time, 1, 0, labels, agg, mask, 1.0, nullptr, &degenerate);
  if (diagnostics != nullptr) {
    diagnostics->degenerate_dims.clear();
    if (degenerate) diagnostics->degenerate_dims.push_back(0);
    diagnostics->per_dim_loss = {loss};
  }
  std::vector<double> gold(labels.begin(), labels.end());
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return g.record("ccc_loss", Tensor::scalar(loss), {preds},
                  [gold, m, agg, batch, time](const BackwardContext& ctx) {
                    bool unused = false;
                    detail::ccc_loss_column(ctx.input(0), batch, time, 1, 0, gold, agg, m, ctx.grad_output().item(),
                                            ctx.input_grad(0), &unused);
                  });
}

/// Sum of the valence and arousal CCC losses for preds [B,T,2] and labels (valence, arousal) per sequence.
inline NodeId ccc_loss_joint(Graph& g, NodeId preds, std::span<const std::array<double, 2>> labels, Aggregator agg,
                             std::span<const std::uint8_t> mask = {}, LossDiagnostics* diagnostics = nullptr) {
  const Tensor& p = g.value(preds);
  detail::check_loss_inputs(p, 3, labels.size(), mask);
  if (p.dim(2) != 2) throw ShapeError("ccc_loss_joint expects [B,T,2], got " + to_string(p.shape()));
  const std::size_t batch = p.dim(0);
  const std::size_t time = p.dim(1);
  std::array<std::vector<double>, 2> gold;
  for (const auto& l : labels) {
    gold[0].push_back(l[0]);
    gold[1].push_back(l[1]);
  }
  double total = 0.0;
  if (diagnostics != nullptr) *diagnostics = {};
  for (std::size_t d = 0; d < 2; ++d) {
    bool degenerate = false;
    const double loss = detail::ccc_loss_column(p, batch, time, 2, d, gold[d], agg, mask, 1.0, nullptr, &degenerate);
    total += loss;
    if (diagnostics != nullptr) {
      diagnostics->per_dim_loss.push_back(loss);
      if (degenerate) diagnostics->degenerate_dims.push_back(d);
    }
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return g.record("ccc_loss_joint", Tensor::scalar(total), {preds},
                  [gold, m, agg, batch, time](const BackwardContext& ctx) {
                    for (std::size_t d = 0; d < 2; ++d) {
                      bool unused = false;
                      detail::ccc_loss_column(ctx.input(0), batch, time, 2, d, gold[d], agg, m,
                                              ctx.grad_output().item(), ctx.input_grad(0), &unused);
                    }
                  });
}

}  // namespace affectkit
