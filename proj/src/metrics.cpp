#include "grass/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace grass::metrics {

namespace {

void check_inputs(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.empty() || truth.empty()) throw std::invalid_argument("metrics: empty label sequence");
  if (pred.size() != truth.size()) throw std::invalid_argument("metrics: label sequences differ in length");
  for (int v : pred)
    if (v < 0) throw std::invalid_argument("metrics: negative label");
  for (int v : truth)
    if (v < 0) throw std::invalid_argument("metrics: negative label");
}

std::size_t label_range(const std::vector<int>& v) { return static_cast<std::size_t>(*std::max_element(v.begin(), v.end())) + 1; }

double comb2(double n) { return n * (n - 1) / 2; }

// Terms are summed in sorted order so relabeling cannot change the result.
double sorted_sum(std::vector<double> terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0;
  for (double v : terms) s += v;
  return s;
}

double entropy(const std::vector<double>& counts, double total) {
  std::vector<double> terms;
  for (double c : counts)
    if (c > 0) terms.push_back(-c / total * std::log(c / total));
  return sorted_sum(std::move(terms));
}

}  // namespace

std::vector<std::size_t> hungarian(const std::vector<std::vector<double>>& cost) {
  const std::size_t rows = cost.size();
  if (rows == 0) return {};
  std::size_t cols = 0;
  double big = 0;
  for (const auto& r : cost) {
    cols = std::max(cols, r.size());
    for (double v : r) {
      if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite cost");
      big = std::max(big, std::abs(v));
    }
  }
  const std::size_t n = std::max(rows, cols);
  const double pad = 1.0 + 2.0 * big;
  auto a = [&](std::size_t i, std::size_t j) {
    return i < rows && j < cost[i].size() ? cost[i][j] : pad;
  };
  // Shortest augmenting path with potentials, 1-based.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> out(n);
  for (std::size_t j = 1; j <= n; ++j) out[p[j] - 1] = j - 1;
  out.resize(rows);
  return out;
}

std::vector<std::vector<double>> contingency(const std::vector<int>& pred, const std::vector<int>& truth) {
  check_inputs(pred, truth);
  std::vector<std::vector<double>> c(label_range(pred), std::vector<double>(label_range(truth), 0.0));
  for (std::size_t i = 0; i < pred.size(); ++i) c[static_cast<std::size_t>(pred[i])][static_cast<std::size_t>(truth[i])] += 1;
  return c;
}

std::vector<int> match_labels(const std::vector<int>& pred, const std::vector<int>& truth) {
  const auto c = contingency(pred, truth);
  const std::size_t kp = c.size(), kt = c[0].size(), k = std::max(kp, kt);
  std::vector<std::vector<double>> cost(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < kp; ++i)
    for (std::size_t j = 0; j < kt; ++j) cost[i][j] = -c[i][j];
  const auto assign = hungarian(cost);
  std::vector<int> out(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) out[i] = static_cast<int>(assign[static_cast<std::size_t>(pred[i])]);
  return out;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  check_inputs(pred, truth);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double f1_macro(const std::vector<int>& pred, const std::vector<int>& truth) {
  check_inputs(pred, truth);
  std::map<int, double> tp, npred, ntrue;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ntrue[truth[i]] += 1;
    npred[pred[i]] += 1;
    if (pred[i] == truth[i]) tp[truth[i]] += 1;
  }
  double sum = 0;
  for (const auto& [label, count] : ntrue) {
    const double t = tp[label];
    if (t == 0) continue;
    const double precision = t / npred[label], recall = t / count;
    sum += 2 * precision * recall / (precision + recall);
  }
  return sum / static_cast<double>(ntrue.size());
}

double nmi(const std::vector<int>& pred, const std::vector<int>& truth) {
  const auto c = contingency(pred, truth);
  const double n = static_cast<double>(pred.size());
  std::vector<double> rows(c.size(), 0.0), cols(c[0].size(), 0.0);
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = 0; j < c[i].size(); ++j) {
      rows[i] += c[i][j];
      cols[j] += c[i][j];
    }
  const double hp = entropy(rows, n), ht = entropy(cols, n);
  if (hp == 0 && ht == 0) return 1.0;
  std::vector<double> terms;
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = 0; j < c[i].size(); ++j)
      if (c[i][j] > 0) terms.push_back(c[i][j] / n * std::log(n * c[i][j] / (rows[i] * cols[j])));
  const double mi = sorted_sum(std::move(terms));
  return std::clamp(mi / ((hp + ht) / 2), 0.0, 1.0);
}

double ari(const std::vector<int>& pred, const std::vector<int>& truth) {
  const auto c = contingency(pred, truth);
  const double n = static_cast<double>(pred.size());
  std::vector<double> rows(c.size(), 0.0), cols(c[0].size(), 0.0);
  double index = 0;
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = 0; j < c[i].size(); ++j) {
      rows[i] += c[i][j];
      cols[j] += c[i][j];
      index += comb2(c[i][j]);
    }
  double sa = 0, sb = 0;
  for (double r : rows) sa += comb2(r);
  for (double v : cols) sb += comb2(v);
  const double expected = n > 1 ? sa * sb / comb2(n) : 0.0;
  const double max_index = (sa + sb) / 2;
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

Scores score(const std::vector<int>& pred, const std::vector<int>& truth) {
  const std::vector<int> matched = match_labels(pred, truth);
  return {nmi(pred, truth), ari(pred, truth), accuracy(matched, truth), f1_macro(matched, truth)};
}

}  // namespace grass::metrics
