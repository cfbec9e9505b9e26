#pragma once

#include <cstddef>
#include <vector>

// Segmentation scores between predicted and ground-truth label sequences.

namespace grass::metrics {

/// Minimum-cost assignment; out[r] is the column given to row r. Rectangular
/// inputs are padded with a large constant. Throws on non-finite costs.
std::vector<std::size_t> hungarian(const std::vector<std::vector<double>>& cost);

/// Contingency counts [pred label][truth label].
std::vector<std::vector<double>> contingency(const std::vector<int>& pred, const std::vector<int>& truth);

/// Relabels pred to maximize agreement with truth. Predicted labels left
/// without a partner get fresh labels past the truth range.
std::vector<int> match_labels(const std::vector<int>& pred, const std::vector<int>& truth);

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth);
/// Mean per-class F1 over classes present in truth.
double f1_macro(const std::vector<int>& pred, const std::vector<int>& truth);
/// Mutual information over the arithmetic mean of the two entropies; 1 when
/// both labelings are single-cluster.
double nmi(const std::vector<int>& pred, const std::vector<int>& truth);
/// Adjusted Rand index; 1 in the degenerate case where it is undefined.
double ari(const std::vector<int>& pred, const std::vector<int>& truth);

struct Scores {
  double nmi = 0;
  double ari = 0;
  double accuracy = 0;
  double f1 = 0;
};

/// Hungarian matching followed by all four scores.
Scores score(const std::vector<int>& pred, const std::vector<int>& truth);

}  // namespace grass::metrics
