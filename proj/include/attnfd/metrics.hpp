#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attnfd/netpbm.hpp"
#include "attnfd/tensor.hpp"

namespace attnfd {

/// K x K integer table; rows are ground truth, columns are predictions.
struct ConfusionMatrix {
  int K = 0;
  std::vector<int64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int k) : K(k), counts(std::size_t(k) * k, 0) {
    if (k < 1) throw ContractError("confusion matrix needs K >= 1");
  }

  int64_t& at(int truth, int pred) { return counts[std::size_t(truth) * K + pred]; }
  int64_t at(int truth, int pred) const { return counts[std::size_t(truth) * K + pred]; }

  int64_t total() const {
    int64_t t = 0;
    for (int64_t c : counts) t += c;
    return t;
  }

  void merge(const ConfusionMatrix& o) {
    if (o.K != K) throw ContractError("confusion matrix merge: class counts differ");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
  }
};

inline void accumulate(ConfusionMatrix& cm, const ByteImage& pred, const ByteImage& label,
                       int ignore_index = 255) {
  if (pred.w != label.w || pred.h != label.h)
    throw DimensionError("accumulate: prediction and label sizes differ");
  for (std::size_t i = 0; i < label.v.size(); ++i) {
    int lab = label.v[i];
    if (lab == ignore_index) continue;
    if (lab < 0 || lab >= cm.K)
      throw LabelError("accumulate: label " + std::to_string(lab) + " outside [0," +
                       std::to_string(cm.K) + ")");
    int p = pred.v[i];
    if (p < 0 || p >= cm.K)
      throw ContractError("accumulate: prediction " + std::to_string(p) + " outside [0," +
                          std::to_string(cm.K) + ")");
    ++cm.at(lab, p);
  }
}

struct MiouResult {
  real miou = 0;
  std::vector<real> per_class;    // meaningful only where defined[k] is set
  std::vector<uint8_t> defined;   // class appears in truth or prediction
  bool any_defined = false;
};

/// IoU_k = diag_k / (row_k + col_k - diag_k); classes absent from both truth
/// and prediction are undefined and excluded from the mean.
inline MiouResult miou(const ConfusionMatrix& cm) {
  MiouResult r;
  r.per_class.assign(std::size_t(cm.K), real(0));
  r.defined.assign(std::size_t(cm.K), 0);
  real sum = 0;
  int defined = 0;
  for (int k = 0; k < cm.K; ++k) {
    int64_t row = 0, col = 0;
    for (int j = 0; j < cm.K; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    int64_t denom = row + col - cm.at(k, k);
    if (denom == 0) continue;
    r.per_class[std::size_t(k)] = real(cm.at(k, k)) / real(denom);
    r.defined[std::size_t(k)] = 1;
    sum += r.per_class[std::size_t(k)];
    ++defined;
  }
  r.any_defined = defined > 0;
  r.miou = defined > 0 ? sum / real(defined) : real(0);
  return r;
}

/// trace / total; empty evaluation signals "no value".
inline std::optional<real> pixel_accuracy(const ConfusionMatrix& cm) {
  int64_t total = cm.total();
  if (total == 0) return std::nullopt;
  int64_t diag = 0;
  for (int k = 0; k < cm.K; ++k) diag += cm.at(k, k);
  return real(diag) / real(total);
}

/// Per-pixel argmax over the class axis of (n,K,h,w) logits; ties go to the
/// lowest class id.
inline std::vector<ByteImage> predict_labels(const Tensor& logits) {
  if (logits.rank() != 4)
    throw DimensionError("predict_labels: expected (n,K,h,w), got " + logits.shape_str());
  const int n = logits.extent(0), K = logits.extent(1), h = logits.extent(2),
            w = logits.extent(3);
  if (K > 255) throw ContractError("predict_labels: more than 255 classes");
  const int64_t hw = int64_t(h) * w;
  std::vector<ByteImage> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    ByteImage m(w, h);
    const real* base = logits.data() + int64_t(i) * K * hw;
    for (int64_t p = 0; p < hw; ++p) {
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (base[int64_t(k) * hw + p] > base[int64_t(best) * hw + p]) best = k;
      m.v[std::size_t(p)] = uint8_t(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace attnfd
