// Confusion-matrix segmentation metrics (IoU, mIoU, gIoU, accuracy, AP,
// FPR/FNR) and trimap boundary evaluation.

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace aseg {

// row = ground truth, column = prediction; ignore pixels are never counted
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes)
      : num_classes_(num_classes), counts_(std::size_t(num_classes) * num_classes, 0) {}

  int num_classes() const { return num_classes_; }

  std::uint64_t& at(int truth, int pred) {
    return counts_[std::size_t(truth) * num_classes_ + pred];
  }
  std::uint64_t at(int truth, int pred) const {
    return counts_[std::size_t(truth) * num_classes_ + pred];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : counts_) t += v;
    return t;
  }

  void accumulate(const std::vector<int>& pred, const std::vector<int>& truth,
                  int ignore = 255) {
    if (pred.size() != truth.size())
      throw std::invalid_argument("ConfusionMatrix::accumulate: size mismatch");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (truth[i] == ignore) continue;
      if (truth[i] < 0 || truth[i] >= num_classes_ || pred[i] < 0 || pred[i] >= num_classes_)
        throw std::invalid_argument("ConfusionMatrix::accumulate: label out of range (" +
                                    std::to_string(truth[i]) + "/" + std::to_string(pred[i]) +
                                    " with C=" + std::to_string(num_classes_) + ")");
      ++at(truth[i], pred[i]);
    }
  }

  // restricted accumulation: only pixels with mask[i] true are counted
  void accumulate_masked(const std::vector<int>& pred, const std::vector<int>& truth,
                         const std::vector<char>& mask, int ignore = 255) {
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (!mask[i] || truth[i] == ignore) continue;
      if (truth[i] < 0 || truth[i] >= num_classes_ || pred[i] < 0 || pred[i] >= num_classes_)
        throw std::invalid_argument("ConfusionMatrix: label out of range");
      ++at(truth[i], pred[i]);
    }
  }

  ConfusionMatrix& merge(const ConfusionMatrix& other) {
    if (other.num_classes_ != num_classes_)
      throw std::invalid_argument("ConfusionMatrix::merge: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }

  std::uint64_t tp(int c) const { return at(c, c); }
  std::uint64_t fp(int c) const {
    std::uint64_t s = 0;
    for (int t = 0; t < num_classes_; ++t)
      if (t != c) s += at(t, c);
    return s;
  }
  std::uint64_t fn(int c) const {
    std::uint64_t s = 0;
    for (int p = 0; p < num_classes_; ++p)
      if (p != c) s += at(c, p);
    return s;
  }
  std::uint64_t tn(int c) const { return total() - tp(c) - fp(c) - fn(c); }

 private:
  int num_classes_;
  std::vector<std::uint64_t> counts_;
};

inline void require_nonempty(const ConfusionMatrix& cm, const std::string& op) {
  if (cm.total() == 0)
    throw std::domain_error(op + ": metric undefined on an empty confusion matrix");
}

// IoU for one class; nullopt when the class is absent from both prediction
// and truth (denominator zero)
inline std::optional<double> iou(const ConfusionMatrix& cm, int c) {
  require_nonempty(cm, "iou");
  std::uint64_t denom = cm.tp(c) + cm.fp(c) + cm.fn(c);
  if (denom == 0) return std::nullopt;
  return double(cm.tp(c)) / double(denom);
}

struct MiouOpts {
  bool absent_as_one = false;  // count absent classes as IoU 1 instead of skipping
};

inline double miou(const ConfusionMatrix& cm, MiouOpts opts = {}) {
  require_nonempty(cm, "miou");
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    auto v = iou(cm, c);
    if (v) {
      sum += *v;
      ++defined;
    } else if (opts.absent_as_one) {
      sum += 1.0;
      ++defined;
    }
  }
  if (defined == 0) throw std::domain_error("miou: no class has a defined IoU");
  return sum / defined;
}

inline double giou(const ConfusionMatrix& cm) {
  require_nonempty(cm, "giou");
  double num = 0.0, den = 0.0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    num += double(cm.tp(c));
    den += double(cm.tp(c) + cm.fp(c) + cm.fn(c));
  }
  return num / den;
}

inline double pixel_accuracy(const ConfusionMatrix& cm) {
  require_nonempty(cm, "pixel_accuracy");
  double tr = 0.0;
  for (int c = 0; c < cm.num_classes(); ++c) tr += double(cm.tp(c));
  return tr / double(cm.total());
}

// mean per-class precision over classes that were predicted at least once
inline double avg_precision(const ConfusionMatrix& cm) {
  require_nonempty(cm, "avg_precision");
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    std::uint64_t denom = cm.tp(c) + cm.fp(c);
    if (denom == 0) continue;
    sum += double(cm.tp(c)) / double(denom);
    ++defined;
  }
  if (defined == 0) throw std::domain_error("avg_precision: nothing predicted");
  return sum / defined;
}

// class-averaged FP/(FP+TN) and FN/(FN+TP)
inline double fpr(const ConfusionMatrix& cm) {
  require_nonempty(cm, "fpr");
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    std::uint64_t denom = cm.fp(c) + cm.tn(c);
    if (denom == 0) continue;
    sum += double(cm.fp(c)) / double(denom);
    ++defined;
  }
  return defined ? sum / defined : 0.0;
}

inline double fnr(const ConfusionMatrix& cm) {
  require_nonempty(cm, "fnr");
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    std::uint64_t denom = cm.fn(c) + cm.tp(c);
    if (denom == 0) continue;
    sum += double(cm.fn(c)) / double(denom);
    ++defined;
  }
  return defined ? sum / defined : 0.0;
}

struct MetricsReport {
  std::vector<std::optional<double>> per_class_iou;
  double miou = 0.0, giou = 0.0, accuracy = 0.0, ap = 0.0, fpr = 0.0, fnr = 0.0;
};

inline MetricsReport compute_metrics(const ConfusionMatrix& cm, MiouOpts opts = {}) {
  MetricsReport r;
  for (int c = 0; c < cm.num_classes(); ++c) r.per_class_iou.push_back(iou(cm, c));
  r.miou = miou(cm, opts);
  r.giou = giou(cm);
  r.accuracy = pixel_accuracy(cm);
  r.ap = avg_precision(cm);
  r.fpr = fpr(cm);
  r.fnr = fnr(cm);
  return r;
}

// --- trimap evaluation ------------------------------------------------------

// Band mask: pixels within `band` steps (8-connected dilation) of any
// void-labeled pixel.
inline std::vector<char> trimap_band_mask(const std::vector<int>& truth, int h, int w,
                                          int band, int void_label = 255) {
  std::vector<char> mask(truth.size(), 0);
  bool any_void = false;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (truth[i] == void_label) {
      mask[i] = 1;
      any_void = true;
    }
  if (!any_void)
    throw std::domain_error("trimap_band_mask: ground truth contains no void pixels");
  std::vector<char> cur = mask;
  for (int it = 0; it < band; ++it) {
    std::vector<char> next = cur;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (cur[std::size_t(y) * w + x]) continue;
        for (int dy = -1; dy <= 1 && !next[std::size_t(y) * w + x]; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int ny = y + dy, nx = x + dx;
            if (ny >= 0 && ny < h && nx >= 0 && nx < w && cur[std::size_t(ny) * w + nx]) {
              next[std::size_t(y) * w + x] = 1;
              break;
            }
          }
      }
    cur = std::move(next);
  }
  return cur;
}

// mIoU restricted to each trimap band width
inline std::vector<std::pair<int, double>> trimap_miou(const std::vector<int>& pred,
                                                       const std::vector<int>& truth, int h,
                                                       int w, int num_classes,
                                                       const std::vector<int>& band_widths,
                                                       int void_label = 255) {
  std::vector<std::pair<int, double>> out;
  for (int band : band_widths) {
    auto mask = trimap_band_mask(truth, h, w, band, void_label);
    ConfusionMatrix cm(num_classes);
    cm.accumulate_masked(pred, truth, mask, void_label);
    out.emplace_back(band, miou(cm));
  }
  return out;
}

}  // namespace aseg
