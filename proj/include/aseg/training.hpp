// Losses, Adam optimizer, data augmentation, and the single-stage unimodal /
// three-stage fusion training procedures.

#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "aseg/data.hpp"
#include "aseg/graph.hpp"
#include "aseg/metrics.hpp"

namespace aseg {

struct LossWeights {
  double lambda1 = 0.6;
  double lambda2 = 0.5;
};

inline TensorPtr<double> cross_entropy_loss(Tape<double>& tape,
                                            const TensorPtr<double>& logits,
                                            const std::vector<int>& labels,
                                            int ignore_index = 255) {
  return softmax_cross_entropy(tape, logits, labels, ignore_index);
}

// L = L_main + lambda1 * L_aux1 + lambda2 * L_aux2
inline TensorPtr<double> total_loss(Tape<double>& tape, const TensorPtr<double>& main,
                                    const TensorPtr<double>& aux1,
                                    const TensorPtr<double>& aux2, const LossWeights& w) {
  return weighted_sum<double>(tape, {main, aux1, aux2}, {1.0, w.lambda1, w.lambda2});
}

// --- Adam -------------------------------------------------------------------

class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-10;

  // lr_for maps a parameter name to its learning rate; lr 0 leaves the
  // parameter and its moments untouched
  void step(const std::vector<LayerGraph::Param>& params,
            const std::function<double(const std::string&)>& lr_for) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, double(t_));
    const double bc2 = 1.0 - std::pow(beta2, double(t_));
    for (const auto& p : params) {
      double lr = lr_for(p.name);
      if (lr == 0.0) continue;
      auto& t = *p.tensor;
      if (t.grad.size() != t.data.size()) continue;  // unreached parameter
      auto& slot = slots_[p.name];
      if (slot.m.size() != t.data.size()) {
        slot.m.assign(t.data.size(), 0.0);
        slot.v.assign(t.data.size(), 0.0);
      }
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        double g = t.grad[i];
        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
        double mhat = slot.m[i] / bc1;
        double vhat = slot.v[i] / bc2;
        t.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  void step(const std::vector<LayerGraph::Param>& params, double lr) {
    step(params, [lr](const std::string&) { return lr; });
  }

  long long iterations() const { return t_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::map<std::string, Slot> slots_;
  long long t_ = 0;
};

// --- schedules --------------------------------------------------------------

struct TrainStage {
  int iterations = 0;
  double encoder_lr = 1e-3;
  double decoder_lr = 1e-3;
  int batch_size = 4;
};

struct TrainSchedule {
  std::vector<TrainStage> stages;

  static TrainSchedule unimodal_desk(int iterations = 800, int batch = 4) {
    return {{{iterations, 1e-3, 1e-3, batch}}};
  }
  // fusion stages 2 and 3 (stage 1 is the unimodal pre-training)
  static TrainSchedule fusion_desk(int iters2 = 1000, int iters3 = 500, int batch = 4) {
    return {{{iters2, 1e-4, 1e-3, batch}, {iters3, 0.0, 1e-5, batch}}};
  }
};

inline bool is_encoder_param(const std::string& name) {
  return name.rfind("enc.", 0) == 0 || name.rfind("easpp.", 0) == 0 ||
         name.rfind("a.", 0) == 0 || name.rfind("b.", 0) == 0;
}

// --- augmentation -----------------------------------------------------------

struct Range {
  double lo = 0.0, hi = 0.0;
};

struct AugmentConfig {
  Range rotation_deg{-13.0, 13.0};
  Range skew{0.05, 0.10};
  Range scale{0.5, 2.0};
  Range vignette{210.0, 300.0};  // radius in pixels at 768-wide reference resolution
  Range crop{0.8, 0.9};
  Range brightness{-40.0, 40.0};  // in 0..255 units
  Range contrast{0.5, 1.5};
  double flip_prob = 0.5;
  double apply_prob = 0.5;  // chance each individual transform fires

  static AugmentConfig identity() {
    AugmentConfig c;
    c.flip_prob = 0.0;
    c.apply_prob = 0.0;
    return c;
  }
};

// Shared geometric transform for both modalities and the label; bilinear
// sampling for modalities, nearest-neighbor for labels, out-of-frame pixels
// become 0 / ignore.
inline void augment(Sample& s, const AugmentConfig& cfg, Rng& rng) {
  const int H = s.h, W = s.w;
  double angle = 0.0, shear = 0.0, zoom = 1.0;
  bool flip = rng.uniform() < cfg.flip_prob;
  if (rng.uniform() < cfg.apply_prob)
    angle = rng.uniform(cfg.rotation_deg.lo, cfg.rotation_deg.hi) * 3.14159265358979 / 180.0;
  if (rng.uniform() < cfg.apply_prob)
    shear = rng.uniform(cfg.skew.lo, cfg.skew.hi) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  if (rng.uniform() < cfg.apply_prob) zoom = rng.uniform(cfg.scale.lo, cfg.scale.hi);
  if (rng.uniform() < cfg.apply_prob) zoom /= rng.uniform(cfg.crop.lo, cfg.crop.hi);

  // forward map: translate to center, flip, shear, rotate, zoom; sample with
  // the inverse
  const double ca = std::cos(angle), sa = std::sin(angle);
  // M = zoom * R(angle) * Shear * Flip ; inverse applied to output coords
  double m00 = zoom * ca, m01 = zoom * (ca * shear - sa);
  double m10 = zoom * sa, m11 = zoom * (sa * shear + ca);
  if (flip) {  // left-right flip: negate the x column
    m01 = -m01;
    m11 = -m11;
  }
  const double det = m00 * m11 - m01 * m10;
  const double i00 = m11 / det, i01 = -m01 / det, i10 = -m10 / det, i11 = m00 / det;
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;

  bool geometric = flip || angle != 0.0 || shear != 0.0 || zoom != 1.0;
  if (geometric) {
    auto a0 = s.modality_a->data, b0 = s.modality_b->data;
    auto l0 = s.label;
    auto sample_bilinear = [&](const std::vector<double>& src, int ch, double y, double x) {
      int y0 = (int)std::floor(y), x0 = (int)std::floor(x);
      double wy = y - y0, wx = x - x0;
      auto px = [&](int yy, int xx) -> double {
        if (yy < 0 || yy >= H || xx < 0 || xx >= W) return 0.0;
        return src[(std::size_t(ch) * H + yy) * W + xx];
      };
      return px(y0, x0) * (1 - wy) * (1 - wx) + px(y0, x0 + 1) * (1 - wy) * wx +
             px(y0 + 1, x0) * wy * (1 - wx) + px(y0 + 1, x0 + 1) * wy * wx;
    };
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double dy = y - cy, dx = x - cx;
        double sy = i00 * dy + i01 * dx + cy;
        double sx = i10 * dy + i11 * dx + cx;
        int ny = (int)std::lround(sy), nx = (int)std::lround(sx);
        s.label[std::size_t(y) * W + x] =
            (ny >= 0 && ny < H && nx >= 0 && nx < W) ? l0[std::size_t(ny) * W + nx] : 255;
        for (int ch = 0; ch < 3; ++ch) {
          s.modality_a->data[(std::size_t(ch) * H + y) * W + x] = sample_bilinear(a0, ch, sy, sx);
          s.modality_b->data[(std::size_t(ch) * H + y) * W + x] = sample_bilinear(b0, ch, sy, sx);
        }
      }
  }

  // photometric, applied to the image modalities only
  auto photometric = [&](Tensor<double>& img) {
    double bright = 0.0, contrast = 1.0;
    double vignette_r = -1.0;
    if (rng.uniform() < cfg.apply_prob)
      bright = rng.uniform(cfg.brightness.lo, cfg.brightness.hi) / 255.0;
    if (rng.uniform() < cfg.apply_prob)
      contrast = rng.uniform(cfg.contrast.lo, cfg.contrast.hi);
    if (rng.uniform() < cfg.apply_prob)
      vignette_r = rng.uniform(cfg.vignette.lo, cfg.vignette.hi) * double(W) / 768.0;
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double& v = img.data[(std::size_t(ch) * H + y) * W + x];
          v = (v - 0.5) * contrast + 0.5 + bright;
          if (vignette_r > 0.0) {
            double r = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
            if (r > vignette_r * 0.5)
              v *= std::max(0.3, 1.0 - (r - vignette_r * 0.5) / vignette_r);
          }
          v = std::max(0.0, std::min(1.0, v));
        }
  };
  photometric(*s.modality_a);
  photometric(*s.modality_b);
}

// --- training loops ---------------------------------------------------------

struct TrainLogRow {
  long long iteration = 0;
  double loss_main = 0.0, loss_aux1 = 0.0, loss_aux2 = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    os << "iteration,loss_main,loss_aux1,loss_aux2,lr\n";
    for (const auto& r : rows)
      os << r.iteration << "," << r.loss_main << "," << r.loss_aux1 << "," << r.loss_aux2
         << "," << r.lr << "\n";
  }
};

enum class Modality { A, B, Both };

inline std::vector<TensorPtr<double>> feeds_for(const Batch& batch, Modality m) {
  switch (m) {
    case Modality::A: return {batch.a};
    case Modality::B: return {batch.b};
    default: return {batch.a, batch.b};
  }
}

struct TrainOpts {
  Modality modality = Modality::A;
  LossWeights loss_weights;
  std::uint64_t seed = 7;
  bool augment_enabled = false;
  AugmentConfig augment_cfg;
  std::string checkpoint_dir;  // stage checkpoints written here when set
};

namespace detail {

inline TrainLog run_training(LayerGraph& g, const DatasetManifest& data,
                             const TrainSchedule& schedule, const TrainOpts& opts,
                             Adam& adam) {
  TrainLog log;
  Rng dropout_rng(opts.seed ^ 0xd80f);
  BatchIterator::AugmentFn aug = nullptr;
  if (opts.augment_enabled) {
    AugmentConfig acfg = opts.augment_cfg;
    aug = [acfg](Sample& s, Rng& rng) { augment(s, acfg, rng); };
  }
  auto params = g.parameters();
  long long iteration = 0;
  for (std::size_t stage_idx = 0; stage_idx < schedule.stages.size(); ++stage_idx) {
    const auto& stage = schedule.stages[stage_idx];
    BatchIterator it(data, "train", stage.batch_size, opts.seed, true, aug);
    auto lr_for = [&](const std::string& name) {
      return is_encoder_param(name) ? stage.encoder_lr : stage.decoder_lr;
    };
    int epoch = 0;
    it.start_epoch(epoch);
    for (int step = 0; step < stage.iterations; ++step, ++iteration) {
      Batch batch;
      if (!it.next(batch)) {
        it.start_epoch(++epoch);
        it.next(batch);
      }
      LayerGraph::ForwardOpts fo;
      fo.training = true;
      fo.dropout_rng = &dropout_rng;
      auto r = g.forward(feeds_for(batch, opts.modality), fo);
      auto l_main = cross_entropy_loss(r.tape, r.acts[g.output], batch.labels);
      auto l_aux1 = cross_entropy_loss(r.tape, r.acts[g.aux1], batch.labels);
      auto l_aux2 = cross_entropy_loss(r.tape, r.acts[g.aux2], batch.labels);
      auto loss = total_loss(r.tape, l_main, l_aux1, l_aux2, opts.loss_weights);
      for (auto& p : params) p.tensor->zero_grad();
      r.tape.backward(loss);
      adam.step(params, lr_for);
      log.rows.push_back({iteration, l_main->data[0], l_aux1->data[0], l_aux2->data[0],
                          stage.decoder_lr});
    }
    if (!opts.checkpoint_dir.empty())
      save_weights(g, opts.checkpoint_dir + "/stage" + std::to_string(stage_idx + 1) + ".ckpt");
  }
  return log;
}

}  // namespace detail

inline TrainLog train_unimodal(LayerGraph& g, const DatasetManifest& data,
                               const TrainSchedule& schedule, const TrainOpts& opts) {
  Adam adam;
  return detail::run_training(g, data, schedule, opts, adam);
}

// Stages 2 and 3 of the fusion protocol: transfer both encoders from the
// trained unimodal models, train end to end with split learning rates, then
// freeze the encoders and fine-tune decoder + fusion blocks.
inline TrainLog train_fusion_multistage(LayerGraph& fusion, const LayerGraph& unimodal_a,
                                        const LayerGraph& unimodal_b,
                                        const DatasetManifest& data,
                                        const TrainSchedule& schedule,
                                        const TrainOpts& opts_in) {
  if (schedule.stages.size() != 2)
    throw std::invalid_argument("train_fusion_multistage: expected 2 stages (after "
                                "unimodal pre-training)");
  transfer_encoder(fusion, unimodal_a, 'a');
  transfer_encoder(fusion, unimodal_b, 'b');
  TrainOpts opts = opts_in;
  opts.modality = Modality::Both;
  Adam adam;
  return detail::run_training(fusion, data, schedule, opts, adam);
}

// --- evaluation -------------------------------------------------------------

struct EvalOpts {
  Modality modality = Modality::Both;
  bool flip_average = false;  // average logits over a left-right flip
  int batch_size = 4;
};

inline TensorPtr<double> flip_lr(const TensorPtr<double>& x) {
  auto y = Tensor<double>::make(x->n, x->c, x->h, x->w);
  for (int in = 0; in < x->n; ++in)
    for (int ic = 0; ic < x->c; ++ic)
      for (int iy = 0; iy < x->h; ++iy)
        for (int ix = 0; ix < x->w; ++ix)
          y->at(in, ic, iy, ix) = x->at(in, ic, iy, x->w - 1 - ix);
  return y;
}

inline ConfusionMatrix evaluate_model(LayerGraph& g, const DatasetManifest& data,
                                      const std::string& split, int num_classes,
                                      const EvalOpts& opts = {}) {
  ConfusionMatrix cm(num_classes);
  BatchIterator it(data, split, opts.batch_size, 0, false);
  it.start_epoch(0);
  Batch batch;
  LayerGraph::ForwardOpts fo;
  fo.record = false;
  while (it.next(batch)) {
    auto feeds = feeds_for(batch, opts.modality);
    auto r = g.forward(feeds, fo);
    auto logits = r.acts[g.output];
    if (opts.flip_average) {
      std::vector<TensorPtr<double>> flipped;
      for (auto& f : feeds) flipped.push_back(flip_lr(f));
      auto r2 = g.forward(flipped, fo);
      auto back = flip_lr(r2.acts[g.output]);
      auto avg = Tensor<double>::make(logits->n, logits->c, logits->h, logits->w);
      for (std::size_t i = 0; i < avg->size(); ++i)
        avg->data[i] = 0.5 * (logits->data[i] + back->data[i]);
      logits = avg;
    }
    const std::size_t plane = std::size_t(logits->h) * logits->w;
    std::vector<int> pred(std::size_t(logits->n) * plane);
    for (int in = 0; in < logits->n; ++in)
      for (std::size_t i = 0; i < plane; ++i) {
        int best = 0;
        double bv = logits->data[(std::size_t(in) * logits->c) * plane + i];
        for (int ic = 1; ic < logits->c; ++ic) {
          double v = logits->data[(std::size_t(in) * logits->c + ic) * plane + i];
          if (v > bv) {
            bv = v;
            best = ic;
          }
        }
        pred[std::size_t(in) * plane + i] = best;
      }
    cm.accumulate(pred, batch.labels);
  }
  return cm;
}

}  // namespace aseg
