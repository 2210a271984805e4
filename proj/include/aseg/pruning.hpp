// Channel pruning: first-order Taylor ranking, an exact zero-out oracle for
// validation, global selection, and shortcut-safe graph surgery that keeps
// residual additions shape-consistent via zero-filled channel expansion.

#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "aseg/graph.hpp"
#include "aseg/metrics.hpp"
#include "aseg/training.hpp"

#include <json.hpp>

namespace aseg {

struct Ranking {
  std::vector<std::string> layers;                 // evaluation order
  std::map<std::string, std::vector<double>> scores;  // per output channel
};

namespace detail {

inline void l2_normalize_per_layer(Ranking& r) {
  for (auto& [name, s] : r.scores) {
    double norm = 0.0;
    for (double v : s) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& v : s) v /= norm;
  }
}

}  // namespace detail

// Channel importance is measured on the layer's activation: the conv output
// followed through any directly attached BatchNorm/ReLU chain. Zero-forcing
// at that node is exactly equivalent to structural removal, which is not
// true at the raw conv output (a zeroed channel still shifts under BN).
inline int activation_node_for(const LayerGraph& g, const std::string& conv_name) {
  int id = g.node_id(conv_name);
  bool advanced = true;
  while (advanced) {
    advanced = false;
    for (int j = id + 1; j < (int)g.nodes.size(); ++j) {
      const Node& n = g.nodes[j];
      if ((n.kind == OpKind::BatchNorm || n.kind == OpKind::ReLU) &&
          n.inputs.size() == 1 && n.inputs[0] == id) {
        id = j;
        advanced = true;
        break;
      }
    }
  }
  return id;
}

// loss used for ranking; defaults to cross-entropy on the main output
using RankLossFn =
    std::function<TensorPtr<double>(Tape<double>&, const TensorPtr<double>&, const Batch&)>;

inline RankLossFn default_rank_loss() {
  return [](Tape<double>& tape, const TensorPtr<double>& logits, const Batch& batch) {
    return cross_entropy_loss(tape, logits, batch.labels);
  };
}

// Theta_k = | mean over batch and spatial positions of (dL/dz_k * z_k) |,
// followed by an L2 normalization within each layer. Evaluated with
// inference-mode batch statistics so ranking never perturbs the model.
inline Ranking taylor_rank(LayerGraph& g, const std::vector<std::string>& layers,
                           const std::vector<Batch>& batches,
                           Modality modality = Modality::A,
                           const RankLossFn& loss_fn = default_rank_loss()) {
  Ranking rank;
  rank.layers = layers;
  std::map<std::string, int> ids;
  for (const auto& name : layers) ids[name] = activation_node_for(g, name);
  // per batch: |mean over batch samples and spatial positions of grad*act|;
  // the per-batch magnitudes are then averaged over the supplied batches
  std::map<std::string, std::vector<double>> sums;
  for (const auto& batch : batches) {
    LayerGraph::ForwardOpts fo;
    fo.training = false;
    fo.record = true;
    auto r = g.forward(feeds_for(batch, modality), fo);
    auto loss = loss_fn(r.tape, r.acts[g.output], batch);
    for (auto& p : g.parameters()) p.tensor->zero_grad();
    r.tape.backward(loss);
    for (const auto& name : layers) {
      auto& act = *r.acts[ids[name]];
      auto& acc = sums[name];
      if (acc.empty()) acc.assign(act.c, 0.0);
      const std::size_t plane = std::size_t(act.h) * act.w;
      if (act.grad.size() != act.data.size()) continue;
      const double cnt = double(act.n) * double(plane);
      for (int ic = 0; ic < act.c; ++ic) {
        double s = 0.0;
        for (int in = 0; in < act.n; ++in) {
          const std::size_t base = (std::size_t(in) * act.c + ic) * plane;
          for (std::size_t i = 0; i < plane; ++i)
            s += act.grad[base + i] * act.data[base + i];
        }
        acc[ic] += std::abs(s / cnt);
      }
    }
  }
  for (const auto& name : layers) {
    auto& s = sums[name];
    auto& out = rank.scores[name];
    out.resize(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i] / double(batches.size());
  }
  detail::l2_normalize_per_layer(rank);
  return rank;
}

// Exact importance: |L(channel zeroed) - L(baseline)| averaged over batches.
inline Ranking oracle_rank(LayerGraph& g, const std::vector<std::string>& layers,
                           const std::vector<Batch>& batches,
                           Modality modality = Modality::A,
                           const RankLossFn& loss_fn = default_rank_loss()) {
  Ranking rank;
  rank.layers = layers;
  std::map<std::string, int> ids;
  for (const auto& name : layers) ids[name] = activation_node_for(g, name);
  LayerGraph::ForwardOpts fo;
  fo.record = false;
  for (const auto& name : layers) {
    int id = ids[name];
    int channels = -1;
    std::vector<double> score;
    for (const auto& batch : batches) {
      auto feeds = feeds_for(batch, modality);
      auto r0 = g.forward(feeds, fo);
      double base = loss_fn(r0.tape, r0.acts[g.output], batch)->data[0];
      if (channels < 0) {
        channels = r0.acts[id]->c;
        score.assign(channels, 0.0);
      }
      for (int ch = 0; ch < channels; ++ch) {
        LayerGraph::ForwardOpts fz = fo;
        fz.zero_at[id] = {ch};
        auto rz = g.forward(feeds, fz);
        double zl = loss_fn(rz.tape, rz.acts[g.output], batch)->data[0];
        score[ch] += std::abs(zl - base);
      }
    }
    for (double& v : score) v /= double(batches.size());
    rank.scores[name] = std::move(score);
  }
  detail::l2_normalize_per_layer(rank);
  return rank;
}

// --- selection ---------------------------------------------------------------

struct PrunePlan {
  std::vector<std::string> layers;                // layer order
  std::map<std::string, std::vector<int>> keep;   // kept channels, sorted ascending
  std::map<std::string, std::vector<int>> removed;
};

// Remove the globally lowest-scoring fraction of channels; ties broken by
// layer order then channel index; every layer keeps at least one channel.
inline PrunePlan select_prune_set(const Ranking& rank, double fraction) {
  if (fraction < 0.0 || fraction >= 1.0)
    throw std::invalid_argument("select_prune_set: fraction must be in [0,1)");
  struct Entry {
    double score;
    int layer_idx;
    int channel;
  };
  std::vector<Entry> pool;
  long long total = 0;
  for (int li = 0; li < (int)rank.layers.size(); ++li) {
    const auto& s = rank.scores.at(rank.layers[li]);
    total += (long long)s.size();
    for (int ch = 0; ch < (int)s.size(); ++ch) pool.push_back({s[ch], li, ch});
  }
  std::stable_sort(pool.begin(), pool.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.layer_idx != b.layer_idx) return a.layer_idx < b.layer_idx;
    return a.channel < b.channel;
  });
  long long target = (long long)std::floor(fraction * double(total));
  std::map<int, long long> kept_count;
  for (int li = 0; li < (int)rank.layers.size(); ++li)
    kept_count[li] = (long long)rank.scores.at(rank.layers[li]).size();
  PrunePlan plan;
  plan.layers = rank.layers;
  std::map<int, std::vector<int>> removed;
  long long removed_total = 0;
  for (const auto& e : pool) {
    if (removed_total >= target) break;
    if (kept_count[e.layer_idx] <= 1) continue;
    removed[e.layer_idx].push_back(e.channel);
    --kept_count[e.layer_idx];
    ++removed_total;
  }
  for (int li = 0; li < (int)rank.layers.size(); ++li) {
    const auto& name = rank.layers[li];
    std::vector<bool> gone(rank.scores.at(name).size(), false);
    auto& rem = removed[li];
    std::sort(rem.begin(), rem.end());
    for (int ch : rem) gone[ch] = true;
    for (int ch = 0; ch < (int)gone.size(); ++ch)
      (gone[ch] ? plan.removed[name] : plan.keep[name]).push_back(ch);
    if (plan.keep[name].empty())
      throw std::logic_error("select_prune_set: layer lost all channels");
  }
  return plan;
}

inline nlohmann::json plan_to_json(const PrunePlan& plan) {
  nlohmann::json j;
  j["layers"] = plan.layers;
  for (const auto& name : plan.layers) {
    j["keep"][name] = plan.keep.at(name);
    j["removed"][name] = plan.removed.count(name) ? plan.removed.at(name) : std::vector<int>{};
  }
  return j;
}

inline PrunePlan plan_from_json(const nlohmann::json& j) {
  PrunePlan plan;
  plan.layers = j.at("layers").get<std::vector<std::string>>();
  for (const auto& name : plan.layers) {
    plan.keep[name] = j.at("keep").at(name).get<std::vector<int>>();
    plan.removed[name] = j.at("removed").at(name).get<std::vector<int>>();
  }
  return plan;
}

// --- surgery -------------------------------------------------------------

namespace detail {

inline TensorPtr<double> slice_out_channels(const TensorPtr<double>& w,
                                            const std::vector<int>& keep) {
  auto out = Tensor<double>::make(int(keep.size()), w->c, w->h, w->w, w->requires_grad);
  const std::size_t stride = std::size_t(w->c) * w->h * w->w;
  for (std::size_t i = 0; i < keep.size(); ++i)
    std::copy_n(w->data.begin() + std::size_t(keep[i]) * stride, stride,
                out->data.begin() + i * stride);
  return out;
}

inline TensorPtr<double> slice_in_channels(const TensorPtr<double>& w,
                                           const std::vector<int>& keep) {
  auto out = Tensor<double>::make(w->n, int(keep.size()), w->h, w->w, w->requires_grad);
  const std::size_t plane = std::size_t(w->h) * w->w;
  for (int o = 0; o < w->n; ++o)
    for (std::size_t i = 0; i < keep.size(); ++i)
      std::copy_n(w->data.begin() + (std::size_t(o) * w->c + keep[i]) * plane, plane,
                  out->data.begin() + (std::size_t(o) * keep.size() + i) * plane);
  return out;
}

inline TensorPtr<double> slice_vec_param(const TensorPtr<double>& v,
                                         const std::vector<int>& keep) {
  auto out = Tensor<double>::make(1, 1, 1, int(keep.size()), v->requires_grad);
  for (std::size_t i = 0; i < keep.size(); ++i) out->data[i] = v->data[keep[i]];
  return out;
}

inline std::vector<double> slice_vec(const std::vector<double>& v,
                                     const std::vector<int>& keep) {
  std::vector<double> out(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) out[i] = v[keep[i]];
  return out;
}

// Insert a node ahead of position pos, shifting every id >= pos by one. The
// new node's own input ids must refer to pre-insertion numbering of nodes
// earlier than pos.
inline int insert_node_before(LayerGraph& g, int pos, Node n) {
  for (int in : n.inputs)
    if (in >= pos)
      throw std::logic_error("insert_node_before: input must precede insertion point");
  g.nodes.insert(g.nodes.begin() + pos, std::move(n));
  auto fix = [pos](int& id) {
    if (id >= pos) ++id;
  };
  for (int i = 0; i < (int)g.nodes.size(); ++i) {
    if (i == pos) continue;
    for (int& in : g.nodes[i].inputs) fix(in);
  }
  for (int& in : g.inputs) fix(in);
  fix(g.output);
  if (g.aux1 >= 0) fix(g.aux1);
  if (g.aux2 >= 0) fix(g.aux2);
  for (auto& [k, v] : g.taps) fix(v);
  std::map<int, int> remapped;
  for (auto& [k, v] : g.input_channels) {
    int nk = k >= pos ? k + 1 : k;
    remapped[nk] = v;
  }
  g.input_channels = std::move(remapped);
  return pos;
}

}  // namespace detail

// Shrink the listed conv layers to their kept channels and propagate the
// reduced widths downstream. Where a reduced tensor meets a full-width one at
// a residual Add, a zero-filled ExpandChannels node restores the original
// width so the shortcut is untouched.
inline void apply_prune_with_mask(LayerGraph& g, const PrunePlan& plan) {
  std::map<std::string, const std::vector<int>*> pruned;
  for (const auto& name : plan.layers) pruned[name] = &plan.keep.at(name);

  // chmap[id]: original channel indices surviving at the node's output;
  // empty = full width. full_width[id]: original channel count (only
  // tracked where a map exists).
  std::vector<std::vector<int>> chmap(g.nodes.size());
  std::vector<int> full_width(g.nodes.size(), -1);

  for (int id = 0; id < (int)g.nodes.size(); ++id) {
    Node& n = g.nodes[id];
    const std::vector<int>* in_map =
        n.inputs.empty() || chmap[n.inputs[0]].empty() ? nullptr : &chmap[n.inputs[0]];
    switch (n.kind) {
      case OpKind::Input:
        break;
      case OpKind::Conv: {
        if (in_map) n.weight = detail::slice_in_channels(n.weight, *in_map);
        auto it = pruned.find(n.name);
        if (it != pruned.end()) {
          const auto& keep = *it->second;
          if (keep.empty()) throw std::invalid_argument("prune: empty keep list for " + n.name);
          full_width[id] = n.weight->n;
          n.weight = detail::slice_out_channels(n.weight, keep);
          if (n.bias) n.bias = detail::slice_vec_param(n.bias, keep);
          chmap[id] = keep;
        }
        break;
      }
      case OpKind::Deconv: {
        if (in_map) {
          n.weight = detail::slice_out_channels(n.weight, *in_map);  // Cin is dim 0
        }
        break;
      }
      case OpKind::BatchNorm: {
        if (in_map) {
          n.gamma = detail::slice_vec_param(n.gamma, *in_map);
          n.beta = detail::slice_vec_param(n.beta, *in_map);
          n.bn.running_mean = detail::slice_vec(n.bn.running_mean, *in_map);
          n.bn.running_var = detail::slice_vec(n.bn.running_var, *in_map);
          chmap[id] = *in_map;
          full_width[id] = full_width[n.inputs[0]];
        }
        break;
      }
      case OpKind::ReLU:
      case OpKind::Sigmoid:
      case OpKind::SoftmaxC:
      case OpKind::GlobalAvgPool:
      case OpKind::Bilinear:
      case OpKind::Dropout:
      case OpKind::BroadcastLike: {
        if (in_map) {
          chmap[id] = *in_map;
          full_width[id] = full_width[n.inputs[0]];
        }
        break;
      }
      case OpKind::Concat: {
        const auto& ma = chmap[n.inputs[0]];
        const auto& mb = chmap[n.inputs[1]];
        if (!ma.empty() || !mb.empty())
          throw std::logic_error("prune: reduced widths may not flow into Concat (layer '" +
                                 n.name + "')");
        break;
      }
      case OpKind::Add: {
        bool ra = !chmap[n.inputs[0]].empty(), rb = !chmap[n.inputs[1]].empty();
        if (ra && rb) {
          if (chmap[n.inputs[0]] != chmap[n.inputs[1]])
            throw std::logic_error("prune: mismatched reduced widths at Add '" + n.name + "'");
          chmap[id] = chmap[n.inputs[0]];
          full_width[id] = full_width[n.inputs[0]];
        } else if (ra || rb) {
          int ri = ra ? 0 : 1;
          int src = n.inputs[ri];
          Node ex;
          ex.kind = OpKind::ExpandChannels;
          ex.name = n.name + ".expand";
          ex.inputs = {src};
          ex.keep = chmap[src];
          ex.out_width = full_width[src];
          if (ex.out_width <= 0)
            throw std::logic_error("prune: unknown full width at Add '" + n.name + "'");
          detail::insert_node_before(g, id, std::move(ex));
          chmap.insert(chmap.begin() + id, std::vector<int>{});
          full_width.insert(full_width.begin() + id, -1);
          g.nodes[id + 1].inputs[ri] = id;  // Add now consumes the expansion
          ++id;  // the Add itself now sees full width on both sides
        }
        break;
      }
      case OpKind::ExpandChannels: {
        // repeated pruning: compose the new reduction into the scatter map
        if (in_map) {
          std::vector<int> composed(in_map->size());
          for (std::size_t i = 0; i < in_map->size(); ++i) composed[i] = n.keep[(*in_map)[i]];
          n.keep = std::move(composed);
        }
        break;
      }
      case OpKind::Hadamard:
      case OpKind::ScaleChannels: {
        bool ra = !chmap[n.inputs[0]].empty();
        bool rb = n.inputs.size() > 1 && !chmap[n.inputs[1]].empty();
        if (ra || rb)
          throw std::logic_error("prune: reduced width reaches unsupported op '" + n.name +
                                 "'");
        break;
      }
    }
  }
}

// Encoder bottleneck convs that the surgery can always handle: the 1x1
// reductions, single-branch middle 3x3s, and the shortcut-adjacent output
// 1x1s (handled via expansion masks). Multiscale half-branches are skipped
// because their reduced widths would flow into a Concat.
inline std::vector<std::string> default_prunable_layers(const LayerGraph& g) {
  auto ends_with = [](const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  };
  std::vector<std::string> layers;
  for (const auto& n : g.nodes) {
    if (n.kind != OpKind::Conv) continue;
    bool enc = n.name.rfind("enc.", 0) == 0 || n.name.rfind("a.enc.", 0) == 0 ||
               n.name.rfind("b.enc.", 0) == 0;
    if (!enc) continue;
    if (ends_with(n.name, ".conv1") || ends_with(n.name, ".conv2") ||
        ends_with(n.name, ".conv3"))
      layers.push_back(n.name);
  }
  return layers;
}

// --- iterative prune / fine-tune -------------------------------------------

struct PruneStageReport {
  int stage = 0;
  long long params = 0;
  long long flops = 0;
  double miou = 0.0;
};

struct PruneLoopOpts {
  std::vector<std::string> layers;
  double fraction_per_stage = 0.2;
  int stages = 2;
  int finetune_iterations = 200;
  double finetune_lr = 1e-4;
  int batch_size = 4;
  int rank_batches = 2;
  int num_classes = 6;
  Modality modality = Modality::A;
  std::uint64_t seed = 11;
  int flops_h = 64, flops_w = 64;
};

inline std::vector<PruneStageReport> prune_finetune_loop(LayerGraph& g,
                                                         const DatasetManifest& data,
                                                         const PruneLoopOpts& opts,
                                                         const std::string& plan_dir = "") {
  std::vector<PruneStageReport> report;
  auto measure = [&](int stage) {
    PruneStageReport r;
    r.stage = stage;
    r.params = g.count_params();
    r.flops = g.count_flops(1, opts.flops_h, opts.flops_w);
    EvalOpts eo;
    eo.modality = opts.modality;
    eo.batch_size = opts.batch_size;
    auto cm = evaluate_model(g, data, "val", opts.num_classes, eo);
    r.miou = miou(cm);
    return r;
  };
  report.push_back(measure(0));
  for (int stage = 1; stage <= opts.stages; ++stage) {
    BatchIterator it(data, "train", opts.batch_size, opts.seed + stage, true);
    it.start_epoch(0);
    std::vector<Batch> batches;
    Batch b;
    for (int i = 0; i < opts.rank_batches && it.next(b); ++i) batches.push_back(b);
    auto rank = taylor_rank(g, opts.layers, batches, opts.modality);
    auto plan = select_prune_set(rank, opts.fraction_per_stage);
    if (!plan_dir.empty()) {
      std::ofstream os(plan_dir + "/prune_plan_stage" + std::to_string(stage) + ".json");
      os << plan_to_json(plan).dump(2) << "\n";
    }
    apply_prune_with_mask(g, plan);
    TrainOpts topts;
    topts.modality = opts.modality;
    topts.seed = opts.seed * 131 + stage;
    TrainSchedule sched{{{opts.finetune_iterations, opts.finetune_lr, opts.finetune_lr,
                          opts.batch_size}}};
    Adam adam;
    detail::run_training(g, data, sched, topts, adam);
    report.push_back(measure(stage));
  }
  return report;
}

inline void write_prune_report_csv(const std::vector<PruneStageReport>& rep,
                                   const std::string& path) {
  std::ofstream os(path);
  os << "stage,params,flops,miou\n";
  for (const auto& r : rep)
    os << r.stage << "," << r.params << "," << r.flops << "," << r.miou << "\n";
}

}  // namespace aseg
