// LayerGraph: an ordered DAG of parameterized layers, interpreted with the
// autodiff ops from tensor.hpp. The same structure drives forward/backward,
// parameter counting, FLOP accounting, checkpointing and pruning surgery.

#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "aseg/checkpoint.hpp"
#include "aseg/tensor.hpp"

namespace aseg {

enum class OpKind {
  Input,
  Conv,
  Deconv,
  BatchNorm,
  ReLU,
  Sigmoid,
  SoftmaxC,
  GlobalAvgPool,
  Bilinear,
  Concat,
  Add,
  Hadamard,
  ScaleChannels,
  ExpandChannels,
  BroadcastLike,  // inputs {x, ref}: NxCx1x1 broadcast to ref's HxW
  Dropout,
};

struct Node {
  OpKind kind = OpKind::Input;
  std::string name;
  std::vector<int> inputs;
  bool train_only = false;  // evaluated only in training-mode forwards

  // conv / deconv
  int stride = 1, dilation = 1;
  Pad pad = Pad::Same;

  int factor = 1;            // bilinear
  double drop_p = 0.0;       // dropout
  std::vector<int> keep;     // expand_channels scatter indices
  int out_width = 0;         // expand_channels output width

  TensorPtr<double> weight, bias, gamma, beta;
  BnStats<double> bn;
};

struct ForwardResult {
  Tape<double> tape;
  std::vector<TensorPtr<double>> acts;  // indexed by node id; null if skipped
};

struct LayerGraph {
  std::vector<Node> nodes;
  std::vector<int> inputs;  // node ids of Input nodes, in feed order
  int output = -1, aux1 = -1, aux2 = -1;
  std::map<std::string, int> taps;

  int add(Node n) {
    for (int in : n.inputs)
      if (in < 0 || in >= (int)nodes.size())
        throw std::invalid_argument("LayerGraph: node '" + n.name +
                                    "' references undefined input " + std::to_string(in));
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  int node_id(const std::string& name) const {
    for (int i = 0; i < (int)nodes.size(); ++i)
      if (nodes[i].name == name) return i;
    throw std::invalid_argument("LayerGraph: no node named '" + name + "'");
  }

  int add_input(const std::string& name) {
    Node n;
    n.kind = OpKind::Input;
    n.name = name;
    int id = add(std::move(n));
    inputs.push_back(id);
    return id;
  }

  int add_conv(const std::string& name, int in, int cin, int cout, int k, int stride,
               int dilation, Pad pad, bool bias, Rng* rng) {
    Node n;
    n.kind = OpKind::Conv;
    n.name = name;
    n.inputs = {in};
    n.stride = stride;
    n.dilation = dilation;
    n.pad = pad;
    n.weight = Tensor<double>::make(cout, cin, k, k, true);
    if (rng) he_init(*n.weight, cin * k * k, *rng);
    if (bias) n.bias = Tensor<double>::make(1, 1, 1, cout, true);
    return add(std::move(n));
  }

  int add_deconv(const std::string& name, int in, int cin, int cout, int stride,
                 bool bias, Rng* rng) {
    Node n;
    n.kind = OpKind::Deconv;
    n.name = name;
    n.inputs = {in};
    n.stride = stride;
    int k = 2 * stride;
    n.weight = Tensor<double>::make(cin, cout, k, k, true);
    if (rng) he_init(*n.weight, cin * k * k, *rng);
    if (bias) n.bias = Tensor<double>::make(1, 1, 1, cout, true);
    return add(std::move(n));
  }

  int add_bn(const std::string& name, int in, int channels) {
    Node n;
    n.kind = OpKind::BatchNorm;
    n.name = name;
    n.inputs = {in};
    n.gamma = Tensor<double>::make(1, 1, 1, channels, true);
    std::fill(n.gamma->data.begin(), n.gamma->data.end(), 1.0);
    n.beta = Tensor<double>::make(1, 1, 1, channels, true);
    n.bn.running_mean.assign(channels, 0.0);
    n.bn.running_var.assign(channels, 1.0);
    return add(std::move(n));
  }

  int add_unary(OpKind kind, const std::string& name, int in) {
    Node n;
    n.kind = kind;
    n.name = name;
    n.inputs = {in};
    return add(std::move(n));
  }

  int add_binary(OpKind kind, const std::string& name, int a, int b) {
    Node n;
    n.kind = kind;
    n.name = name;
    n.inputs = {a, b};
    return add(std::move(n));
  }

  int add_bilinear(const std::string& name, int in, int factor) {
    Node n;
    n.kind = OpKind::Bilinear;
    n.name = name;
    n.inputs = {in};
    n.factor = factor;
    return add(std::move(n));
  }

  int add_dropout(const std::string& name, int in, double p) {
    Node n;
    n.kind = OpKind::Dropout;
    n.name = name;
    n.inputs = {in};
    n.drop_p = p;
    return add(std::move(n));
  }

  int add_expand(const std::string& name, int in, std::vector<int> keep, int width) {
    Node n;
    n.kind = OpKind::ExpandChannels;
    n.name = name;
    n.inputs = {in};
    n.keep = std::move(keep);
    n.out_width = width;
    return add(std::move(n));
  }

  void tap(const std::string& name, int id) { taps[name] = id; }

  // --- parameters -----------------------------------------------------------

  struct Param {
    std::string name;
    TensorPtr<double> tensor;
    bool is_bn_affine = false;
  };

  std::vector<Param> parameters() const {
    std::vector<Param> ps;
    for (const auto& n : nodes) {
      if (n.weight) ps.push_back({n.name + ".weight", n.weight, false});
      if (n.bias) ps.push_back({n.name + ".bias", n.bias, false});
      if (n.gamma) ps.push_back({n.name + ".gamma", n.gamma, true});
      if (n.beta) ps.push_back({n.name + ".beta", n.beta, true});
    }
    return ps;
  }

  // Learnable-scalar count under the cost-accounting convention: conv/deconv
  // weights and biases; BN affine excluded (reported separately by
  // count_params_all).
  long long count_params() const {
    long long total = 0;
    for (const auto& n : nodes) {
      if (n.kind != OpKind::Conv && n.kind != OpKind::Deconv) continue;
      if (n.weight) total += (long long)n.weight->size();
      if (n.bias) total += (long long)n.bias->size();
    }
    return total;
  }

  long long count_params_all() const {
    long long total = 0;
    for (const auto& p : parameters()) total += (long long)p.tensor->size();
    return total;
  }

  // --- forward --------------------------------------------------------------

  struct ForwardOpts {
    bool training = false;
    bool record = true;  // record tape for backward
    Rng* dropout_rng = nullptr;
    // node id -> channels forced to zero at that node's output (test oracle)
    std::map<int, std::vector<int>> zero_at;
  };

  ForwardResult forward(const std::vector<TensorPtr<double>>& feed) {
    ForwardOpts opts;
    return forward(feed, opts);
  }

  ForwardResult forward(const std::vector<TensorPtr<double>>& feed,
                        const ForwardOpts& opts) {
    if (feed.size() != inputs.size())
      throw std::invalid_argument("forward: expected " + std::to_string(inputs.size()) +
                                  " inputs, got " + std::to_string(feed.size()));
    ForwardResult r;
    r.tape.recording = opts.record;
    r.acts.assign(nodes.size(), nullptr);
    for (std::size_t i = 0; i < feed.size(); ++i) r.acts[inputs[i]] = feed[i];

    for (int id = 0; id < (int)nodes.size(); ++id) {
      Node& n = nodes[id];
      if (n.kind == OpKind::Input) continue;
      if (n.train_only && !opts.training) continue;
      bool ready = true;
      for (int in : n.inputs)
        if (!r.acts[in]) ready = false;
      if (!ready) continue;  // feeds a train-only branch that was skipped
      auto& x = r.acts[n.inputs[0]];
      TensorPtr<double> out;
      switch (n.kind) {
        case OpKind::Conv:
          out = conv2d(r.tape, x, n.weight, n.bias, n.stride, n.dilation, n.pad);
          break;
        case OpKind::Deconv:
          out = conv_transpose2d(r.tape, x, n.weight, n.bias, n.stride);
          break;
        case OpKind::BatchNorm:
          out = batch_norm(r.tape, x, n.gamma, n.beta, n.bn, opts.training);
          break;
        case OpKind::ReLU:
          out = relu(r.tape, x);
          break;
        case OpKind::Sigmoid:
          out = sigmoid(r.tape, x);
          break;
        case OpKind::SoftmaxC:
          out = softmax_channels(r.tape, x);
          break;
        case OpKind::GlobalAvgPool:
          out = global_avg_pool(r.tape, x);
          break;
        case OpKind::Bilinear:
          out = bilinear_upsample(r.tape, x, n.factor);
          break;
        case OpKind::Concat:
          out = concat_channels(r.tape, x, r.acts[n.inputs[1]]);
          break;
        case OpKind::Add:
          out = ::aseg::add(r.tape, x, r.acts[n.inputs[1]]);
          break;
        case OpKind::Hadamard:
          out = hadamard(r.tape, x, r.acts[n.inputs[1]]);
          break;
        case OpKind::ScaleChannels:
          out = scale_channels(r.tape, x, r.acts[n.inputs[1]]);
          break;
        case OpKind::ExpandChannels:
          out = expand_channels(r.tape, x, n.keep, n.out_width);
          break;
        case OpKind::BroadcastLike:
          out = broadcast_spatial(r.tape, x, r.acts[n.inputs[1]]->h,
                                  r.acts[n.inputs[1]]->w);
          break;
        case OpKind::Dropout:
          if (opts.training && n.drop_p > 0.0) {
            if (!opts.dropout_rng)
              throw std::invalid_argument("forward: dropout requires an RNG in training");
            std::vector<char> mask(x->size());
            for (auto& m : mask) m = opts.dropout_rng->uniform() >= n.drop_p;
            out = dropout(r.tape, x, mask, 1.0 - n.drop_p);
          } else {
            out = x;
          }
          break;
        default:
          throw std::logic_error("forward: unhandled op");
      }
      auto zit = opts.zero_at.find(id);
      if (zit != opts.zero_at.end()) out = zero_channels(r.tape, out, zit->second);
      r.acts[id] = out;
    }
    return r;
  }

  // --- FLOP accounting ------------------------------------------------------

  // 2*MACs for conv/deconv; BN 2, ReLU 1, sigmoid 4, softmax 6, add/hadamard/
  // scale 1 op per element; pooling 1 op per input element; bilinear 8 ops
  // per output element.
  long long count_flops(int n, int h, int w, int second_h = -1, int second_w = -1) const {
    // pure shape propagation; mirrors the inference forward (train-only
    // nodes and their dependents contribute nothing)
    struct Shape {
      int c = 0, h = 0, w = 0;
      bool live = false;
      long long size(int batch) const { return (long long)batch * c * h * w; }
    };
    std::vector<Shape> sh(nodes.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      int fh = (i == 1 && second_h > 0) ? second_h : h;
      int fw = (i == 1 && second_w > 0) ? second_w : w;
      int fc = input_channels.count(inputs[i]) ? input_channels.at(inputs[i]) : 3;
      sh[inputs[i]] = {fc, fh, fw, true};
    }
    long long flops = 0;
    for (int id = 0; id < (int)nodes.size(); ++id) {
      const Node& nd = nodes[id];
      if (nd.kind == OpKind::Input) continue;
      if (nd.train_only) continue;
      bool live = !nd.inputs.empty();
      for (int in : nd.inputs) live = live && sh[in].live;
      if (!live) continue;
      const Shape& x = sh[nd.inputs[0]];
      Shape y = x;
      y.live = true;
      switch (nd.kind) {
        case OpKind::Conv: {
          const int k = nd.weight->h, span = (k - 1) * nd.dilation + 1;
          const int p = nd.pad == Pad::Same ? ((k - 1) * nd.dilation) / 2 : 0;
          y.c = nd.weight->n;
          y.h = (x.h + 2 * p - span) / nd.stride + 1;
          y.w = (x.w + 2 * p - span) / nd.stride + 1;
          break;
        }
        case OpKind::Deconv:
          y.c = nd.weight->c;
          y.h = x.h * nd.stride;
          y.w = x.w * nd.stride;
          break;
        case OpKind::GlobalAvgPool: y.h = y.w = 1; break;
        case OpKind::Bilinear:
          y.h = x.h * nd.factor;
          y.w = x.w * nd.factor;
          break;
        case OpKind::Concat: y.c = x.c + sh[nd.inputs[1]].c; break;
        case OpKind::ExpandChannels: y.c = nd.out_width; break;
        case OpKind::BroadcastLike: {
          const Shape& ref = sh[nd.inputs[1]];
          y.h = ref.h;
          y.w = ref.w;
          break;
        }
        default: break;  // shape-preserving ops
      }
      sh[id] = y;
      long long out_elems = y.size(n);
      switch (nd.kind) {
        case OpKind::Conv: {
          long long macs = out_elems * nd.weight->c * nd.weight->h * nd.weight->w;
          flops += 2 * macs + (nd.bias ? out_elems : 0);
          break;
        }
        case OpKind::Deconv: {
          long long macs = x.size(n) * nd.weight->c * nd.weight->h * nd.weight->w;
          flops += 2 * macs + (nd.bias ? out_elems : 0);
          break;
        }
        case OpKind::BatchNorm: flops += 2 * out_elems; break;
        case OpKind::ReLU: flops += out_elems; break;
        case OpKind::Sigmoid: flops += 4 * out_elems; break;
        case OpKind::SoftmaxC: flops += 6 * out_elems; break;
        case OpKind::GlobalAvgPool: flops += x.size(n); break;
        case OpKind::Bilinear: flops += 8 * out_elems; break;
        case OpKind::BroadcastLike: flops += out_elems; break;
        case OpKind::Add:
        case OpKind::Hadamard:
        case OpKind::ScaleChannels: flops += out_elems; break;
        default: break;
      }
    }
    return flops;
  }

  // channel count per input node, used by count_flops to seed the shapes
  std::map<int, int> input_channels;

  // --- checkpoint -----------------------------------------------------------

  Checkpoint state_dict() const {
    Checkpoint ckpt;
    auto put4 = [&](const std::string& name, const TensorPtr<double>& t) {
      CheckpointEntry e;
      e.dtype = 1;
      e.dims = {std::uint32_t(t->n), std::uint32_t(t->c), std::uint32_t(t->h),
                std::uint32_t(t->w)};
      e.values = t->data;
      ckpt.emplace(name, std::move(e));
    };
    auto put1 = [&](const std::string& name, const std::vector<double>& v) {
      CheckpointEntry e;
      e.dtype = 1;
      e.dims = {std::uint32_t(v.size())};
      e.values = v;
      ckpt.emplace(name, std::move(e));
    };
    for (const auto& n : nodes) {
      if (n.weight) put4(n.name + ".weight", n.weight);
      if (n.bias) put4(n.name + ".bias", n.bias);
      if (n.gamma) {
        put4(n.name + ".gamma", n.gamma);
        put4(n.name + ".beta", n.beta);
        put1(n.name + ".running_mean", n.bn.running_mean);
        put1(n.name + ".running_var", n.bn.running_var);
      }
    }
    return ckpt;
  }

  void load_state(const Checkpoint& ckpt, const std::string& prefix_map_from = "",
                  const std::string& prefix_map_to = "") {
    // Names may be remapped: an entry is looked up under
    // prefix_map_from + suffix when the graph name starts with prefix_map_to.
    std::set<std::string> used;
    std::vector<std::string> missing;
    auto fetch = [&](const std::string& name) -> const CheckpointEntry* {
      std::string key = name;
      if (!prefix_map_to.empty() && name.rfind(prefix_map_to, 0) == 0)
        key = prefix_map_from + name.substr(prefix_map_to.size());
      auto it = ckpt.find(key);
      if (it == ckpt.end()) {
        missing.push_back(key);
        return nullptr;
      }
      used.insert(key);
      if (it->second.dtype != 1)
        throw std::runtime_error("load_state: parameter '" + key +
                                 "' has dtype f32, graph expects f64");
      return &it->second;
    };
    auto take4 = [&](const std::string& name, const TensorPtr<double>& t) {
      const auto* e = fetch(name);
      if (!e) return;
      std::size_t n = 1;
      for (auto d : e->dims) n *= d;
      if (n != t->size())
        throw std::runtime_error("load_state: size mismatch for '" + name + "' (" +
                                 std::to_string(n) + " vs " + std::to_string(t->size()) + ")");
      t->data = e->values;
    };
    auto take1 = [&](const std::string& name, std::vector<double>& v) {
      const auto* e = fetch(name);
      if (!e) return;
      if (e->values.size() != v.size())
        throw std::runtime_error("load_state: size mismatch for '" + name + "'");
      v = e->values;
    };
    for (auto& n : nodes) {
      if (n.weight) take4(n.name + ".weight", n.weight);
      if (n.bias) take4(n.name + ".bias", n.bias);
      if (n.gamma) {
        take4(n.name + ".gamma", n.gamma);
        take4(n.name + ".beta", n.beta);
        take1(n.name + ".running_mean", n.bn.running_mean);
        take1(n.name + ".running_var", n.bn.running_var);
      }
    }
    if (!missing.empty()) {
      std::string msg = "load_state: missing parameters:";
      for (const auto& m : missing) msg += " " + m;
      throw std::runtime_error(msg);
    }
    if (prefix_map_to.empty()) {
      std::vector<std::string> extra;
      for (const auto& [k, v] : ckpt)
        if (!used.count(k)) extra.push_back(k);
      if (!extra.empty()) {
        std::string msg = "load_state: extra parameters in checkpoint:";
        for (const auto& e : extra) msg += " " + e;
        throw std::runtime_error(msg);
      }
    }
  }

  // Deep copy: parameter tensors and BN stats are duplicated, not shared.
  LayerGraph clone() const {
    LayerGraph g = *this;
    for (auto& n : g.nodes) {
      auto dup = [](TensorPtr<double>& t) {
        if (t) t = std::make_shared<Tensor<double>>(*t);
      };
      dup(n.weight);
      dup(n.bias);
      dup(n.gamma);
      dup(n.beta);
    }
    return g;
  }
};

inline void save_weights(const LayerGraph& g, const std::string& path) {
  save_checkpoint(g.state_dict(), path);
}

inline void load_weights(LayerGraph& g, const std::string& path) {
  g.load_state(load_checkpoint(path));
}

}  // namespace aseg
