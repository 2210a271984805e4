// Architectural building blocks: pre-activation residual units (plain and
// multiscale), ASPP and eASPP context modules, SSMA gated fusion, channel
// attention, and receptive-field accounting.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "aseg/graph.hpp"

namespace aseg {

struct UnitConfig {
  int in_channels = 0;
  int bottleneck_channels = 0;
  int out_channels = 0;
  int r1 = 1, r2 = 1;
  int stride = 1;
  bool projection = false;
  bool multiscale = false;
};

struct EasppConfig {
  int in_channels = 0;
  int branch_channels = 256;
  int bottleneck_channels = 64;  // branch_channels / 4
  std::vector<int> dilations = {3, 6, 12};
  double dropout_p = 0.0;  // applied before the final 1x1 when > 0
};

struct SsmaConfig {
  int channels = 0;  // C per modality
  int eta = 16;
  int bottleneck() const { return (2 * channels + eta - 1) / eta; }
};

struct AttentionConfig {
  int decoder_channels = 0;
  int skip_channels = 0;
};

// --- residual units ---------------------------------------------------------

// Full pre-activation bottleneck: BN-ReLU-1x1, BN-ReLU-3x3 (stride here),
// BN-ReLU-1x1, plus identity or projection shortcut. The multiscale variant
// splits the middle 3x3 into two parallel atrous 3x3 convs with half the
// maps each, concatenated before the final 1x1; parameter count is unchanged.
inline int add_residual_unit(LayerGraph& g, const std::string& prefix, int x,
                             const UnitConfig& cfg, Rng& rng) {
  if (cfg.multiscale && cfg.bottleneck_channels % 2 != 0)
    throw std::invalid_argument(prefix + ": multiscale unit requires even bottleneck width, got " +
                                std::to_string(cfg.bottleneck_channels));
  int pre = g.add_bn(prefix + ".bn0", x, cfg.in_channels);
  pre = g.add_unary(OpKind::ReLU, prefix + ".relu0", pre);

  int h = g.add_conv(prefix + ".conv1", pre, cfg.in_channels, cfg.bottleneck_channels, 1,
                     1, 1, Pad::Same, false, &rng);
  h = g.add_bn(prefix + ".bn1", h, cfg.bottleneck_channels);
  h = g.add_unary(OpKind::ReLU, prefix + ".relu1", h);

  if (cfg.multiscale) {
    int half = cfg.bottleneck_channels / 2;
    int a = g.add_conv(prefix + ".conv2a", h, cfg.bottleneck_channels, half, 3,
                       cfg.stride, cfg.r1, Pad::Same, false, &rng);
    int b = g.add_conv(prefix + ".conv2b", h, cfg.bottleneck_channels, half, 3,
                       cfg.stride, cfg.r2, Pad::Same, false, &rng);
    h = g.add_binary(OpKind::Concat, prefix + ".concat2", a, b);
  } else {
    h = g.add_conv(prefix + ".conv2", h, cfg.bottleneck_channels, cfg.bottleneck_channels,
                   3, cfg.stride, cfg.r1, Pad::Same, false, &rng);
  }
  h = g.add_bn(prefix + ".bn2", h, cfg.bottleneck_channels);
  h = g.add_unary(OpKind::ReLU, prefix + ".relu2", h);
  h = g.add_conv(prefix + ".conv3", h, cfg.bottleneck_channels, cfg.out_channels, 1, 1, 1,
                 Pad::Same, false, &rng);

  int shortcut = x;
  if (cfg.projection || cfg.in_channels != cfg.out_channels || cfg.stride != 1)
    shortcut = g.add_conv(prefix + ".proj", pre, cfg.in_channels, cfg.out_channels, 1,
                          cfg.stride, 1, Pad::Same, false, &rng);
  return g.add_binary(OpKind::Add, prefix + ".add", h, shortcut);
}

// --- ASPP / eASPP -----------------------------------------------------------

namespace detail {
inline int conv_bn_relu(LayerGraph& g, const std::string& prefix, int x, int cin,
                        int cout, int k, int dilation, Rng& rng) {
  int h = g.add_conv(prefix, x, cin, cout, k, 1, dilation, Pad::Same, false, &rng);
  h = g.add_bn(prefix + ".bn", h, cout);
  return g.add_unary(OpKind::ReLU, prefix + ".relu", h);
}

inline int image_pooling_branch(LayerGraph& g, const std::string& prefix, int x,
                                int cin, int cout, Rng& rng) {
  int p = g.add_unary(OpKind::GlobalAvgPool, prefix + ".pool", x);
  p = conv_bn_relu(g, prefix + ".conv", p, cin, cout, 1, 1, rng);
  return g.add_binary(OpKind::BroadcastLike, prefix + ".up", p, x);
}
}  // namespace detail

// DeepLab v3 style reference baseline: 1x1 branch, three parallel 3x3 atrous
// branches, image pooling, concat, final 1x1. All convs 256 filters with BN.
inline int add_aspp(LayerGraph& g, const std::string& prefix, int x,
                    const EasppConfig& cfg, Rng& rng) {
  std::vector<int> branches;
  branches.push_back(
      detail::conv_bn_relu(g, prefix + ".b0", x, cfg.in_channels, cfg.branch_channels, 1, 1, rng));
  for (std::size_t i = 0; i < cfg.dilations.size(); ++i)
    branches.push_back(detail::conv_bn_relu(g, prefix + ".b" + std::to_string(i + 1), x,
                                            cfg.in_channels, cfg.branch_channels, 3,
                                            cfg.dilations[i], rng));
  branches.push_back(
      detail::image_pooling_branch(g, prefix + ".pool", x, cfg.in_channels, cfg.branch_channels, rng));
  int cat = branches[0];
  for (std::size_t i = 1; i < branches.size(); ++i)
    cat = g.add_binary(OpKind::Concat, prefix + ".cat" + std::to_string(i), cat, branches[i]);
  int total = int(branches.size()) * cfg.branch_channels;
  return detail::conv_bn_relu(g, prefix + ".out", cat, total, cfg.branch_channels, 1, 1, rng);
}

// eASPP: the 3x3 branches are replaced by cascaded bottlenecks
// (1x1 down to c/4, two cascaded 3x3 atrous at the same rate, 1x1 back to c).
inline int add_easpp(LayerGraph& g, const std::string& prefix, int x,
                     const EasppConfig& cfg, Rng& rng) {
  for (std::size_t i = 1; i < cfg.dilations.size(); ++i)
    if (cfg.dilations[i] <= cfg.dilations[i - 1])
      throw std::invalid_argument(prefix + ": dilations must be strictly increasing");
  if (cfg.branch_channels % cfg.bottleneck_channels != 0)
    throw std::invalid_argument(prefix + ": bottleneck must divide branch channels");
  std::vector<int> branches;
  branches.push_back(
      detail::conv_bn_relu(g, prefix + ".b0", x, cfg.in_channels, cfg.branch_channels, 1, 1, rng));
  for (std::size_t i = 0; i < cfg.dilations.size(); ++i) {
    std::string bp = prefix + ".b" + std::to_string(i + 1);
    int r = cfg.dilations[i];
    int h = detail::conv_bn_relu(g, bp + ".reduce", x, cfg.in_channels,
                                 cfg.bottleneck_channels, 1, 1, rng);
    h = detail::conv_bn_relu(g, bp + ".atrous1", h, cfg.bottleneck_channels,
                             cfg.bottleneck_channels, 3, r, rng);
    h = detail::conv_bn_relu(g, bp + ".atrous2", h, cfg.bottleneck_channels,
                             cfg.bottleneck_channels, 3, r, rng);
    h = detail::conv_bn_relu(g, bp + ".restore", h, cfg.bottleneck_channels,
                             cfg.branch_channels, 1, 1, rng);
    branches.push_back(h);
  }
  branches.push_back(detail::image_pooling_branch(g, prefix + ".pool", x, cfg.in_channels,
                                                  cfg.branch_channels, rng));
  int cat = branches[0];
  for (std::size_t i = 1; i < branches.size(); ++i)
    cat = g.add_binary(OpKind::Concat, prefix + ".cat" + std::to_string(i), cat, branches[i]);
  int total = int(branches.size()) * cfg.branch_channels;
  if (cfg.dropout_p > 0.0) cat = g.add_dropout(prefix + ".drop", cat, cfg.dropout_p);
  return detail::conv_bn_relu(g, prefix + ".out", cat, total, cfg.branch_channels, 1, 1, rng);
}

// --- SSMA -------------------------------------------------------------------

struct SsmaNodes {
  int fused = -1;
  int gate = -1;
};

// Gate s = sigmoid(conv3x3(relu(conv3x3(concat)))) over 2C channels,
// recalibration s o concat, then 3x3 conv + BN back down to C channels.
inline SsmaNodes add_ssma(LayerGraph& g, const std::string& prefix, int xa, int xb,
                          const SsmaConfig& cfg, Rng& rng) {
  int C = cfg.channels;
  int bneck = cfg.bottleneck();
  int cat = g.add_binary(OpKind::Concat, prefix + ".concat", xa, xb);
  int h = g.add_conv(prefix + ".gate1", cat, 2 * C, bneck, 3, 1, 1, Pad::Same, true, &rng);
  h = g.add_unary(OpKind::ReLU, prefix + ".gate1.relu", h);
  h = g.add_conv(prefix + ".gate2", h, bneck, 2 * C, 3, 1, 1, Pad::Same, true, &rng);
  int gate = g.add_unary(OpKind::Sigmoid, prefix + ".gate", h);
  int scaled = g.add_binary(OpKind::Hadamard, prefix + ".recal", gate, cat);
  int fused = g.add_conv(prefix + ".fuse", scaled, 2 * C, C, 3, 1, 1, Pad::Same, false, &rng);
  fused = g.add_bn(prefix + ".fuse.bn", fused, C);
  return {fused, gate};
}

// --- channel attention ------------------------------------------------------

// z = relu(BN(1x1 conv(global_avg_pool(D)))), result = z_c * f_c per channel.
inline int add_channel_attention_fuse(LayerGraph& g, const std::string& prefix, int D,
                                      int f, const AttentionConfig& cfg, Rng& rng) {
  int s = g.add_unary(OpKind::GlobalAvgPool, prefix + ".pool", D);
  int z = g.add_conv(prefix + ".reduce", s, cfg.decoder_channels, cfg.skip_channels, 1, 1,
                     1, Pad::Same, false, &rng);
  z = g.add_bn(prefix + ".reduce.bn", z, cfg.skip_channels);
  z = g.add_unary(OpKind::ReLU, prefix + ".reduce.relu", z);
  return g.add_binary(OpKind::ScaleChannels, prefix + ".scale", f, z);
}

// --- receptive fields -------------------------------------------------------

inline int analytic_receptive_field(int r, int N) {
  if (r < 1 || N < 1)
    throw std::invalid_argument("analytic_receptive_field: r and N must be >= 1");
  return (r - 1) * (N - 1) + N;
}

inline int cascade_receptive_field(int f1, int f2) {
  if (f1 < 1 || f2 < 1)
    throw std::invalid_argument("cascade_receptive_field: sizes must be >= 1");
  return f1 + f2 - 1;
}

// Occlusion-based receptive-field probe. An occluder patch filled with the
// per-channel image mean slides over the input; heatmap records the Euclidean
// distance between the target feature vector with and without the occlusion.
// Each pixel takes the minimum over the occluder windows covering it, so the
// nonzero support is an inner estimate of the receptive field: a pixel is
// marked only if every occlusion covering it perturbs the target feature.
inline TensorPtr<double> empirical_receptive_field(LayerGraph& g,
                                                   const TensorPtr<double>& input,
                                                   int target_node, int ty, int tx,
                                                   int occluder = 8, int stride = 4) {
  LayerGraph::ForwardOpts opts;
  opts.record = false;
  auto ref = g.forward({input}, opts);
  const auto& feat = ref.acts[target_node];
  if (ty < 0 || ty >= feat->h || tx < 0 || tx >= feat->w)
    throw std::invalid_argument("empirical_receptive_field: target location out of range");
  std::vector<double> ref_vec(feat->c);
  for (int ic = 0; ic < feat->c; ++ic) ref_vec[ic] = feat->at(0, ic, ty, tx);

  // per-channel mean fill value
  std::vector<double> mean(input->c, 0.0);
  const std::size_t plane = std::size_t(input->h) * input->w;
  for (int ic = 0; ic < input->c; ++ic) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += input->data[std::size_t(ic) * plane + i];
    mean[ic] = s / double(plane);
  }

  auto heat = Tensor<double>::make(1, 1, input->h, input->w);
  std::fill(heat->data.begin(), heat->data.end(),
            std::numeric_limits<double>::infinity());
  auto probe = std::make_shared<Tensor<double>>(*input);
  for (int wy = 0; wy < input->h; wy += stride)
    for (int wx = 0; wx < input->w; wx += stride) {
      int y1 = std::min(wy + occluder, input->h);
      int x1 = std::min(wx + occluder, input->w);
      probe->data = input->data;
      for (int ic = 0; ic < input->c; ++ic)
        for (int y = wy; y < y1; ++y)
          for (int x = wx; x < x1; ++x) probe->at(0, ic, y, x) = mean[ic];
      auto r = g.forward({probe}, opts);
      const auto& f = r.acts[target_node];
      double d2 = 0.0;
      for (int ic = 0; ic < f->c; ++ic) {
        double d = f->at(0, ic, ty, tx) - ref_vec[ic];
        d2 += d * d;
      }
      double dist = std::sqrt(d2);
      for (int y = wy; y < y1; ++y)
        for (int x = wx; x < x1; ++x)
          heat->at(0, 0, y, x) = std::min(heat->at(0, 0, y, x), dist);
    }
  for (auto& v : heat->data)
    if (std::isinf(v)) v = 0.0;
  return heat;
}

}  // namespace aseg
