// Network assembly: the unimodal encoder/eASPP/decoder segmentation model and
// the two-stream gated-fusion variant, at configurable (desk) scale.

#pragma once

#include <string>
#include <vector>

#include "aseg/blocks.hpp"
#include "aseg/graph.hpp"

namespace aseg {

struct EncoderConfig {
  int in_channels = 3;
  int stem_channels = 8;
  std::vector<int> stage_out = {32, 64, 128, 256};  // desk scale: 1/8 widths
  std::vector<int> units = {2, 2, 2, 2};

  struct DilationEntry {
    int stage = 0;  // 0-based
    int unit = 0;
    int r1 = 1, r2 = 1;
  };
  std::vector<DilationEntry> schedule;  // empty -> default_schedule()

  // Dilation placement mirrors the reference model: the last unit before the
  // second downsampling stage gets (1,2); the stage after the removed
  // downsample gets r1=1, r2 in {2,4,8,16}; the final stage gets
  // (2,4),(2,8),(2,16). With fewer units per stage the rate lists are
  // sampled proportionally onto the last units of each stage.
  std::vector<DilationEntry> default_schedule() const {
    std::vector<DilationEntry> sched;
    if (units.size() != 4) return sched;
    sched.push_back({1, units[1] - 1, 1, 2});
    auto map_rates = [&](int stage, const std::vector<std::pair<int, int>>& rates) {
      int m = std::min(units[stage], int(rates.size()));
      for (int j = 0; j < m; ++j) {
        int idx = (j + 1) * int(rates.size()) / m - 1;
        sched.push_back({stage, units[stage] - m + j, rates[idx].first, rates[idx].second});
      }
    };
    map_rates(2, {{1, 2}, {1, 4}, {1, 8}, {1, 16}});
    map_rates(3, {{2, 4}, {2, 8}, {2, 16}});
    return sched;
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  EasppConfig easpp;  // in_channels filled from the encoder when 0
  int num_classes = 6;
  int skip_channels = 24;
  int decoder_channels = 32;
  double dropout_p = 0.5;
  std::uint64_t seed = 1;

  static ModelConfig desk(int num_classes = 6, std::uint64_t seed = 1) {
    ModelConfig cfg;
    cfg.num_classes = num_classes;
    cfg.seed = seed;
    cfg.easpp.branch_channels = 32;
    cfg.easpp.bottleneck_channels = 8;
    return cfg;
  }
};

struct FusionConfig {
  ModelConfig base;
  int eta_enc = 16;
  int eta_skip = 6;
};

namespace detail {

struct EncoderTaps {
  int out = -1;  // post-activation encoder output
  int skip1 = -1, skip2 = -1;
  int out_channels = 0, skip1_channels = 0, skip2_channels = 0;
};

inline EncoderTaps add_encoder(LayerGraph& g, const std::string& pfx, int x,
                               const EncoderConfig& cfg, Rng& rng) {
  if (cfg.stage_out.size() != 4 || cfg.units.size() != 4)
    throw std::invalid_argument("encoder: expected 4 stages");
  auto schedule = cfg.schedule.empty() ? cfg.default_schedule() : cfg.schedule;
  for (const auto& d : schedule)
    if (d.stage < 0 || d.stage >= 4 || d.unit < 0 || d.unit >= cfg.units[d.stage])
      throw std::invalid_argument("encoder: dilation schedule references missing unit s" +
                                  std::to_string(d.stage) + ".u" + std::to_string(d.unit));

  // stem: two stride-2 3x3 convs, output at 1/4 resolution
  int h = g.add_conv(pfx + ".stem1", x, cfg.in_channels, cfg.stem_channels, 3, 2, 1,
                     Pad::Same, false, &rng);
  h = g.add_bn(pfx + ".stem1.bn", h, cfg.stem_channels);
  h = g.add_unary(OpKind::ReLU, pfx + ".stem1.relu", h);
  h = g.add_conv(pfx + ".stem2", h, cfg.stem_channels, cfg.stem_channels, 3, 2, 1,
                 Pad::Same, false, &rng);

  EncoderTaps taps;
  const int stage_stride[4] = {1, 2, 2, 1};  // output stride 4*2*2 = 16
  int in_c = cfg.stem_channels;
  for (int s = 0; s < 4; ++s) {
    for (int u = 0; u < cfg.units[s]; ++u) {
      UnitConfig uc;
      uc.in_channels = in_c;
      uc.out_channels = cfg.stage_out[s];
      uc.bottleneck_channels = cfg.stage_out[s] / 4;
      uc.stride = (u == 0) ? stage_stride[s] : 1;
      for (const auto& d : schedule)
        if (d.stage == s && d.unit == u) {
          uc.multiscale = true;
          uc.r1 = d.r1;
          uc.r2 = d.r2;
        }
      h = add_residual_unit(g, pfx + ".s" + std::to_string(s + 1) + ".u" + std::to_string(u),
                            h, uc, rng);
      in_c = cfg.stage_out[s];
    }
    if (s == 0) {
      taps.skip2 = h;
      taps.skip2_channels = in_c;
    } else if (s == 1) {
      taps.skip1 = h;
      taps.skip1_channels = in_c;
    }
  }
  h = g.add_bn(pfx + ".post.bn", h, in_c);
  h = g.add_unary(OpKind::ReLU, pfx + ".post.relu", h);
  taps.out = h;
  taps.out_channels = in_c;
  return taps;
}

struct SkipFeed {
  int node = -1;
  int channels = 0;
};

struct DecoderOut {
  int main = -1, aux1 = -1, aux2 = -1;
};

// Three-stage decoder: deconv x2, skip refinement + deconv x2, skip
// refinement + classifier + deconv x4. Auxiliary heads (train-only) sit after
// the first two deconvs. Skip feeds arrive already reduced to skip_channels;
// with `attention` set they are reweighted by decoder statistics first.
inline DecoderOut add_decoder(LayerGraph& g, int latent, int latent_c,
                              SkipFeed skip1, SkipFeed skip2, const ModelConfig& cfg,
                              bool attention, Rng& rng) {
  const int dc = cfg.decoder_channels;
  const int C = cfg.num_classes;
  auto deconv_bn_relu = [&](const std::string& name, int in, int cin, int cout, int stride) {
    int d = g.add_deconv(name, in, cin, cout, stride, false, &rng);
    d = g.add_bn(name + ".bn", d, cout);
    return g.add_unary(OpKind::ReLU, name + ".relu", d);
  };
  auto conv_bn_relu = [&](const std::string& name, int in, int cin, int cout, int k) {
    int c = g.add_conv(name, in, cin, cout, k, 1, 1, Pad::Same, false, &rng);
    c = g.add_bn(name + ".bn", c, cout);
    return g.add_unary(OpKind::ReLU, name + ".relu", c);
  };
  auto aux_head = [&](const std::string& name, int in, int factor) {
    int first = int(g.nodes.size());
    int a = g.add_conv(name + ".conv", in, dc, C, 1, 1, 1, Pad::Same, false, &rng);
    a = g.add_bn(name + ".bn", a, C);
    a = g.add_bilinear(name + ".up", a, factor);
    for (int i = first; i < (int)g.nodes.size(); ++i) g.nodes[i].train_only = true;
    return a;
  };
  auto refine = [&](const std::string& pfx, int d, const SkipFeed& skip) {
    int f = skip.node;
    if (attention)
      f = add_channel_attention_fuse(g, pfx + ".att", d, f,
                                     AttentionConfig{dc, skip.channels}, rng);
    int cat = g.add_binary(OpKind::Concat, pfx + ".cat", d, f);
    int h = conv_bn_relu(pfx + ".conv1", cat, dc + skip.channels, dc, 3);
    return conv_bn_relu(pfx + ".conv2", h, dc, dc, 3);
  };

  DecoderOut out;
  int d1 = deconv_bn_relu("dec.up1", latent, latent_c, dc, 2);  // 1/8
  out.aux1 = aux_head("aux1", d1, 8);
  int r1 = refine("dec.ref1", d1, skip1);
  int d2 = deconv_bn_relu("dec.up2", r1, dc, dc, 2);  // 1/4
  out.aux2 = aux_head("aux2", d2, 4);
  int r2 = refine("dec.ref2", d2, skip2);
  int logits = g.add_conv("dec.classifier", r2, dc, C, 1, 1, 1, Pad::Same, true, &rng);
  out.main = g.add_deconv("dec.up3", logits, C, C, 4, true, &rng);
  return out;
}

}  // namespace detail

inline LayerGraph build_unimodal(const ModelConfig& cfg_in) {
  ModelConfig cfg = cfg_in;
  Rng rng(cfg.seed);
  LayerGraph g;
  int x = g.add_input("image");
  g.input_channels[x] = cfg.encoder.in_channels;
  auto enc = detail::add_encoder(g, "enc", x, cfg.encoder, rng);

  EasppConfig ecfg = cfg.easpp;
  if (ecfg.in_channels == 0) ecfg.in_channels = enc.out_channels;
  ecfg.dropout_p = cfg.dropout_p;
  int latent = add_easpp(g, "easpp", enc.out, ecfg, rng);
  g.tap("latent", latent);

  auto reduce_skip = [&](const std::string& name, int node, int channels) {
    int h = g.add_conv(name, node, channels, cfg.skip_channels, 1, 1, 1, Pad::Same, false, &rng);
    h = g.add_bn(name + ".bn", h, cfg.skip_channels);
    return g.add_unary(OpKind::ReLU, name + ".relu", h);
  };
  detail::SkipFeed s1{reduce_skip("dec.skip1.reduce", enc.skip1, enc.skip1_channels),
                      cfg.skip_channels};
  detail::SkipFeed s2{reduce_skip("dec.skip2.reduce", enc.skip2, enc.skip2_channels),
                      cfg.skip_channels};
  g.tap("skip1", enc.skip1);
  g.tap("skip2", enc.skip2);

  auto dec = detail::add_decoder(g, latent, ecfg.branch_channels, s1, s2, cfg, false, rng);
  g.output = dec.main;
  g.aux1 = dec.aux1;
  g.aux2 = dec.aux2;
  return g;
}

inline LayerGraph build_fusion(const FusionConfig& fcfg) {
  ModelConfig cfg = fcfg.base;
  Rng rng(cfg.seed);
  LayerGraph g;
  int xa = g.add_input("image_a");
  int xb = g.add_input("image_b");
  g.input_channels[xa] = cfg.encoder.in_channels;
  g.input_channels[xb] = cfg.encoder.in_channels;

  EasppConfig ecfg = cfg.easpp;
  ecfg.dropout_p = cfg.dropout_p;

  struct Stream {
    detail::EncoderTaps enc;
    int latent = -1;
    int skip1 = -1, skip2 = -1;  // reduced to skip_channels
  };
  auto build_stream = [&](const std::string& pfx, int input) {
    Stream s;
    s.enc = detail::add_encoder(g, pfx + ".enc", input, cfg.encoder, rng);
    EasppConfig e = ecfg;
    if (e.in_channels == 0) e.in_channels = s.enc.out_channels;
    s.latent = add_easpp(g, pfx + ".easpp", s.enc.out, e, rng);
    auto reduce = [&](const std::string& name, int node, int channels) {
      int h = g.add_conv(name, node, channels, cfg.skip_channels, 1, 1, 1, Pad::Same,
                         false, &rng);
      h = g.add_bn(name + ".bn", h, cfg.skip_channels);
      return g.add_unary(OpKind::ReLU, name + ".relu", h);
    };
    s.skip1 = reduce(pfx + ".skip1.reduce", s.enc.skip1, s.enc.skip1_channels);
    s.skip2 = reduce(pfx + ".skip2.reduce", s.enc.skip2, s.enc.skip2_channels);
    return s;
  };
  Stream a = build_stream("a", xa);
  Stream b = build_stream("b", xb);

  auto latent_ssma = add_ssma(g, "ssma.latent", a.latent, b.latent,
                              SsmaConfig{ecfg.branch_channels, fcfg.eta_enc}, rng);
  auto skip1_ssma = add_ssma(g, "ssma.skip1", a.skip1, b.skip1,
                             SsmaConfig{cfg.skip_channels, fcfg.eta_skip}, rng);
  auto skip2_ssma = add_ssma(g, "ssma.skip2", a.skip2, b.skip2,
                             SsmaConfig{cfg.skip_channels, fcfg.eta_skip}, rng);
  g.tap("latent", latent_ssma.fused);
  g.tap("gate_latent", latent_ssma.gate);
  g.tap("gate_skip1", skip1_ssma.gate);
  g.tap("gate_skip2", skip2_ssma.gate);
  g.tap("a.latent", a.latent);
  g.tap("b.latent", b.latent);

  auto dec = detail::add_decoder(g, latent_ssma.fused, ecfg.branch_channels,
                                 {skip1_ssma.fused, cfg.skip_channels},
                                 {skip2_ssma.fused, cfg.skip_channels}, cfg, true, rng);
  g.output = dec.main;
  g.aux1 = dec.aux1;
  g.aux2 = dec.aux2;
  return g;
}

// Copies encoder (+ context module and skip reductions) weights from a trained
// unimodal model into one stream of a fusion model.
inline void transfer_encoder(LayerGraph& fusion, const LayerGraph& unimodal, char stream) {
  if (stream != 'a' && stream != 'b')
    throw std::invalid_argument("transfer_encoder: stream must be 'a' or 'b'");
  const std::string pfx = std::string(1, stream) + ".";
  auto src = unimodal.state_dict();
  std::vector<std::string> missing;

  auto source_name = [&](const std::string& fusion_name) -> std::string {
    std::string suffix = fusion_name.substr(pfx.size());
    // stream skip reductions correspond to the unimodal decoder's reductions
    if (suffix.rfind("skip", 0) == 0) return "dec." + suffix;
    return suffix;
  };
  for (auto& n : fusion.nodes) {
    if (n.name.rfind(pfx, 0) != 0) continue;
    std::string base = source_name(n.name);
    auto copy4 = [&](const std::string& key, const TensorPtr<double>& dst) {
      auto it = src.find(key);
      if (it == src.end()) {
        missing.push_back(key);
        return;
      }
      if (it->second.values.size() != dst->size())
        throw std::runtime_error("transfer_encoder: size mismatch for " + key);
      dst->data = it->second.values;
    };
    if (n.weight) copy4(base + ".weight", n.weight);
    if (n.bias) copy4(base + ".bias", n.bias);
    if (n.gamma) {
      copy4(base + ".gamma", n.gamma);
      copy4(base + ".beta", n.beta);
      auto rm = src.find(base + ".running_mean");
      auto rv = src.find(base + ".running_var");
      if (rm == src.end() || rv == src.end()) {
        missing.push_back(base + ".running_mean");
      } else {
        n.bn.running_mean = rm->second.values;
        n.bn.running_var = rv->second.values;
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "transfer_encoder: missing source parameters:";
    for (const auto& m : missing) msg += " " + m;
    throw std::runtime_error(msg);
  }
}

}  // namespace aseg
