// Model assembly: shape contracts, checkpoint round trips, encoder transfer
// into the fusion model, deterministic inference.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "aseg/model.hpp"

using namespace aseg;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig cfg = ModelConfig::desk(6, seed);
  cfg.encoder.stem_channels = 4;
  cfg.encoder.stage_out = {8, 16, 24, 32};
  cfg.encoder.units = {1, 1, 1, 1};
  cfg.easpp.branch_channels = 16;
  cfg.easpp.bottleneck_channels = 4;
  cfg.skip_channels = 8;
  cfg.decoder_channels = 16;
  return cfg;
}

TensorPtr<double> random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  auto t = Tensor<double>::make(1, 3, h, w);
  for (auto& v : t->data) v = rng.uniform(0.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("unimodal model maps HxW input to CxHxW logits") {
  auto g = build_unimodal(tiny_config());
  auto x = random_image(64, 64, 3);
  LayerGraph::ForwardOpts fo;
  fo.record = false;
  auto r = g.forward({x}, fo);
  auto& y = *r.acts[g.output];
  REQUIRE(y.n == 1);
  REQUIRE(y.c == 6);
  REQUIRE(y.h == 64);
  REQUIRE(y.w == 64);
  // encoder output stride 16
  auto& latent = *r.acts[g.taps.at("latent")];
  REQUIRE(latent.h == 4);
  REQUIRE(latent.w == 4);
  // auxiliary heads are skipped at inference
  REQUIRE(r.acts[g.aux1] == nullptr);
  REQUIRE(r.acts[g.aux2] == nullptr);
}

TEST_CASE("auxiliary heads match the main output shape in training mode") {
  auto g = build_unimodal(tiny_config());
  auto x = random_image(32, 32, 5);
  LayerGraph::ForwardOpts fo;
  fo.training = true;
  fo.record = false;
  Rng drop(1);
  fo.dropout_rng = &drop;
  auto r = g.forward({x}, fo);
  for (int head : {g.output, g.aux1, g.aux2}) {
    auto& y = *r.acts[head];
    REQUIRE(y.c == 6);
    REQUIRE(y.h == 32);
    REQUIRE(y.w == 32);
  }
}

TEST_CASE("inference is deterministic") {
  auto g = build_unimodal(tiny_config());
  auto x = random_image(32, 32, 7);
  LayerGraph::ForwardOpts fo;
  fo.record = false;
  auto r1 = g.forward({x}, fo);
  auto r2 = g.forward({x}, fo);
  REQUIRE(r1.acts[g.output]->data == r2.acts[g.output]->data);
}

TEST_CASE("initialization is deterministic in the config seed") {
  auto a = build_unimodal(tiny_config(11));
  auto b = build_unimodal(tiny_config(11));
  auto c = build_unimodal(tiny_config(12));
  auto da = a.state_dict(), db = b.state_dict(), dc = c.state_dict();
  REQUIRE(da.size() == db.size());
  bool any_diff = false;
  for (auto& [name, e] : da) {
    REQUIRE(e.values == db.at(name).values);
    if (e.values != dc.at(name).values) any_diff = true;
  }
  REQUIRE(any_diff);
}

TEST_CASE("weights survive a checkpoint round trip bitwise") {
  namespace fs = std::filesystem;
  auto path = (fs::temp_directory_path() / "aseg_model_ckpt.bin").string();
  auto g = build_unimodal(tiny_config(21));
  save_weights(g, path);
  auto h = build_unimodal(tiny_config(22));  // different init
  load_weights(h, path);
  auto dg = g.state_dict(), dh = h.state_dict();
  for (auto& [name, e] : dg) REQUIRE(e.values == dh.at(name).values);

  auto x = random_image(32, 32, 9);
  LayerGraph::ForwardOpts fo;
  fo.record = false;
  REQUIRE(g.forward({x}, fo).acts[g.output]->data ==
          h.forward({x}, fo).acts[g.output]->data);
  fs::remove(path);
}

TEST_CASE("load_state rejects missing and mismatched parameters") {
  auto g = build_unimodal(tiny_config());
  auto ckpt = g.state_dict();
  auto first = ckpt.begin()->first;
  ckpt.erase(ckpt.begin());
  REQUIRE_THROWS_WITH(g.load_state(ckpt),
                      Catch::Matchers::ContainsSubstring(first));

  auto full = g.state_dict();
  full.begin()->second.dtype = 0;
  REQUIRE_THROWS_WITH(g.load_state(full), Catch::Matchers::ContainsSubstring("f32"));
}

TEST_CASE("fusion model consumes two modalities and fuses at three points") {
  FusionConfig fc;
  fc.base = tiny_config(31);
  auto g = build_fusion(fc);
  auto xa = random_image(32, 32, 1);
  auto xb = random_image(32, 32, 2);
  LayerGraph::ForwardOpts fo;
  fo.record = false;
  auto r = g.forward({xa, xb}, fo);
  auto& y = *r.acts[g.output];
  REQUIRE(y.c == 6);
  REQUIRE(y.h == 32);
  REQUIRE(y.w == 32);
  // gates span 2C channels each
  REQUIRE(r.acts[g.taps.at("gate_latent")]->c == 2 * fc.base.easpp.branch_channels);
  REQUIRE(r.acts[g.taps.at("gate_skip1")]->c == 2 * fc.base.skip_channels);
  REQUIRE(r.acts[g.taps.at("gate_skip2")]->c == 2 * fc.base.skip_channels);
  for (double v : r.acts[g.taps.at("gate_latent")]->data) {
    REQUIRE(v > 0.0);
    REQUIRE(v < 1.0);
  }
}

TEST_CASE("transfer_encoder reproduces unimodal encoder activations in-stream") {
  auto uni = build_unimodal(tiny_config(41));
  FusionConfig fc;
  fc.base = tiny_config(99);  // deliberately different init
  auto fus = build_fusion(fc);
  transfer_encoder(fus, uni, 'a');

  auto x = random_image(32, 32, 13);
  auto other = random_image(32, 32, 14);
  LayerGraph::ForwardOpts fo;
  fo.record = false;
  auto ru = uni.forward({x}, fo);
  auto rf = fus.forward({x, other}, fo);
  auto& want = *ru.acts[uni.taps.at("latent")];
  auto& got = *rf.acts[fus.taps.at("a.latent")];
  REQUIRE(want.size() == got.size());
  for (std::size_t i = 0; i < want.size(); ++i)
    REQUIRE_THAT(got.data[i], Catch::Matchers::WithinAbs(want.data[i], 1e-6));
}

TEST_CASE("transfer_encoder validates the stream tag") {
  auto uni = build_unimodal(tiny_config());
  FusionConfig fc;
  fc.base = tiny_config();
  auto fus = build_fusion(fc);
  REQUIRE_THROWS_AS(transfer_encoder(fus, uni, 'c'), std::invalid_argument);
}

TEST_CASE("clone detaches parameter storage") {
  auto g = build_unimodal(tiny_config(51));
  auto h = g.clone();
  auto& w = g.nodes[g.node_id("dec.classifier")].weight;
  double before = h.nodes[h.node_id("dec.classifier")].weight->data[0];
  w->data[0] += 1.0;
  REQUIRE(h.nodes[h.node_id("dec.classifier")].weight->data[0] == before);
}

TEST_CASE("the default dilation schedule touches only existing units") {
  EncoderConfig ec;
  ec.units = {2, 2, 2, 2};
  auto sched = ec.default_schedule();
  REQUIRE(!sched.empty());
  for (const auto& d : sched) {
    REQUIRE(d.stage >= 1);
    REQUIRE(d.stage <= 3);
    REQUIRE(d.unit >= 0);
    REQUIRE(d.unit < ec.units[d.stage]);
    REQUIRE(d.r2 >= d.r1);
  }
  // the deepest stage ends at the highest rates
  auto last = sched.back();
  REQUIRE(last.stage == 3);
  REQUIRE(last.r1 == 2);
  REQUIRE(last.r2 == 16);
}
