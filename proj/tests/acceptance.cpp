// Acceptance checks for the full artifact: analytic cost accounting, FLOP
// accounting, receptive fields, autodiff soundness, pruning equivalence,
// fusion adaptivity, the pruning trade-off, metric oracles, and determinism.
// Prints one PASS/FAIL line per criterion and exits nonzero on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "aseg/aseg.hpp"

using namespace aseg;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void report(int criterion, const std::string& title, bool ok, const std::string& detail,
            double elapsed, double budget) {
  bool pass = ok && elapsed < budget;
  if (!pass) ++g_failures;
  std::printf("%s  criterion %d (%s): %s [%.1fs / %.0fs]\n", pass ? "PASS" : "FAIL",
              criterion, title.c_str(), detail.c_str(), elapsed, budget);
  std::fflush(stdout);
}

std::string with_commas(long long v) {
  std::string s = std::to_string(v), out;
  int c = 0;
  for (int i = int(s.size()) - 1; i >= 0; --i) {
    out.push_back(s[i]);
    if (++c % 3 == 0 && i > 0) out.push_back(',');
  }
  std::reverse(out.begin(), out.end());
  return out;
}

ModelConfig tiny_config(std::uint64_t seed) {
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

TensorPtr<double> random_tensor(int n, int c, int h, int w, std::uint64_t seed,
                                double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  auto t = Tensor<double>::make(n, c, h, w, true);
  for (auto& v : t->data) v = rng.uniform(lo, hi);
  return t;
}

std::vector<std::string> read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return {ss.str()};
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      double avg = 0.5 * (i + j) + 1.0;  // average rank for ties
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  auto ra = ranks(a), rb = ranks(b);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= ra.size();
  mb /= rb.size();
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

fs::path work_dir() {
  auto p = fs::temp_directory_path() / "aseg_acceptance";
  return p;
}

// --- criterion 1/2 reference graphs -----------------------------------------

LayerGraph context_graph(bool efficient) {
  Rng rng(1);
  LayerGraph g;
  int x = g.add_input("x");
  g.input_channels[x] = 2048;
  EasppConfig cfg;
  cfg.in_channels = 2048;
  cfg.branch_channels = 256;
  cfg.bottleneck_channels = 64;
  if (efficient)
    add_easpp(g, "ctx", x, cfg, rng);
  else
    add_aspp(g, "ctx", x, cfg, rng);
  return g;
}

// --- criterion 5/6/7 shared artifacts ----------------------------------------

struct TrainedClean {
  DatasetManifest data;
  LayerGraph model;
};

// like tiny_config but with a wider encoder, so the prunable bottleneck
// convs carry a meaningful share of the parameters
ModelConfig prune_config(std::uint64_t seed) {
  ModelConfig cfg = tiny_config(seed);
  cfg.encoder.stem_channels = 8;
  cfg.encoder.stage_out = {16, 32, 48, 64};
  return cfg;
}

TrainedClean train_clean_baseline(const fs::path& dir) {
  SyntheticSpec spec;
  spec.height = 32;
  spec.width = 32;
  spec.num_classes = 6;
  spec.corruption_prob = 0.0;
  spec.seed = 41;
  TrainedClean out{generate_synthetic(spec, 48, 12, (dir / "clean").string()),
                   build_unimodal(prune_config(17))};
  TrainOpts opts;
  opts.modality = Modality::A;
  opts.seed = 7;
  train_unimodal(out.model, out.data, TrainSchedule{{{600, 1e-3, 1e-3, 4}}}, opts);
  return out;
}

// the 2048-channel context graphs are expensive to initialize; build them
// once and let criteria 1 and 2 share them
LayerGraph& shared_context(bool efficient) {
  static LayerGraph aspp = context_graph(false);
  static LayerGraph easpp = context_graph(true);
  return efficient ? easpp : aspp;
}

}  // namespace

// ============================================================================

static void criterion1() {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  std::string detail;
  try {
    auto& aspp = shared_context(false);
    auto& easpp = shared_context(true);
    long long pa = aspp.count_params();
    long long pe = easpp.count_params();
    double reduction = 100.0 * (1.0 - double(pe) / double(pa));
    ok = pa == 15532032 && pe == 2039808 && std::abs(reduction - 86.87) <= 0.01;
    std::ostringstream os;
    os << "ASPP " << with_commas(pa) << ", eASPP " << with_commas(pe) << ", reduction "
       << std::fixed;
    os.precision(2);
    os << reduction << "%";
    detail = os.str();
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  report(1, "analytic parameter counts", ok, detail, seconds_since(t0), 1.0);
}

static void criterion2() {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  std::string detail;
  try {
    auto& aspp = shared_context(false);
    auto& easpp = shared_context(true);
    double fa = double(aspp.count_flops(1, 24, 48));
    double fe = double(easpp.count_flops(1, 24, 48));
    bool oa = std::abs(fa - 34.58e9) / 34.58e9 <= 0.05;
    bool oe = std::abs(fe - 3.62e9) / 3.62e9 <= 0.05;
    ok = oa && oe;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "ASPP %.2fB vs 34.58B, eASPP %.2fB vs 3.62B", fa / 1e9,
                  fe / 1e9);
    detail = buf;
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  report(2, "FLOP accounting at 48x24", ok, detail, seconds_since(t0), 1.0);
}

static void criterion3() {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  std::string detail;
  try {
    bool analytic = analytic_receptive_field(3, 3) == 7 &&
                    cascade_receptive_field(7, 7) == 13 &&
                    analytic_receptive_field(12, 3) == 25;

    // one dilated 3x3 conv (rate 4): analytic span 9, centered at the target
    Rng rng(5);
    LayerGraph g;
    int x = g.add_input("x");
    int c = g.add_conv("probe", x, 2, 3, 3, 1, 4, Pad::Same, false, &rng);
    g.output = c;
    auto img = random_tensor(1, 2, 32, 32, 11, 0.0, 1.0);
    auto heat = empirical_receptive_field(g, img, c, 16, 16, /*occluder=*/1, /*stride=*/1);
    int span = analytic_receptive_field(4, 3);  // 9
    int lo = 16 - span / 2, hi = 16 + span / 2;
    bool contained = true;
    int nonzero = 0;
    for (int y = 0; y < 32 && contained; ++y)
      for (int xx = 0; xx < 32; ++xx)
        if (heat->at(0, 0, y, xx) > 0.0) {
          ++nonzero;
          if (y < lo || y > hi || xx < lo || xx > hi) {
            contained = false;
            break;
          }
        }
    ok = analytic && contained && nonzero > 0;
    detail = "f(3,3)=7, cascade=13; empirical support (" + std::to_string(nonzero) +
             " px) inside the analytic 9x9 span";
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  report(3, "receptive-field arithmetic", ok, detail, seconds_since(t0), 10.0);
}

static void criterion4() {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  double worst = 0.0;
  std::string worst_op = "none";
  std::string detail;
  try {
    auto run = [&](const std::string& op,
                   const std::function<TensorPtr<double>(Tape<double>&)>& closure,
                   const std::vector<TensorPtr<double>>& inputs) {
      double rel = grad_check<double>(closure, inputs);
      if (rel > worst) {
        worst = rel;
        worst_op = op;
      }
      if (rel >= 1e-4) ok = false;
    };

    auto x = random_tensor(2, 4, 6, 6, 1);
    auto w = random_tensor(3, 4, 3, 3, 2);
    auto b = random_tensor(1, 1, 1, 3, 3);
    run("conv2d", [&](Tape<double>& t) {
      return sum_all(t, hadamard(t, conv2d(t, x, w, b, 2, 2, Pad::Same),
                                 conv2d(t, x, w, b, 2, 2, Pad::Same)));
    }, {x, w, b});

    auto dw = random_tensor(4, 3, 4, 4, 4);
    run("conv_transpose2d", [&](Tape<double>& t) {
      auto y = conv_transpose2d(t, x, dw, b, 2);
      return sum_all(t, hadamard(t, y, y));
    }, {x, dw, b});

    auto gamma = random_tensor(1, 1, 1, 4, 5, 0.5, 1.5);
    auto beta = random_tensor(1, 1, 1, 4, 6);
    {
      BnStats<double> stats;
      stats.running_mean.assign(4, 0.1);
      stats.running_var.assign(4, 0.9);
      // a plain (or squared) sum of the normalized output is analytically
      // independent of x in training mode — the batch statistics cancel —
      // so weight by a fixed random tensor to exercise the x path
      auto bw = random_tensor(2, 4, 6, 6, 8);
      run("batch_norm(train)", [&](Tape<double>& t) {
        BnStats<double> s = stats;
        auto y = batch_norm(t, x, gamma, beta, s, true);
        return sum_all(t, hadamard(t, y, bw));
      }, {x, gamma, beta});
      run("batch_norm(eval)", [&](Tape<double>& t) {
        BnStats<double> s = stats;
        auto y = batch_norm(t, x, gamma, beta, s, false);
        return sum_all(t, hadamard(t, y, y));
      }, {x, gamma, beta});
    }

    // keep relu inputs away from the kink
    auto xr = random_tensor(2, 4, 6, 6, 7);
    for (auto& v : xr->data)
      if (std::abs(v) < 0.05) v = 0.1;
    run("relu", [&](Tape<double>& t) {
      auto y = relu(t, xr);
      return sum_all(t, hadamard(t, y, y));
    }, {xr});

    run("sigmoid", [&](Tape<double>& t) {
      auto y = sigmoid(t, x);
      return sum_all(t, hadamard(t, y, y));
    }, {x});

    run("softmax_channels", [&](Tape<double>& t) {
      auto y = softmax_channels(t, x);
      return sum_all(t, hadamard(t, y, y));
    }, {x});

    run("global_avg_pool", [&](Tape<double>& t) {
      auto y = global_avg_pool(t, x);
      return sum_all(t, hadamard(t, y, y));
    }, {x});

    run("bilinear_upsample", [&](Tape<double>& t) {
      auto y = bilinear_upsample(t, x, 2);
      return sum_all(t, hadamard(t, y, y));
    }, {x});

    auto x2 = random_tensor(2, 3, 6, 6, 8);
    run("concat_channels", [&](Tape<double>& t) {
      auto y = concat_channels(t, x, x2);
      return sum_all(t, hadamard(t, y, y));
    }, {x, x2});

    auto x3 = random_tensor(2, 4, 6, 6, 9);
    run("add+hadamard", [&](Tape<double>& t) {
      auto y = add(t, x, x3);
      return sum_all(t, hadamard(t, y, x3));
    }, {x, x3});

    auto sc = random_tensor(2, 4, 1, 1, 10, 0.2, 1.0);
    run("scale_channels", [&](Tape<double>& t) {
      auto y = scale_channels(t, x, sc);
      return sum_all(t, hadamard(t, y, y));
    }, {x, sc});

    run("broadcast_spatial", [&](Tape<double>& t) {
      auto y = broadcast_spatial(t, sc, 6, 6);
      return sum_all(t, hadamard(t, y, x));
    }, {sc});

    run("expand+zero_channels", [&](Tape<double>& t) {
      auto y = expand_channels(t, x, {0, 2, 4, 6}, 8);
      auto z = zero_channels(t, y, {1, 3});
      return sum_all(t, hadamard(t, z, z));
    }, {x});

    std::vector<int> labels(2 * 6 * 6);
    Rng lr(12);
    for (auto& l : labels) l = lr.uniform_int(0, 3);
    labels[3] = 255;
    run("softmax_cross_entropy", [&](Tape<double>& t) {
      return softmax_cross_entropy(t, x, labels);
    }, {x});

    char buf[128];
    std::snprintf(buf, sizeof(buf), "max relative error %.2e (%s), threshold 1e-4", worst,
                  worst_op.c_str());
    detail = buf;
  } catch (const std::exception& e) {
    ok = false;
    detail = std::string("exception: ") + e.what();
  }
  report(4, "autodiff gradient checks", ok, detail, seconds_since(t0), 120.0);
}

static void criterion5(const TrainedClean& clean) {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  std::string detail;
  try {
    // (a) 50 random prune plans: surgery == zero-forcing within 1e-6
    auto g = build_unimodal(tiny_config(6));
    auto layers = default_prunable_layers(g);
    auto x = random_tensor(1, 3, 32, 32, 21, 0.0, 1.0);
    double max_dev = 0.0;
    int plans = 0;
    for (std::uint64_t seed = 1; plans < 50; ++seed) {
      Rng rng(seed * 7919);
      PrunePlan plan;
      LayerGraph::ForwardOpts zf;
      zf.record = false;
      for (const auto& name : layers) {
        if (rng.uniform() < 0.4) continue;
        int channels = g.nodes[g.node_id(name)].weight->n;
        std::vector<int> keep, removed;
        for (int ch = 0; ch < channels; ++ch) {
          bool can_remove = int(keep.size()) + (channels - ch) > 1;
          (rng.uniform() < 0.3 && can_remove ? removed : keep).push_back(ch);
        }
        if (removed.empty()) continue;
        plan.layers.push_back(name);
        plan.keep[name] = keep;
        plan.removed[name] = removed;
        zf.zero_at[activation_node_for(g, name)] = removed;
      }
      if (plan.layers.empty()) continue;
      ++plans;
      auto pruned = g.clone();
      apply_prune_with_mask(pruned, plan);
      auto want = g.forward({x}, zf).acts[g.output];
      LayerGraph::ForwardOpts fo;
      fo.record = false;
      auto got = pruned.forward({x}, fo).acts[pruned.output];
      for (std::size_t i = 0; i < want->size(); ++i)
        max_dev = std::max(max_dev, std::abs(got->data[i] - want->data[i]));
    }
    bool equivalent = max_dev < 1e-6;

    // (b) per-layer score norms are 1 +- 1e-9
    BatchIterator it(clean.data, "train", 4, 3, false);
    it.start_epoch(0);
    std::vector<Batch> batches;
    Batch batch;
    while ((int)batches.size() < 12 && it.next(batch)) batches.push_back(batch);
    auto model = clean.model.clone();
    auto mlayers = default_prunable_layers(model);
    auto taylor = taylor_rank(model, mlayers, batches);
    double worst_norm = 1.0;
    for (const auto& name : mlayers) {
      double n2 = 0.0;
      for (double v : taylor.scores.at(name)) n2 += v * v;
      double n = std::sqrt(n2);
      if (std::abs(n - 1.0) > std::abs(worst_norm - 1.0)) worst_norm = n;
    }
    bool norms_ok = std::abs(worst_norm - 1.0) <= 1e-9;

    // (c) exactness on a linear network with a linear loss
    Rng rng(3);
    LayerGraph lin;
    int lx = lin.add_input("x");
    int l1 = lin.add_conv("lin1", lx, 2, 5, 1, 1, 1, Pad::Same, false, &rng);
    int l2 = lin.add_conv("lin2", l1, 5, 3, 1, 1, 1, Pad::Same, true, &rng);
    lin.output = l2;
    Batch lb;
    lb.a = random_tensor(2, 2, 4, 4, 7);
    lb.labels.assign(2 * 4 * 4, 0);
    RankLossFn linear_loss = [](Tape<double>& t, const TensorPtr<double>& y, const Batch&) {
      return sum_all(t, y);
    };
    auto lt = taylor_rank(lin, {"lin1"}, {lb}, Modality::A, linear_loss);
    auto lo = oracle_rank(lin, {"lin1"}, {lb}, Modality::A, linear_loss);
    double lin_dev = 0.0;
    for (int ch = 0; ch < 5; ++ch)
      lin_dev = std::max(lin_dev,
                         std::abs(lt.scores.at("lin1")[ch] - lo.scores.at("lin1")[ch]));
    bool linear_exact = lin_dev < 1e-9;

    // (d) Spearman correlation of Taylor vs oracle ranks, averaged over three
    // independently initialized and trained models; a single trained model's
    // value swings by a few hundredths with the training endpoint
    auto rho_for = [&](LayerGraph& m) {
      auto layers_m = default_prunable_layers(m);
      auto ty = taylor_rank(m, layers_m, batches);
      auto orc = oracle_rank(m, layers_m, batches);
      std::vector<double> ta, ora;
      for (const auto& name : layers_m) {
        // the Taylor scores come back l2-normalized per layer; put the oracle
        // losses on the same per-layer scale so the pooled ranks are
        // comparable
        double n2 = 0.0;
        for (double v : orc.scores.at(name)) n2 += v * v;
        double n = n2 > 0.0 ? std::sqrt(n2) : 1.0;
        for (double v : ty.scores.at(name)) ta.push_back(v);
        for (double v : orc.scores.at(name)) ora.push_back(v / n);
      }
      return spearman(ta, ora);
    };
    double rho_sum = rho_for(model);
    for (std::uint64_t seed : {18, 19}) {
      auto extra = build_unimodal(prune_config(seed));
      TrainOpts topts;
      topts.modality = Modality::A;
      topts.seed = 7;
      train_unimodal(extra, clean.data, TrainSchedule{{{600, 1e-3, 1e-3, 4}}}, topts);
      rho_sum += rho_for(extra);
    }
    double rho = rho_sum / 3.0;
    bool rho_ok = rho >= 0.7;

    ok = equivalent && norms_ok && linear_exact && rho_ok;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "50 plans, max deviation %.1e; norms 1%+.1e; linear exact %.1e; "
                  "Spearman (3-model mean) %.3f",
                  max_dev, worst_norm - 1.0, lin_dev, rho);
    detail = buf;
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  report(5, "pruning equivalence and ranking", ok, detail, seconds_since(t0), 300.0);
}

static void criterion6(const fs::path& dir) {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  std::string detail;
  try {
    SyntheticSpec spec;
    spec.height = 32;
    spec.width = 32;
    spec.num_classes = 6;
    spec.corruption_prob = 0.5;
    spec.seed = 33;
    auto data = generate_synthetic(spec, 96, 24, (dir / "corrupt").string());

    TrainSchedule uni = TrainSchedule{{{1500, 1e-3, 1e-3, 4}}};
    TrainOpts oa;
    oa.modality = Modality::A;
    oa.seed = 7;
    auto ga = build_unimodal(tiny_config(21));
    train_unimodal(ga, data, uni, oa);
    TrainOpts ob;
    ob.modality = Modality::B;
    ob.seed = 7;
    auto gb = build_unimodal(tiny_config(22));
    train_unimodal(gb, data, uni, ob);

    FusionConfig fc;
    fc.base = tiny_config(23);
    auto gf = build_fusion(fc);
    TrainOpts of;
    of.seed = 7;
    train_fusion_multistage(gf, ga, gb, data, TrainSchedule{{{1500, 1e-4, 1e-3, 4},
                                                             {500, 0.0, 1e-5, 4}}},
                            of);

    EvalOpts ea;
    ea.modality = Modality::A;
    double miou_a = miou(evaluate_model(ga, data, "val", 6, ea));
    EvalOpts eb;
    eb.modality = Modality::B;
    double miou_b = miou(evaluate_model(gb, data, "val", 6, eb));
    EvalOpts ef;
    double miou_f = miou(evaluate_model(gf, data, "val", 6, ef));
    bool gain_ok = miou_f >= std::max(miou_a, miou_b) + 0.02;

    // mean gate activation over the corrupted modality's half of the gate,
    // corrupted vs clean validation samples
    const int C = fc.base.easpp.branch_channels;
    double sum_corrupt = 0.0, sum_clean = 0.0;
    long long n_corrupt = 0, n_clean = 0;
    LayerGraph::ForwardOpts fo;
    fo.record = false;
    for (int i = 0; i < (int)data.val.size(); ++i) {
      auto s = load_sample(data, "val", i);
      auto r = gf.forward({s.modality_a, s.modality_b}, fo);
      const auto& gate = *r.acts[gf.taps.at("gate_latent")];
      const std::size_t plane = std::size_t(gate.h) * gate.w;
      auto half_mean = [&](int c0) {
        double s2 = 0.0;
        for (int ic = c0; ic < c0 + C; ++ic)
          for (std::size_t p = 0; p < plane; ++p) s2 += gate.data[std::size_t(ic) * plane + p];
        return s2 / double(C * plane);
      };
      const std::string& tag = data.val[i].corruption;
      if (tag == "none") {
        sum_clean += 0.5 * (half_mean(0) + half_mean(C));
        ++n_clean;
      } else {
        bool hit_a = tag.size() > 2 && tag[tag.size() - 1] == 'a';
        sum_corrupt += half_mean(hit_a ? 0 : C);
        ++n_corrupt;
      }
    }
    bool gate_ok = n_corrupt > 0 && n_clean > 0 &&
                   (sum_corrupt / n_corrupt) < (sum_clean / n_clean);

    ok = gain_ok && gate_ok;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "val mIoU: A %.3f, B %.3f, fusion %.3f (need +0.02); corrupted-half "
                  "gate %.3f < clean %.3f",
                  miou_a, miou_b, miou_f, n_corrupt ? sum_corrupt / n_corrupt : -1.0,
                  n_clean ? sum_clean / n_clean : -1.0);
    detail = buf;
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  report(6, "fusion adaptivity under corruption", ok, detail, seconds_since(t0), 1800.0);
}

static void criterion7(const TrainedClean& clean, const fs::path& dir) {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  std::string detail;
  try {
    auto g = clean.model.clone();
    PruneLoopOpts opts;
    opts.layers = default_prunable_layers(g);
    opts.stages = 2;
    opts.fraction_per_stage = 0.35;
    opts.finetune_iterations = 400;
    opts.finetune_lr = 1e-4;
    opts.batch_size = 4;
    opts.rank_batches = 2;
    opts.flops_h = 32;
    opts.flops_w = 32;
    opts.seed = 11;
    auto report_rows = prune_finetune_loop(g, clean.data, opts, dir.string());
    write_prune_report_csv(report_rows, (dir / "prune_report.csv").string());

    double removed_frac =
        1.0 - double(report_rows.back().params) / double(report_rows[0].params);
    double drop = report_rows[0].miou - report_rows.back().miou;
    bool monotone = true;
    for (std::size_t i = 1; i < report_rows.size(); ++i)
      if (report_rows[i].params >= report_rows[i - 1].params) monotone = false;
    ok = removed_frac >= 0.05 && drop <= 0.005 && monotone;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "removed %.1f%% of parameters (need >=5%%), mIoU %.3f -> %.3f "
                  "(drop %+.4f, limit 0.005), params monotone %s",
                  100.0 * removed_frac, report_rows[0].miou, report_rows[1].miou, drop,
                  monotone ? "yes" : "no");
    detail = buf;
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  report(7, "pruning trade-off after fine-tune", ok, detail, seconds_since(t0), 1200.0);
}

static void criterion8() {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  std::string detail;
  try {
    // hand-enumerated 3-class fixture: 12 pixels, 2 ignored
    std::vector<int> truth = {0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 255, 255};
    std::vector<int> pred = {0, 0, 1, 1, 1, 1, 2, 2, 2, 0, 0, 1};
    ConfusionMatrix cm(3);
    cm.accumulate(pred, truth);
    bool counts_ok = cm.at(0, 0) == 2 && cm.at(0, 1) == 1 && cm.at(1, 1) == 3 &&
                     cm.at(1, 2) == 1 && cm.at(2, 2) == 2 && cm.at(2, 0) == 1 &&
                     cm.total() == 10;
    auto close = [](double a, double b) { return std::abs(a - b) < 1e-12; };
    bool metrics_ok = close(*iou(cm, 0), 2.0 / 4.0) && close(*iou(cm, 1), 3.0 / 5.0) &&
                      close(*iou(cm, 2), 2.0 / 4.0) &&
                      close(miou(cm), (0.5 + 0.6 + 0.5) / 3.0) &&
                      close(giou(cm), 7.0 / 13.0) && close(pixel_accuracy(cm), 0.7) &&
                      close(avg_precision(cm), (2.0 / 3.0 + 3.0 / 4.0 + 2.0 / 3.0) / 3.0);

    // trimap band-1 against an exhaustive Chebyshev-distance oracle on 8x8
    bool trimap_ok = true;
    for (std::uint64_t seed : {1, 2, 3, 4}) {
      Rng rng(seed);
      const int h = 8, w = 8;
      std::vector<int> t(h * w), p(h * w);
      for (auto& v : t) v = rng.uniform_int(0, 2);
      for (auto& v : p) v = rng.uniform_int(0, 2);
      t[rng.uniform_int(0, h * w - 1)] = 255;
      t[rng.uniform_int(0, h * w - 1)] = 255;
      auto mask = trimap_band_mask(t, h, w, 1);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          // oracle: Chebyshev distance <= 1 from any void pixel
          bool want = false;
          for (int vy = 0; vy < h && !want; ++vy)
            for (int vx = 0; vx < w; ++vx)
              if (t[std::size_t(vy) * w + vx] == 255 &&
                  std::max(std::abs(vy - y), std::abs(vx - x)) <= 1) {
                want = true;
                break;
              }
          if (bool(mask[std::size_t(y) * w + x]) != want) trimap_ok = false;
        }
      auto bands = trimap_miou(p, t, h, w, 3, {1, 2});
      if (bands.size() != 2 || bands[0].first != 1) trimap_ok = false;
    }

    ok = counts_ok && metrics_ok && trimap_ok;
    detail = std::string("confusion counts ") + (counts_ok ? "exact" : "WRONG") +
             ", derived metrics " + (metrics_ok ? "exact" : "WRONG") + ", trimap band-1 " +
             (trimap_ok ? "matches oracle" : "WRONG");
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  report(8, "metric oracles", ok, detail, seconds_since(t0), 5.0);
}

static void criterion9(const fs::path& dir) {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  std::string detail;
  try {
    SyntheticSpec spec;
    spec.height = 32;
    spec.width = 32;
    spec.seed = 51;
    auto d1 = generate_synthetic(spec, 4, 2, (dir / "det1").string());
    auto d2 = generate_synthetic(spec, 4, 2, (dir / "det2").string());
    bool data_ok = true;
    for (std::size_t i = 0; i < d1.train.size(); ++i)
      if (read_file_bytes((dir / "det1").string() + "/" + d1.train[i].a) !=
          read_file_bytes((dir / "det2").string() + "/" + d2.train[i].a))
        data_ok = false;

    TrainSchedule sched{{{25, 1e-3, 1e-3, 2}}};
    TrainOpts opts;
    opts.modality = Modality::A;
    opts.augment_enabled = true;
    auto run_once = [&](const std::string& name) {
      auto g = build_unimodal(tiny_config(31));
      train_unimodal(g, d1, sched, opts);
      auto path = (dir / name).string();
      save_weights(g, path);
      return path;
    };
    auto c1 = run_once("a.ckpt");
    auto c2 = run_once("b.ckpt");
    bool train_ok = read_file_bytes(c1) == read_file_bytes(c2);

    ok = data_ok && train_ok;
    detail = std::string("dataset generation ") + (data_ok ? "bitwise identical" : "DIFFERS") +
             ", repeated training checkpoints " + (train_ok ? "bitwise identical" : "DIFFER");
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  report(9, "end-to-end determinism", ok, detail, seconds_since(t0), 600.0);
}

int main() {
  auto dir = work_dir();
  fs::remove_all(dir);
  fs::create_directories(dir);

  criterion1();
  criterion2();
  criterion3();
  criterion4();

  TrainedClean clean = train_clean_baseline(dir);
  criterion5(clean);
  criterion6(dir);
  criterion7(clean, dir);
  criterion8();
  criterion9(dir);

  fs::remove_all(dir);
  if (g_failures) {
    std::printf("%d criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
