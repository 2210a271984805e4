// aseg: operator CLI for dataset generation, training, evaluation, pruning
// and model inspection. Config is strict JSON (unknown keys rejected); every
// run writes a resolved-config copy into its output directory.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "aseg/aseg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// validation problem (bad config, missing file) -> exit 1; other runtime
// failures -> exit 2
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ConfigError("unknown key '" + key + "' in " + where);
}

json load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse failure: ") + e.what());
  }
  return j;
}

// --override a.b.c=VALUE ; VALUE parsed as JSON when possible, else string
void apply_override(json& cfg, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be KEY=VALUE: " + kv);
  std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
  json* node = &cfg;
  std::size_t pos = 0;
  while (true) {
    auto dot = key.find('.', pos);
    std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (part.empty()) throw ConfigError("bad override key: " + key);
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
      return;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

std::string with_commas(long long v) {
  std::string raw = std::to_string(v), out;
  int count = 0;
  for (auto it = raw.rbegin(); it != raw.rend(); ++it) {
    if (count && count % 3 == 0) out.push_back(',');
    out.push_back(*it);
    ++count;
  }
  return std::string(out.rbegin(), out.rend());
}

fs::path prepare_out(const json& cfg, const std::string& out_flag) {
  std::string out = !out_flag.empty() ? out_flag : cfg.value("out", std::string());
  if (out.empty()) throw ConfigError("no output directory (--out or config 'out')");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw ConfigError("cannot create output directory " + out);
  std::ofstream os(fs::path(out) / "resolved_config.json");
  os << cfg.dump(2) << "\n";
  return out;
}

// --- model construction from config ------------------------------------------

aseg::ModelConfig model_from_config(const json& cfg) {
  json m = cfg.value("model", json::object());
  check_keys(m, {"preset", "num_classes", "seed", "skip_channels", "decoder_channels",
                 "dropout_p", "easpp_branch_channels", "easpp_bottleneck_channels"},
             "model");
  std::string preset = m.value("preset", "desk");
  if (preset != "desk") throw ConfigError("unknown model preset '" + preset + "'");
  auto mc = aseg::ModelConfig::desk(m.value("num_classes", 6),
                                    m.value("seed", std::uint64_t(1)));
  if (m.count("skip_channels")) mc.skip_channels = m["skip_channels"].get<int>();
  if (m.count("decoder_channels")) mc.decoder_channels = m["decoder_channels"].get<int>();
  if (m.count("dropout_p")) mc.dropout_p = m["dropout_p"].get<double>();
  if (m.count("easpp_branch_channels"))
    mc.easpp.branch_channels = m["easpp_branch_channels"].get<int>();
  if (m.count("easpp_bottleneck_channels"))
    mc.easpp.bottleneck_channels = m["easpp_bottleneck_channels"].get<int>();
  return mc;
}

aseg::FusionConfig fusion_from_config(const json& cfg) {
  aseg::FusionConfig fc;
  fc.base = model_from_config(cfg);
  json f = cfg.value("fusion", json::object());
  check_keys(f, {"eta_enc", "eta_skip", "checkpoint_a", "checkpoint_b"}, "fusion");
  fc.eta_enc = f.value("eta_enc", 16);
  fc.eta_skip = f.value("eta_skip", 6);
  return fc;
}

aseg::Modality modality_of(const std::string& mode) {
  if (mode == "unimodal_a") return aseg::Modality::A;
  if (mode == "unimodal_b") return aseg::Modality::B;
  if (mode == "fusion") return aseg::Modality::Both;
  throw ConfigError("mode must be unimodal_a, unimodal_b or fusion; got '" + mode + "'");
}

aseg::LayerGraph build_model(const json& cfg, const std::string& mode) {
  if (mode == "fusion") return aseg::build_fusion(fusion_from_config(cfg));
  return aseg::build_unimodal(model_from_config(cfg));
}

aseg::DatasetManifest manifest_from_config(const json& cfg) {
  if (!cfg.count("manifest")) throw ConfigError("config requires 'manifest'");
  std::string path = cfg["manifest"].get<std::string>();
  if (!fs::exists(path)) throw ConfigError("manifest not found: " + path);
  return aseg::load_manifest(path);
}

aseg::TrainSchedule schedule_from_config(const json& cfg, const std::string& mode) {
  json s = cfg.value("schedule", json::object());
  check_keys(s, {"stages"}, "schedule");
  aseg::TrainSchedule sched;
  if (s.count("stages")) {
    for (const auto& st : s["stages"]) {
      check_keys(st, {"iterations", "encoder_lr", "decoder_lr", "batch_size"},
                 "schedule.stages[]");
      aseg::TrainStage stage;
      stage.iterations = st.value("iterations", 100);
      stage.encoder_lr = st.value("encoder_lr", 1e-3);
      stage.decoder_lr = st.value("decoder_lr", 1e-3);
      stage.batch_size = st.value("batch_size", 4);
      sched.stages.push_back(stage);
    }
  } else {
    sched = mode == "fusion" ? aseg::TrainSchedule::fusion_desk()
                             : aseg::TrainSchedule::unimodal_desk();
  }
  return sched;
}

// --- commands -----------------------------------------------------------------

int cmd_gen_data(const json& cfg, const std::string& out_flag) {
  check_keys(cfg, {"data", "seed", "out"}, "config");
  json d = cfg.value("data", json::object());
  check_keys(d, {"num_train", "num_val", "num_classes", "height", "width",
                 "instances_min", "instances_max", "regimes", "corruption_prob", "seed"},
             "data");
  fs::path out = prepare_out(cfg, out_flag);
  aseg::SyntheticSpec spec;
  spec.num_classes = d.value("num_classes", 6);
  spec.height = d.value("height", 64);
  spec.width = d.value("width", 64);
  spec.instances_min = d.value("instances_min", 3);
  spec.instances_max = d.value("instances_max", 6);
  if (d.count("regimes")) spec.regimes = d["regimes"].get<std::vector<std::string>>();
  spec.corruption_prob = d.value("corruption_prob", 0.0);
  spec.seed = d.value("seed", cfg.value("seed", std::uint64_t(1)));
  int n_train = d.value("num_train", 32);
  int n_val = d.value("num_val", 8);
  auto m = aseg::generate_synthetic(spec, n_train, n_val, (out / "data").string());
  std::cout << "manifest " << (out / "data" / "manifest.json").string() << "\n"
            << "train " << m.train.size() << "\nval " << m.val.size() << "\n";
  return 0;
}

int cmd_train(const json& cfg, const std::string& out_flag) {
  check_keys(cfg, {"mode", "manifest", "model", "fusion", "schedule", "augment", "seed",
                   "out"},
             "config");
  std::string mode = cfg.value("mode", "unimodal_a");
  modality_of(mode);
  fs::path out = prepare_out(cfg, out_flag);
  auto data = manifest_from_config(cfg);
  auto sched = schedule_from_config(cfg, mode);

  aseg::TrainOpts topts;
  topts.modality = modality_of(mode);
  topts.seed = cfg.value("seed", std::uint64_t(7));
  topts.checkpoint_dir = out.string();
  json a = cfg.value("augment", json::object());
  check_keys(a, {"enabled"}, "augment");
  topts.augment_enabled = a.value("enabled", false);

  auto g = build_model(cfg, mode);
  aseg::TrainLog log;
  if (mode == "fusion") {
    json f = cfg.value("fusion", json::object());
    if (!f.count("checkpoint_a") || !f.count("checkpoint_b"))
      throw ConfigError("fusion training requires fusion.checkpoint_a and "
                        "fusion.checkpoint_b (train the unimodal models first)");
    auto fc = fusion_from_config(cfg);
    auto ua = aseg::build_unimodal(fc.base);
    auto ub = aseg::build_unimodal(fc.base);
    std::string ca = f["checkpoint_a"].get<std::string>();
    std::string cb = f["checkpoint_b"].get<std::string>();
    if (!fs::exists(ca)) throw ConfigError("checkpoint not found: " + ca);
    if (!fs::exists(cb)) throw ConfigError("checkpoint not found: " + cb);
    aseg::load_weights(ua, ca);
    aseg::load_weights(ub, cb);
    log = aseg::train_fusion_multistage(g, ua, ub, data, sched, topts);
  } else {
    log = aseg::train_unimodal(g, data, sched, topts);
  }
  log.write_csv((out / "log.csv").string());
  aseg::save_weights(g, (out / "final.ckpt").string());
  std::cout << "checkpoint " << (out / "final.ckpt").string() << "\n"
            << "iterations " << log.rows.size() << "\n";
  return 0;
}

int cmd_eval(const json& cfg, const std::string& out_flag) {
  check_keys(cfg, {"mode", "manifest", "model", "fusion", "checkpoint", "split",
                   "flip_average", "seed", "out"},
             "config");
  std::string mode = cfg.value("mode", "unimodal_a");
  fs::path out = prepare_out(cfg, out_flag);
  auto data = manifest_from_config(cfg);
  auto g = build_model(cfg, mode);
  if (!cfg.count("checkpoint")) throw ConfigError("eval requires 'checkpoint'");
  std::string ckpt = cfg["checkpoint"].get<std::string>();
  if (!fs::exists(ckpt)) throw ConfigError("checkpoint not found: " + ckpt);
  aseg::load_weights(g, ckpt);

  aseg::EvalOpts eo;
  eo.modality = modality_of(mode);
  eo.flip_average = cfg.value("flip_average", false);
  int C = model_from_config(cfg).num_classes;
  auto cm = aseg::evaluate_model(g, data, cfg.value("split", "val"), C, eo);
  auto rep = aseg::compute_metrics(cm);

  std::ofstream os(out / "metrics.csv");
  os << "metric,value\n";
  os << "miou," << rep.miou << "\ngiou," << rep.giou << "\naccuracy," << rep.accuracy
     << "\nap," << rep.ap << "\nfpr," << rep.fpr << "\nfnr," << rep.fnr << "\n";
  for (int c = 0; c < (int)rep.per_class_iou.size(); ++c)
    if (rep.per_class_iou[c]) os << "iou_" << c << "," << *rep.per_class_iou[c] << "\n";
  std::cout << "miou " << rep.miou << "\n";
  return 0;
}

int cmd_prune(const json& cfg, const std::string& out_flag) {
  check_keys(cfg, {"mode", "manifest", "model", "checkpoint", "prune", "seed", "out"},
             "config");
  std::string mode = cfg.value("mode", "unimodal_a");
  if (mode == "fusion") throw ConfigError("prune supports unimodal modes only");
  fs::path out = prepare_out(cfg, out_flag);
  auto data = manifest_from_config(cfg);
  auto g = build_model(cfg, mode);
  if (!cfg.count("checkpoint")) throw ConfigError("prune requires 'checkpoint'");
  std::string ckpt = cfg["checkpoint"].get<std::string>();
  if (!fs::exists(ckpt)) throw ConfigError("checkpoint not found: " + ckpt);
  aseg::load_weights(g, ckpt);

  json p = cfg.value("prune", json::object());
  check_keys(p, {"layers", "fraction", "stages", "finetune_iterations", "finetune_lr",
                 "batch_size", "rank_batches"},
             "prune");
  aseg::PruneLoopOpts popts;
  popts.layers = p.count("layers") ? p["layers"].get<std::vector<std::string>>()
                                   : aseg::default_prunable_layers(g);
  popts.fraction_per_stage = p.value("fraction", 0.1);
  popts.stages = p.value("stages", 1);
  popts.finetune_iterations = p.value("finetune_iterations", 200);
  popts.finetune_lr = p.value("finetune_lr", 1e-4);
  popts.batch_size = p.value("batch_size", 4);
  popts.rank_batches = p.value("rank_batches", 2);
  popts.num_classes = model_from_config(cfg).num_classes;
  popts.modality = modality_of(mode);
  popts.seed = cfg.value("seed", std::uint64_t(11));
  popts.flops_h = data.spec.height;
  popts.flops_w = data.spec.width;

  auto report = aseg::prune_finetune_loop(g, data, popts, out.string());
  aseg::write_prune_report_csv(report, (out / "prune_report.csv").string());
  aseg::save_weights(g, (out / "pruned.ckpt").string());
  for (const auto& r : report)
    std::cout << "stage " << r.stage << " params " << r.params << " miou " << r.miou
              << "\n";
  return 0;
}

int cmd_inspect(const json& cfg, const std::string& out_flag) {
  check_keys(cfg, {"reference", "model", "input", "seed", "out"}, "config");
  fs::path out = prepare_out(cfg, out_flag);
  json in = cfg.value("input", json::object());
  check_keys(in, {"height", "width"}, "input");

  aseg::LayerGraph g;
  int h = in.value("height", 64), w = in.value("width", 64);
  std::string title;
  if (cfg.count("reference")) {
    std::string ref = cfg["reference"].get<std::string>();
    aseg::Rng rng(1);
    aseg::EasppConfig ec;
    ec.in_channels = 2048;
    ec.branch_channels = 256;
    ec.bottleneck_channels = 64;
    int x = g.add_input("feature");
    g.input_channels[x] = 2048;
    if (ref == "aspp")
      g.output = aseg::add_aspp(g, "aspp", x, ec, rng);
    else if (ref == "easpp")
      g.output = aseg::add_easpp(g, "easpp", x, ec, rng);
    else
      throw ConfigError("reference must be 'aspp' or 'easpp'");
    title = ref;
    h = in.value("height", 24);
    w = in.value("width", 48);
  } else {
    g = aseg::build_unimodal(model_from_config(cfg));
    title = "model";
  }

  long long params = g.count_params();
  long long flops = g.count_flops(1, h, w);
  std::ofstream layers(out / "layers.csv");
  layers << "layer,kind,params\n";
  for (const auto& n : g.nodes) {
    long long p = 0;
    if (n.kind == aseg::OpKind::Conv || n.kind == aseg::OpKind::Deconv) {
      if (n.weight) p += (long long)n.weight->size();
      if (n.bias) p += (long long)n.bias->size();
    }
    if (p)
      layers << n.name << ","
             << (n.kind == aseg::OpKind::Conv ? "conv" : "deconv") << "," << p << "\n";
  }

  std::ofstream rf(out / "receptive_fields.csv");
  rf << "layer,kernel,dilation,receptive_field\n";
  for (const auto& n : g.nodes)
    if (n.kind == aseg::OpKind::Conv && n.dilation > 1)
      rf << n.name << "," << n.weight->h << "," << n.dilation << ","
         << aseg::analytic_receptive_field(n.dilation, n.weight->h) << "\n";

  std::cout << title << " params " << with_commas(params) << "\n"
            << title << " flops " << with_commas(flops) << " (1x" << h << "x" << w
            << " input)\n";
  std::ofstream totals(out / "totals.csv");
  totals << "metric,value\nparams," << params << "\nflops," << flops << "\nparams_all,"
         << g.count_params_all() << "\n";
  return 0;
}

int cmd_rf_map(const json& cfg, const std::string& out_flag) {
  check_keys(cfg, {"model", "layer", "target", "input", "occluder", "stride", "seed",
                   "out"},
             "config");
  fs::path out = prepare_out(cfg, out_flag);
  json in = cfg.value("input", json::object());
  check_keys(in, {"height", "width"}, "input");
  int h = in.value("height", 64), w = in.value("width", 64);

  auto g = aseg::build_unimodal(model_from_config(cfg));
  int node;
  std::string layer = cfg.value("layer", std::string());
  if (!layer.empty()) {
    try {
      node = g.node_id(layer);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  } else {
    node = g.taps.at("latent");
  }

  aseg::Rng rng(cfg.value("seed", std::uint64_t(3)));
  auto input = aseg::Tensor<double>::make(1, 3, h, w);
  for (auto& v : input->data) v = rng.uniform();

  json t = cfg.value("target", json::object());
  check_keys(t, {"y", "x"}, "target");
  aseg::LayerGraph::ForwardOpts fo;
  fo.record = false;
  auto probe = g.forward({input}, fo);
  const auto& feat = probe.acts[node];
  int ty = t.value("y", feat->h / 2), tx = t.value("x", feat->w / 2);

  auto heat = aseg::empirical_receptive_field(g, input, node, ty, tx,
                                              cfg.value("occluder", 8),
                                              cfg.value("stride", 4));
  aseg::save_pgm_scaled(heat, (out / "rf_map.pgm").string());
  std::cout << "rf_map " << (out / "rf_map.pgm").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("ASEG_THREADS")) {
    int n = std::atoi(threads);
    if (n > 0) Eigen::setNbThreads(n);
  }

  CLI::App app{"aseg: desk-scale multimodal segmentation toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  std::int64_t seed_flag = -1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--seed", seed_flag, "override config seed");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--override", overrides, "KEY=VALUE config override (repeatable)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multimodal dataset");
  auto* train = app.add_subcommand("train", "train a unimodal or fusion model");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* prune = app.add_subcommand("prune", "iterative channel pruning with fine-tuning");
  auto* inspect = app.add_subcommand("inspect", "parameter/FLOP/receptive-field report");
  auto* rfmap = app.add_subcommand("rf-map", "empirical receptive-field heatmap");
  for (auto* sub : {gen, train, eval, prune, inspect, rfmap}) add_common(sub);

  CLI11_PARSE(app, argc, argv);

  try {
    json cfg = load_config(config_path);
    for (const auto& kv : overrides) apply_override(cfg, kv);
    if (seed_flag >= 0) cfg["seed"] = std::uint64_t(seed_flag);
    if (gen->parsed()) return cmd_gen_data(cfg, out_dir);
    if (train->parsed()) return cmd_train(cfg, out_dir);
    if (eval->parsed()) return cmd_eval(cfg, out_dir);
    if (prune->parsed()) return cmd_prune(cfg, out_dir);
    if (inspect->parsed()) return cmd_inspect(cfg, out_dir);
    if (rfmap->parsed()) return cmd_rf_map(cfg, out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "ERROR: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "ERROR: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "ERROR: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
