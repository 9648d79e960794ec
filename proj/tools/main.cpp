#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "stsep/config.hpp"
#include "stsep/gemm.hpp"

namespace fs = std::filesystem;
using namespace stsep;

namespace {

int thread_count_from_env() {
  if (const char* env = std::getenv("STSEP_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

Model build_model(const ExperimentConfig& cfg) {
  Model model(cfg.model, cfg.seed);
  init_temporal_from_spatial(model);
  return model;
}

void print_metrics_line(const MetricsRecord& rec) {
  std::printf("epoch %3lld  lr %.3e  train-loss %.4f  eval-top1 %.4f  eval-top5 %.4f  (%.1fs)\n",
              static_cast<long long>(rec.epoch), rec.lr, rec.loss, rec.top1, rec.top5,
              rec.seconds);
  std::fflush(stdout);
}

int cmd_train(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  Model model = build_model(cfg);
  auto train_videos = load_train_videos(cfg);
  auto eval_videos = load_eval_videos(cfg);
  {
    // data-calibrated init of the temporal branches on the first batch
    std::vector<int64_t> picks;
    for (int64_t i = 0; i < std::min<int64_t>(cfg.train.batch_size,
                                              static_cast<int64_t>(train_videos.size()));
         ++i)
      picks.push_back(i);
    Tensor ref = assemble_batch(train_videos, picks, make_sampler(cfg, Phase::train),
                                cfg.model.resolution, cfg.data.hflip_prob, cfg.train.seed, 0,
                                nullptr);
    model.calibrate_branches(ref, cfg.model.T);
  }
  AdamWState opt;
  RunManifest manifest(cfg.output_dir + "/manifest.json", cfg);
  manifest.write();

  std::vector<MetricsRecord> history;
  Rng run_rng(cfg.seed);
  auto on_epoch = [&](const MetricsRecord& rec) {
    history.push_back(rec);
    print_metrics_line(rec);
    manifest.add_epoch(rec);
    manifest.write();
    write_metrics_csv(cfg.output_dir + "/metrics.csv", history);
    CheckpointInfo info{rec.epoch + 1, cfg.seed, manifest.hash(), run_rng.state()};
    save_checkpoint(cfg.output_dir + "/last.stck", model, &opt, info);
  };

  TrainResult result = train_loop(model, train_videos, eval_videos, cfg.train,
                                  make_sampler(cfg, Phase::train), cfg.data.hflip_prob, opt,
                                  on_epoch);
  write_metrics_csv(cfg.output_dir + "/metrics.csv", history);
  CheckpointInfo info{cfg.train.epochs, cfg.seed, manifest.hash(), run_rng.state()};
  save_checkpoint(cfg.output_dir + "/final.stck", model, &opt, info);
  manifest.add_artifact("final.stck");
  manifest.add_artifact("metrics.csv");
  manifest.write();
  if (result.diverged) {
    std::fprintf(stderr, "training diverged; last good checkpoint kept at %s/last.stck\n",
                 cfg.output_dir.c_str());
    return 3;
  }
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint, int64_t clips,
             int activation_stage) {
  Model model = build_model(cfg);
  if (!checkpoint.empty()) load_checkpoint(checkpoint, model, nullptr);
  auto eval_videos = load_eval_videos(cfg);
  SamplerSpec spec = make_sampler(cfg, Phase::eval);

  const int64_t n = static_cast<int64_t>(eval_videos.size());
  const int64_t c = model.config().num_classes;
  std::vector<float> scores(static_cast<size_t>(n * c));
  std::vector<int> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    auto p = multiclip_predict(model, eval_videos[static_cast<size_t>(i)], clips, spec);
    for (int64_t j = 0; j < c; ++j) scores[static_cast<size_t>(i * c + j)] = static_cast<float>(p[static_cast<size_t>(j)]);
    labels[static_cast<size_t>(i)] = eval_videos[static_cast<size_t>(i)].label;
  }
  const double top1 = topk_accuracy(scores, n, c, labels, 1);
  const double top5 = topk_accuracy(scores, n, c, labels, std::min<int64_t>(5, c));
  std::printf("%lld-clip eval on %lld videos: top1 %.4f  top5 %.4f\n",
              static_cast<long long>(clips), static_cast<long long>(n), top1, top5);

  fs::create_directories(cfg.output_dir);
  std::ofstream os(cfg.output_dir + "/eval.json");
  os << nlohmann::json{{"clips", clips}, {"top1", top1}, {"top5", top5}, {"videos", n}}.dump(2)
     << "\n";

  if (activation_stage > 0 && !eval_videos.empty()) {
    Rng rng(0);
    TimeTensor clip = sample_clip(eval_videos[0], spec, rng);
    auto paths = export_activation_maps(model, clip, activation_stage,
                                        cfg.output_dir + "/activation_stage" +
                                            std::to_string(activation_stage));
    std::printf("wrote %zu activation maps\n", paths.size());
  }
  return 0;
}

int cmd_count(const ExperimentConfig& cfg) {
  // paper scale: full width, 174 classes, T=16, 128^2
  ExperimentConfig paper = cfg;
  paper.model.width_multiplier = 1.0;
  paper.model.num_classes = 174;
  paper.model.T = 16;
  paper.model.resolution = 128;
  Model paper_model(paper.model, cfg.seed);
  const int64_t pp = count_params(paper_model);
  const int64_t pf = count_flops(paper.model, 16, 128);
  std::printf("paper scale  (T=16, 128^2, 174 classes): params %.3fM (%lld)  flops %.3fG (%lld)\n",
              static_cast<double>(pp) / 1e6, static_cast<long long>(pp),
              static_cast<double>(pf) / 1e9, static_cast<long long>(pf));

  Model model(cfg.model, cfg.seed);
  const int64_t cp = count_params(model);
  const int64_t cf = count_flops(cfg.model, cfg.model.T, cfg.model.resolution);
  std::printf("configured   (T=%lld, %lld^2, %lld classes): params %.3fM (%lld)  flops %.3fG (%lld)\n",
              static_cast<long long>(cfg.model.T), static_cast<long long>(cfg.model.resolution),
              static_cast<long long>(cfg.model.num_classes), static_cast<double>(cp) / 1e6,
              static_cast<long long>(cp), static_cast<double>(cf) / 1e9,
              static_cast<long long>(cf));
  return 0;
}

int cmd_retrieve(const ExperimentConfig& cfg, const std::string& checkpoint) {
  Model model = build_model(cfg);
  if (!checkpoint.empty()) load_checkpoint(checkpoint, model, nullptr);
  auto videos = load_eval_videos(cfg);
  SamplerSpec spec = make_sampler(cfg, Phase::eval);
  Rng rng(0);
  std::vector<std::vector<float>> feats;
  std::vector<int> labels;
  for (const auto& v : videos) {
    TimeTensor clip = sample_clip(v, spec, rng);
    Tensor f = model.extract_features(clip);
    feats.emplace_back(f.values());
    labels.push_back(v.label);
  }
  RetrievalResult res = knn_recall(feats, feats, labels, labels, cfg.eval.recall_ks, true);
  fs::create_directories(cfg.output_dir);
  std::ofstream os(cfg.output_dir + "/retrieval.csv");
  os << "k,recall\n";
  std::printf("KNN retrieval on %zu videos (self-excluded):\n", videos.size());
  for (const auto& [k, r] : res.recall_at) {
    std::printf("  R@%-3d %.4f\n", k, r);
    os << k << "," << r << "\n";
  }
  return 0;
}

std::vector<std::pair<std::string, ExperimentConfig>> build_sweep(const ExperimentConfig& base,
                                                                  const std::string& mode,
                                                                  const std::string& range) {
  std::vector<std::pair<std::string, ExperimentConfig>> runs;
  auto parse_span = [](const std::string& r) {
    const size_t dots = r.find("..");
    if (dots == std::string::npos) throw ConfigError("ablate: range must look like a..b");
    return std::pair<int, int>{std::stoi(r.substr(0, dots)), std::stoi(r.substr(dots + 2))};
  };
  if (mode == "ns" || mode == "rns") {
    auto [lo, hi] = parse_span(range);
    for (int k = lo; k <= hi; ++k) {
      ExperimentConfig cfg = base;
      StagePolicy fresh = make_policy(mode == "ns" ? PolicyMode::ns : PolicyMode::rns, k);
      for (int st = 1; st <= 5; ++st)
        fresh.stsep[static_cast<size_t>(st - 1)] = base.model.policy.stage_stsep(st);
      cfg.model.policy = fresh;
      runs.emplace_back(mode + std::to_string(k), cfg);
    }
  } else if (mode == "stsep-stages") {
    std::string item;
    std::istringstream stream(range);
    while (std::getline(stream, item, ',')) {
      if (item.empty()) continue;
      ExperimentConfig cfg = base;
      StagePolicy p = cfg.model.policy;
      p.stsep = {false, false, false, false, false};
      const size_t dash = item.find('-');
      const int lo = std::stoi(item.substr(0, dash));
      const int hi = dash == std::string::npos ? lo : std::stoi(item.substr(dash + 1));
      std::vector<int> stages;
      for (int st = lo; st <= hi; ++st) stages.push_back(st);
      p.set_stsep(stages);
      cfg.model.policy = p;
      runs.emplace_back("stage" + item, cfg);
    }
  } else {
    throw ConfigError("ablate: mode must be ns, rns, or stsep-stages");
  }
  return runs;
}

int cmd_ablate(const ExperimentConfig& base, const std::string& mode, const std::string& range) {
  auto runs = build_sweep(base, mode, range);
  fs::create_directories(base.output_dir);
  std::ofstream csv(base.output_dir + "/ablation.csv");
  csv << "name,params,flops,top1,top5\n";
  std::vector<std::array<std::string, 5>> table;
  for (auto& [name, cfg] : runs) {
    cfg.output_dir = base.output_dir + "/" + name;
    std::printf("=== %s ===\n", name.c_str());
    const int rc = cmd_train(cfg);
    if (rc != 0) return rc;
    nlohmann::json manifest;
    std::ifstream is(cfg.output_dir + "/manifest.json");
    is >> manifest;
    const auto& epochs = manifest["epochs"];
    const double top1 = epochs.empty() ? 0.0 : epochs.back()["top1"].get<double>();
    const double top5 = epochs.empty() ? 0.0 : epochs.back()["top5"].get<double>();
    Model m(cfg.model, cfg.seed);
    const double params = static_cast<double>(count_params(m)) / 1e6;
    const double flops =
        static_cast<double>(count_flops(cfg.model, cfg.model.T, cfg.model.resolution)) / 1e9;
    char pbuf[32], fbuf[32], t1buf[32], t5buf[32];
    std::snprintf(pbuf, sizeof(pbuf), "%.3fM", params);
    std::snprintf(fbuf, sizeof(fbuf), "%.3fG", flops);
    std::snprintf(t1buf, sizeof(t1buf), "%.4f", top1);
    std::snprintf(t5buf, sizeof(t5buf), "%.4f", top5);
    csv << name << "," << params << "," << flops << "," << top1 << "," << top5 << "\n";
    table.push_back({name, pbuf, fbuf, t1buf, t5buf});
  }
  std::printf("\n%-12s %10s %10s %8s %8s\n", "run", "params", "flops", "top1", "top5");
  for (const auto& row : table)
    std::printf("%-12s %10s %10s %8s %8s\n", row[0].c_str(), row[1].c_str(), row[2].c_str(),
                row[3].c_str(), row[4].c_str());
  return 0;
}

int cmd_gendata(const std::string& kind, int64_t count, const std::string& out, int64_t resolution,
                int64_t t_steps, double noise, uint64_t seed) {
  SyntheticTask task;
  if (kind == "direction4") task.kind = TaskKind::direction4;
  else if (kind == "playback2") task.kind = TaskKind::playback2;
  else if (kind == "shape_static") task.kind = TaskKind::shape_static;
  else throw ConfigError("gendata: unknown task '" + kind + "'");
  task.resolution = resolution;
  task.T = t_steps;
  task.noise_sigma = noise;
  task.seed = seed;
  auto records = generate(task, count);
  write_container(out, records);
  std::vector<int64_t> class_counts(static_cast<size_t>(task.num_classes()), 0);
  for (const auto& r : records) class_counts[static_cast<size_t>(r.label)] += 1;
  std::ofstream os(out + ".manifest.json");
  os << nlohmann::json{{"task", kind},
                       {"seed", seed},
                       {"count", count},
                       {"resolution", resolution},
                       {"frames", t_steps},
                       {"noise_sigma", noise},
                       {"class_counts", class_counts}}
            .dump(2)
     << "\n";
  std::printf("wrote %zu videos to %s\n", records.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  set_compute_threads(thread_count_from_env());

  CLI::App app{"stsep: spiking spatial-temporal separable network experiments"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand name

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "experiment config JSON");
  app.add_option("--set", overrides, "dotted-path override, e.g. --set model.tau=2");

  auto* train = app.add_subcommand("train", "train a model from a config");
  auto* evalc = app.add_subcommand("eval", "multi-clip evaluation of a checkpoint");
  std::string checkpoint;
  int64_t clips = 3;
  int activation_stage = 0;
  evalc->add_option("--checkpoint", checkpoint, "checkpoint file (.stck)");
  evalc->add_option("--clips", clips, "number of clips M");
  evalc->add_option("--activations", activation_stage, "also export stage activation maps (1..5)");
  auto* count = app.add_subcommand("count", "parameter and FLOP counts");
  auto* retrieve = app.add_subcommand("retrieve", "KNN Recall@k retrieval");
  std::string r_checkpoint;
  retrieve->add_option("--checkpoint", r_checkpoint, "checkpoint file (.stck)");
  auto* ablate = app.add_subcommand("ablate", "run an ns/rns/stsep-stage sweep");
  std::string mode = "ns", range = "0..5";
  ablate->add_option("--mode", mode, "ns | rns | stsep-stages");
  ablate->add_option("--range", range, "k range a..b, or stage list like 1,1-2,5");
  auto* gendata = app.add_subcommand("gendata", "generate an STV1 container");
  std::string g_kind = "direction4", g_out = "data.stv";
  int64_t g_count = 100, g_res = 32, g_t = 8;
  double g_noise = 0.05;
  uint64_t g_seed = 0;
  gendata->add_option("--task", g_kind, "direction4 | playback2 | shape_static");
  gendata->add_option("--count", g_count, "number of videos");
  gendata->add_option("--out", g_out, "output .stv path");
  gendata->add_option("--resolution", g_res, "frame resolution");
  gendata->add_option("--frames", g_t, "frames per video");
  gendata->add_option("--noise", g_noise, "pixel noise sigma");
  gendata->add_option("--seed", g_seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;  // bad usage is a configuration error
  }

  try {
    if (gendata->parsed()) return cmd_gendata(g_kind, g_count, g_out, g_res, g_t, g_noise, g_seed);
    ExperimentConfig cfg = load_experiment_config(config_path, overrides);
    if (train->parsed()) return cmd_train(cfg);
    if (evalc->parsed()) return cmd_eval(cfg, checkpoint, clips, activation_stage);
    if (count->parsed()) return cmd_count(cfg);
    if (retrieve->parsed()) return cmd_retrieve(cfg, r_checkpoint);
    if (ablate->parsed()) return cmd_ablate(cfg, mode, range);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const NumericsError& e) {
    std::fprintf(stderr, "numerics error: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
