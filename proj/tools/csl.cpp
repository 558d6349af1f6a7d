// csl: command-line front end for the toy model and the subspace analyses.
//
//   csl toy train|extract
//   csl analyze svd|gcca|rsa|overlap
//   csl intervene patch|ablate|isolate|transfer
//   csl heads cie|attn|metrics
//
// Every leaf command accepts --config job.json; its keys are option names
// (without dashes) and are applied before the command-line flags, which win.
// Exit codes: 0 ok, 2 invalid input, 1 compute failure.

#include "csl/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace csl;

namespace {

std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<int> parse_ints(const std::string& s, const std::string& what) {
  std::vector<int> out;
  for (const auto& t : split(s)) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoi(t, &pos));
      require(pos == t.size(), "");
    } catch (...) {
      fail_validation("invalid " + what + " list '" + s + "'");
    }
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (int v : parse_ints(s, "seed")) {
    require(v >= 0, "seeds must be non-negative");
    out.push_back(static_cast<std::uint64_t>(v));
  }
  require(!out.empty(), "at least one seed is required");
  return out;
}

std::vector<toy::Corruption> parse_conditions(const std::string& s) {
  std::vector<toy::Corruption> out;
  for (const auto& t : split(s)) {
    const auto c = toy::corruption_from_string(t);
    require(c != toy::Corruption::None, "corruption condition 'none' is not a patching condition");
    out.push_back(c);
  }
  require(!out.empty(), "at least one corruption condition is required");
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_compute("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string grid_csv(const Matrix& g, const std::string& a, const std::string& b, const std::string& value,
                     const std::vector<std::string>& labels) {
  std::string out = a + "," + b + "," + value + "\n";
  for (Index i = 0; i < g.rows(); ++i)
    for (Index j = 0; j < g.cols(); ++j)
      out += labels[std::size_t(i)] + "," + labels[std::size_t(j)] + "," + format_number(g(i, j)) + "\n";
  return out;
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return rows;
}

json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

/// Turns `--config file.json` into ordinary flags placed right after the
/// subcommand path, so that explicit flags later on the line override them.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  auto it = std::find(args.begin(), args.end(), "--config");
  if (it == args.end()) return args;
  if (it + 1 == args.end()) fail_validation("--config needs a file argument");
  const std::string path = *(it + 1);
  args.erase(it, it + 2);
  std::ifstream in(path);
  if (!in) fail_validation("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail_validation(std::string("malformed config JSON: ") + e.what());
  }
  require(j.is_object(), "config must be a JSON object");
  std::vector<std::string> flags;
  for (const auto& [key, value] : j.items()) {
    std::string v;
    if (value.is_string()) {
      v = value.get<std::string>();
    } else if (value.is_array()) {
      for (const auto& e : value) {
        if (!v.empty()) v += ",";
        v += e.is_string() ? e.get<std::string>() : e.dump();
      }
    } else if (value.is_boolean()) {
      v = value.get<bool>() ? "true" : "false";
    } else if (value.is_number()) {
      v = value.dump();
    } else {
      fail_validation("config key '" + key + "' has an unsupported value");
    }
    flags.push_back("--" + key + "=" + v);
  }
  const std::size_t at = std::min<std::size_t>(2, args.size());
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), flags.begin(), flags.end());
  return args;
}

// ---------------------------------------------------------------------------

struct Common {
  std::string out = "out";
  int threads = 1;
};

struct ModelSource {
  std::string checkpoint;
  toy::TaskConfig task;
  std::optional<ToyModel> loaded;

  const ToyModel& model() const { return *loaded; }

  void load() {
    const TensorFile t = read_tensor(checkpoint);
    loaded = toy::model_from_checkpoint<double>(t);
    if (t.metadata.contains("task_config")) task = toy::task_config_from_json(t.metadata.at("task_config"));
    require(task.vocab_needed() <= loaded->config().vocab, "checkpoint vocabulary too small for its task");
  }
};

struct AnalysisOpts {
  std::string seeds = "100,101,102,103,104";
  int demos = 8;
  std::string layers;
  std::string rank = "auto";
  int rank_perms = kDefaultPermutations;
  double pca = 0.95;
  int r_max = 8;
  std::uint64_t seed = 0;

  FitOptions fit() const {
    FitOptions f;
    if (!layers.empty()) f.layers = parse_ints(layers, "layer");
    if (rank != "auto") {
      const auto r = parse_ints(rank, "rank");
      require(r.size() == 1 && r[0] >= 1, "rank must be 'auto' or a positive integer");
      f.rank = r[0];
    }
    require(rank_perms >= 100, "rank-perms must be at least 100");
    require(pca >= 0 && pca <= 1, "pca must lie in [0, 1]");
    f.permutations = rank_perms;
    f.pca_variance = pca;
    f.r_max = r_max;
    f.seed = seed;
    return f;
  }
  json to_json() const {
    return {{"seeds", seeds}, {"demos", demos}, {"layers", layers}, {"rank", rank}, {"rank_perms", rank_perms},
            {"pca", pca},     {"r_max", r_max}, {"seed", seed}};
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
  cmd->add_option("--threads", c.threads, "worker cap (computation is single-threaded)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

void add_model(CLI::App* cmd, ModelSource& m) {
  cmd->add_option("--checkpoint", m.checkpoint, "toy checkpoint (.actb)")->required();
}

void add_analysis(CLI::App* cmd, AnalysisOpts& a) {
  cmd->add_option("--seeds", a.seeds, "comma-separated context seeds")->capture_default_str();
  cmd->add_option("--demos", a.demos, "demonstrations per prompt")->capture_default_str();
  cmd->add_option("--layers", a.layers, "comma-separated subspace layers (default: upper half)");
  cmd->add_option("--rank", a.rank, "GCCA rank or 'auto'")->capture_default_str();
  cmd->add_option("--rank-perms", a.rank_perms, "permutations for rank selection")->capture_default_str();
  cmd->add_option("--pca", a.pca, "variance kept by per-layer PCA before GCCA (0 = off)")->capture_default_str();
  cmd->add_option("--r-max", a.r_max, "largest rank tested by rank selection")->capture_default_str();
  cmd->add_option("--seed", a.seed, "analysis seed")->capture_default_str();
}

json base_provenance(const std::string& command, const json& config, const Common& c) {
  json p = provenance(config);
  p["command"] = command;
  p["threads"] = c.threads;
  return p;
}

std::vector<ToyContext> contexts(const ModelSource& m, const toy::TaskWorld& world, const AnalysisOpts& a,
                                 ExtractOptions ex = {}) {
  std::vector<ToyContext> out;
  for (auto s : parse_seeds(a.seeds)) out.push_back(prepare_context(m.model(), world, s, a.demos, a.fit(), ex));
  return out;
}

void write_report(const fs::path& dir, const std::string& stem, const EffectReport& rep) {
  write_json(dir / (stem + ".json"), to_json(rep));
  write_text(dir / (stem + ".csv"), to_csv(rep));
}

json fit_json(const ContextFit& f) {
  json j{{"context_id", f.context_id}, {"layers", f.layers}, {"rank", f.shared.rank},
         {"eigenvalues", vector_json(f.shared.eigenvalues)}, {"ridge", f.shared.ridge}};
  json pca = json::object();
  for (const auto& [l, k] : f.pca_dims) pca[std::to_string(l)] = k;
  j["pca_dims"] = pca;
  if (f.rank_selection) {
    const auto& r = *f.rank_selection;
    j["rank_selection"] = {{"r_hat", r.r_hat},
                           {"observed", vector_json(r.observed)},
                           {"thresholds", vector_json(r.thresholds)},
                           {"M", r.permutations},
                           {"alpha", r.alpha},
                           {"seed", r.seed}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Manifest loading for the analyze commands

struct LoadedRun {
  RunManifest manifest;
  std::vector<Matrix> hidden;  // indexed by layer id
};

LoadedRun load_run(const std::string& path) {
  LoadedRun r;
  const fs::path p(path);
  const fs::path file = fs::is_directory(p) ? p / "manifest.json" : p;
  r.manifest = read_manifest(file);
  validate_manifest(r.manifest, file.parent_path());
  const int max_layer = *std::max_element(r.manifest.layer_ids.begin(), r.manifest.layer_ids.end());
  r.hidden.resize(static_cast<std::size_t>(max_layer + 1));
  for (int l : r.manifest.layer_ids) r.hidden[std::size_t(l)] = load_hidden(r.manifest, file.parent_path(), l).data;
  for (std::size_t l = 0; l < r.hidden.size(); ++l)
    require(r.hidden[l].size() > 0, "manifest is missing hidden states for layer " + std::to_string(l));
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conceptual-subspace analysis of in-context inference"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  Common common;
  ModelSource src;
  AnalysisOpts an;

  // toy ----------------------------------------------------------------------
  auto* toy_cmd = app.add_subcommand("toy", "train the toy model / extract activations")->require_subcommand(1);
  toy::ModelConfig mcfg;
  toy::TrainConfig tcfg;
  toy::TaskConfig task_cfg;
  auto* train = toy_cmd->add_subcommand("train", "train a toy model; writes model.actb and metrics.json");
  add_common(train, common);
  train->add_option("--seed", tcfg.seed, "training seed")->capture_default_str();
  train->add_option("--demos", tcfg.num_demos, "demonstrations per training prompt")->capture_default_str();
  train->add_option("--steps", tcfg.steps)->capture_default_str();
  train->add_option("--batch", tcfg.batch)->capture_default_str();
  train->add_option("--lr", tcfg.lr)->capture_default_str();
  train->add_option("--warmup", tcfg.warmup)->capture_default_str();
  train->add_option("--eval-contexts", tcfg.eval_contexts)->capture_default_str();
  train->add_option("--log-every", tcfg.log_every, "progress interval on stderr (0 = quiet)");
  train->add_option("--vocab", mcfg.vocab)->capture_default_str();
  train->add_option("--dim", mcfg.dim)->capture_default_str();
  train->add_option("--layers", mcfg.layers)->capture_default_str();
  train->add_option("--heads", mcfg.heads)->capture_default_str();
  train->add_option("--context-len", mcfg.context_len)->capture_default_str();
  train->add_option("--concepts", task_cfg.num_concepts)->capture_default_str();
  train->add_option("--task-seed", task_cfg.seed, "seed of the synthetic concept world")->capture_default_str();

  auto* extract_cmd = toy_cmd->add_subcommand("extract", "extract last-token activations into a run manifest");
  std::string run_name = "r1";
  std::uint64_t run_seed = 100;
  int extract_demos = 8;
  bool with_attention = false;
  add_common(extract_cmd, common);
  add_model(extract_cmd, src);
  extract_cmd->add_option("--run", run_name, "run id (subdirectory of --out)")->capture_default_str();
  extract_cmd->add_option("--seed", run_seed, "context seed")->capture_default_str();
  extract_cmd->add_option("--demos", extract_demos)->capture_default_str();
  extract_cmd->add_flag("--attention", with_attention, "also write attention rows");

  // analyze ------------------------------------------------------------------
  auto* analyze = app.add_subcommand("analyze", "layer and context similarity analyses")->require_subcommand(1);
  std::string manifest_path;
  std::string manifest_list;
  int grid_layer = -1;
  double alpha = kDefaultRankAlpha;
  int perms = kDefaultPermutations;
  std::string layers_str, rank_str = "auto";
  double pca = 0.95;
  int r_max = 8;
  std::uint64_t a_seed = 0;
  double variance = kDefaultVarianceFraction;

  auto* svd_cmd = analyze->add_subcommand("svd", "95%-variance bases and their layer-by-layer overlap");
  add_common(svd_cmd, common);
  svd_cmd->add_option("--manifest", manifest_path)->required();
  svd_cmd->add_option("--variance", variance)->capture_default_str();

  auto add_fit_opts = [&](CLI::App* c) {
    c->add_option("--layers", layers_str, "comma-separated layers (default: upper half)");
    c->add_option("--rank", rank_str, "GCCA rank or 'auto'")->capture_default_str();
    c->add_option("--perms", perms, "permutations M for --rank auto")->capture_default_str();
    c->add_option("--alpha", alpha)->capture_default_str();
    c->add_option("--pca", pca, "variance kept by per-layer PCA before GCCA (0 = off)")->capture_default_str();
    c->add_option("--r-max", r_max)->capture_default_str();
    c->add_option("--seed", a_seed)->capture_default_str();
  };
  auto* gcca_cmd = analyze->add_subcommand("gcca", "shared subspace across layers, with rank selection");
  add_common(gcca_cmd, common);
  gcca_cmd->add_option("--manifest", manifest_path)->required();
  add_fit_opts(gcca_cmd);
  auto* rsa_cmd = analyze->add_subcommand("rsa", "RSA between contexts in the shared coordinates");
  auto* ovl_cmd = analyze->add_subcommand("overlap", "subspace overlap between contexts");
  for (auto* c : {rsa_cmd, ovl_cmd}) {
    add_common(c, common);
    c->add_option("--manifests", manifest_list, "comma-separated manifests")->required();
    c->add_option("--layer", grid_layer, "layer to compare (default: first subspace layer)");
    add_fit_opts(c);
  }
  auto fit_from_flags = [&]() {
    FitOptions f;
    if (!layers_str.empty()) f.layers = parse_ints(layers_str, "layer");
    if (rank_str != "auto") {
      const auto r = parse_ints(rank_str, "rank");
      require(r.size() == 1 && r[0] >= 1, "rank must be 'auto' or a positive integer");
      f.rank = r[0];
    }
    require(perms >= 100, "perms must be at least 100");
    require(alpha > 0 && alpha < 1, "alpha must lie in (0, 1)");
    require(pca >= 0 && pca <= 1, "pca must lie in [0, 1]");
    f.permutations = perms;
    f.alpha = alpha;
    f.pca_variance = pca;
    f.r_max = r_max;
    f.seed = a_seed;
    return f;
  };

  // intervene ----------------------------------------------------------------
  auto* intervene = app.add_subcommand("intervene", "subspace interventions on the toy model")->require_subcommand(1);
  std::string conditions = "description,label,query";
  double fit_frac = 0.5;
  int max_pairs = 40;
  auto* patch_cmd = intervene->add_subcommand("patch", "NormCIE of subspace patching per layer and condition");
  auto* ablate_cmd = intervene->add_subcommand("ablate", "log-prob change from removing the subspace component");
  auto* isolate_cmd = intervene->add_subcommand("isolate", "log-prob change from keeping only the subspace component");
  auto* transfer_cmd = intervene->add_subcommand("transfer", "cross-context CMA through a Procrustes map");
  for (auto* c : {patch_cmd, ablate_cmd, isolate_cmd, transfer_cmd}) {
    add_common(c, common);
    add_model(c, src);
    add_analysis(c, an);
  }
  patch_cmd->add_option("--conditions", conditions)->capture_default_str();
  transfer_cmd->add_option("--fit-frac", fit_frac, "fraction of query concepts used to fit Q")->capture_default_str();
  transfer_cmd->add_option("--pairs", max_pairs, "held-out concept pairs per layer (0 = all)")->capture_default_str();

  // heads --------------------------------------------------------------------
  auto* heads = app.add_subcommand("heads", "attention-head analyses on the toy model")->require_subcommand(1);
  int head_perms = kDefaultHeadPermutations;
  double head_alpha = 0.05;
  auto* hcie = heads->add_subcommand("cie", "per-head patching CIE with sign-flip FWER control");
  auto* hattn = heads->add_subcommand("attn", "last-token attention mass by prompt span");
  auto* hmet = heads->add_subcommand("metrics", "head contribution and alignment to the subspace");
  for (auto* c : {hcie, hattn, hmet}) {
    add_common(c, common);
    add_model(c, src);
    add_analysis(c, an);
  }
  hcie->add_option("--conditions", conditions)->capture_default_str();
  hcie->add_option("--perms", head_perms, "sign-flip permutations")->capture_default_str();
  hcie->add_option("--alpha", head_alpha)->capture_default_str();

  try {
    auto args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    const fs::path out(common.out);
    auto prepare_out = [&] { fs::create_directories(out); };

    if (*train) {
      mcfg.seed = tcfg.seed;
      mcfg.validate();
      require(tcfg.steps >= 0, "steps must be non-negative");
      const toy::TaskWorld world(task_cfg);
      const json config{{"model", toy::to_json(mcfg)}, {"train", toy::to_json(tcfg)}, {"task", toy::to_json(task_cfg)}};
      prepare_out();
      auto [model, rep] = toy::train(mcfg, world, tcfg);
      toy::save_checkpoint(out / "model.actb", model, {{"task_config", toy::to_json(task_cfg)},
                                                      {"train_config", toy::to_json(tcfg)}});
      json metrics = toy::to_json(rep);
      metrics["provenance"] = base_provenance("toy train", config, common);
      write_json(out / "metrics.json", metrics);
      std::cout << "held-out exact match (N=" << tcfg.num_demos << "): " << rep.heldout_accuracy << "\n";
    } else if (*extract_cmd) {
      src.load();
      const toy::TaskWorld world(src.task);
      require(!run_name.empty() && run_name.find('/') == std::string::npos, "run id must be a plain name");
      auto run = toy::generate_task(world, run_seed, extract_demos);
      run.run_id = run_name;
      const auto ex = extract(src.model(), run, {.heads = true, .attention = with_attention});
      const json config{{"checkpoint", fs::path(src.checkpoint).filename().string()},
                        {"run", run_name},
                        {"seed", run_seed},
                        {"demos", extract_demos},
                        {"attention", with_attention}};
      prepare_out();
      const auto m = write_run(out / run_name, "toy:" + fs::path(src.checkpoint).filename().string(), run, ex,
                               {{"provenance", base_provenance("toy extract", config, common)},
                                {"task_config", toy::to_json(src.task)}});
      std::cout << "wrote " << (out / run_name / "manifest.json").string() << " (" << m.n() << " prompts, "
                << m.layer_ids.size() << " layers)\n";
    } else if (*svd_cmd) {
      const auto run = load_run(manifest_path);
      // A layer that is constant across concepts (the embedding of the final
      // delimiter, typically) has no PCs; leave it out of the grid.
      std::vector<Matrix> kept;
      std::vector<int> kept_ids, skipped;
      for (std::size_t l = 0; l < run.hidden.size(); ++l) {
        if (center_columns(run.hidden[l]).data.squaredNorm() == 0.0) {
          skipped.push_back(int(l));
          std::cerr << "layer " << int(l) << " has zero variance; skipped\n";
          continue;
        }
        kept.push_back(run.hidden[l]);
        kept_ids.push_back(int(l));
      }
      require(kept.size() >= 1, "no layer has non-zero variance");
      std::vector<PCBasis> pcs;
      const Matrix g = svd_overlap_grid(kept, &pcs, variance);
      std::vector<std::string> labels;
      for (std::size_t i = 0; i < kept.size(); ++i) {
        pcs[i].layer = kept_ids[i];
        labels.push_back(std::to_string(kept_ids[i]));
      }
      prepare_out();
      write_text(out / "svd_overlap.csv", grid_csv(g, "layer_a", "layer_b", "overlap", labels));
      std::string pcs_csv = "layer,k,explained_fraction\n";
      json jpcs = json::array();
      for (const auto& p : pcs) {
        pcs_csv += std::to_string(p.layer) + "," + std::to_string(p.k) + "," + format_number(p.explained_fraction) + "\n";
        jpcs.push_back({{"layer", p.layer}, {"k", p.k}, {"explained_fraction", p.explained_fraction}});
      }
      write_text(out / "pc_counts.csv", pcs_csv);
      write_json(out / "svd.json", {{"overlap", matrix_json(g)},
                                    {"pc_counts", jpcs},
                                    {"skipped_layers", skipped},
                                    {"provenance", base_provenance("analyze svd",
                                                                   {{"manifest", run.manifest.run_id}, {"variance", variance}},
                                                                   common)}});
    } else if (*gcca_cmd) {
      const auto run = load_run(manifest_path);
      const auto fo = fit_from_flags();
      const auto fit = fit_context(run.hidden, run.manifest.concept_ids, run.manifest.run_id, fo);
      prepare_out();
      json j = fit_json(fit);
      j["provenance"] = base_provenance("analyze gcca", {{"manifest", run.manifest.run_id}, {"fit", to_json(fo)}}, common);
      write_json(out / "gcca.json", j);
      for (const auto& [l, w] : fit.w) {
        auto t = tensor_from_matrix(w);
        t.axes = {"feature", "component"};
        t.metadata = {{"layer", l}, {"kind", "gcca_w"}, {"run_id", run.manifest.run_id}};
        write_tensor(out / ("w_" + std::to_string(l) + ".actb"), t);
      }
      if (fit.rank_selection) {
        std::string csv = "component,observed,threshold,selected\n";
        const auto& r = *fit.rank_selection;
        for (Index i = 0; i < r.observed.size(); ++i)
          csv += std::to_string(i + 1) + "," + format_number(r.observed(i)) + "," + format_number(r.thresholds(i)) +
                 "," + (r.observed(i) > r.thresholds(i) ? "1" : "0") + "\n";
        write_text(out / "rank_selection.csv", csv);
      }
      std::cout << "rank " << fit.shared.rank << "\n";
    } else if (*rsa_cmd || *ovl_cmd) {
      const auto paths = split(manifest_list);
      require(paths.size() >= 2, "need at least two manifests");
      const auto fo = fit_from_flags();
      std::vector<LoadedRun> runs;
      std::vector<ContextFit> fits;
      std::vector<std::string> labels;
      for (const auto& p : paths) {
        runs.push_back(load_run(p));
        require(runs.back().manifest.concept_ids == runs.front().manifest.concept_ids,
                "manifests must list the same concepts in the same order");
        auto f = fo;
        f.seed = derive_seed(fo.seed, runs.back().manifest.seed);
        fits.push_back(fit_context(runs.back().hidden, runs.back().manifest.concept_ids, runs.back().manifest.run_id, f));
        labels.push_back(runs.back().manifest.run_id);
      }
      const int layer = grid_layer >= 0 ? grid_layer : fits.front().layers.front();
      std::vector<const ContextFit*> ptrs;
      for (const auto& f : fits) ptrs.push_back(&f);
      const bool is_rsa = bool(*rsa_cmd);
      const Matrix g = is_rsa ? rsa_grid(ptrs, layer) : overlap_grid(ptrs, layer);
      const std::string stem = is_rsa ? "rsa" : "overlap";
      prepare_out();
      write_text(out / (stem + "_grid.csv"), grid_csv(g, "context_a", "context_b", stem, labels));
      json fj = json::array();
      for (const auto& f : fits) fj.push_back(fit_json(f));
      write_json(out / (stem + ".json"),
                 {{"layer", layer},
                  {"contexts", labels},
                  {"grid", matrix_json(g)},
                  {"fits", fj},
                  {"provenance", base_provenance("analyze " + stem,
                                                 {{"manifests", labels}, {"layer", layer}, {"fit", to_json(fo)}}, common)}});
    } else if (*patch_cmd || *ablate_cmd || *isolate_cmd) {
      src.load();
      const toy::TaskWorld world(src.task);
      const auto conds = *patch_cmd ? parse_conditions(conditions) : std::vector<toy::Corruption>{};
      const auto ctxs = contexts(src, world, an);
      const std::string cmd = *patch_cmd ? "patch" : *ablate_cmd ? "ablate" : "isolate";
      json config = an.to_json();
      config["checkpoint"] = fs::path(src.checkpoint).filename().string();
      if (*patch_cmd) config["conditions"] = conditions;
      std::vector<std::vector<ScanCell>> per_run;
      std::vector<std::uint64_t> seeds;
      for (const auto& c : ctxs) {
        seeds.push_back(c.run.seed);
        if (*patch_cmd)
          per_run.push_back(patch_scan(src.model(), world, c, conds, {}, an.seed));
        else
          per_run.push_back(edit_scan(src.model(), c, *ablate_cmd ? EditKind::Ablate : EditKind::Isolate, {}, an.seed));
      }
      prepare_out();
      const std::string metric = *patch_cmd ? "norm_cie" : "delta_logprob";
      auto rep = aggregate_cells(metric, per_run, seeds, an.demos, an.seed);
      rep.provenance = base_provenance("intervene " + cmd, config, common);
      json fj = json::array();
      for (const auto& c : ctxs) fj.push_back(fit_json(c.fit));
      rep.provenance["fits"] = fj;
      write_report(out, cmd, rep);
      if (*patch_cmd) {
        // One tidy curve file per condition for plotting.
        for (auto cond : conds) {
          EffectReport sub{rep.metric, {}, rep.provenance};
          for (const auto& e : rep.entries)
            if (e.condition == toy::to_string(cond)) sub.entries.push_back(e);
          write_text(out / ("patch_" + toy::to_string(cond) + ".csv"), to_csv(sub));
        }
      }
    } else if (*transfer_cmd) {
      src.load();
      const toy::TaskWorld world(src.task);
      const auto ctxs = contexts(src, world, an);
      require(ctxs.size() >= 2, "transfer needs at least two context seeds");
      json config = an.to_json();
      config["checkpoint"] = fs::path(src.checkpoint).filename().string();
      config["fit_frac"] = fit_frac;
      config["pairs"] = max_pairs;
      std::vector<std::vector<ScanCell>> per_run;
      std::vector<std::uint64_t> seeds;
      json maps = json::array();
      for (std::size_t i = 0; i < ctxs.size(); ++i) {
        const auto& s = ctxs[i];
        const auto& t = ctxs[(i + 1) % ctxs.size()];
        auto res = transfer_scan(src.model(), s, t, {}, fit_frac, derive_seed(an.seed, i), max_pairs);
        per_run.push_back(std::move(res.cells));
        seeds.push_back(s.run.seed);
        json resid = json::object();
        for (const auto& [l, v] : res.procrustes_residual) resid[std::to_string(l)] = v;
        maps.push_back({{"source", s.run.run_id},
                        {"target", t.run.run_id},
                        {"fit_concepts", res.fit_concepts},
                        {"held_out", res.held_out},
                        {"procrustes_residual", resid}});
      }
      prepare_out();
      auto rep = aggregate_cells("cma", per_run, seeds, an.demos, an.seed);
      rep.provenance = base_provenance("intervene transfer", config, common);
      rep.provenance["maps"] = maps;
      write_report(out, "transfer", rep);
    } else if (*hcie) {
      src.load();
      const toy::TaskWorld world(src.task);
      const auto conds = parse_conditions(conditions);
      json config = an.to_json();
      config["checkpoint"] = fs::path(src.checkpoint).filename().string();
      config["conditions"] = conditions;
      config["perms"] = head_perms;
      config["alpha"] = head_alpha;
      require(head_perms >= 1000, "perms must be at least 1000");
      const auto seeds = parse_seeds(an.seeds);
      prepare_out();
      json all = json::array();
      std::string csv;
      for (auto cond : conds) {
        std::vector<Matrix> samples;
        for (auto s : seeds) {
          const auto run = toy::generate_task(world, s, an.demos);
          auto one = head_cie_samples(src.model(), world, run, cond, an.seed);
          samples.insert(samples.end(), one.begin(), one.end());
        }
        const auto hm = fwer_sign_flip(samples, head_perms, head_alpha, derive_seed(an.seed, std::uint64_t(cond)),
                                       toy::to_string(cond));
        all.push_back(to_json(hm));
        const auto part = to_csv(hm);
        csv += csv.empty() ? part : part.substr(part.find('\n') + 1);
      }
      write_json(out / "heads_cie.json", {{"conditions", all},
                                          {"provenance", base_provenance("heads cie", config, common)}});
      write_text(out / "heads_cie.csv", csv);
    } else if (*hattn) {
      src.load();
      const toy::TaskWorld world(src.task);
      json config = an.to_json();
      config["checkpoint"] = fs::path(src.checkpoint).filename().string();
      std::vector<toy::Prompt> prompts;
      for (auto s : parse_seeds(an.seeds)) {
        auto run = toy::generate_task(world, s, an.demos);
        prompts.insert(prompts.end(), run.prompts.begin(), run.prompts.end());
      }
      const auto rows = attention_mass_all_heads(src.model(), prompts);
      prepare_out();
      json j = json::array();
      for (const auto& r : rows) j.push_back(to_json(r));
      write_json(out / "heads_attn.json", {{"heads", j}, {"provenance", base_provenance("heads attn", config, common)}});
      write_text(out / "heads_attn.csv", to_csv(rows));
    } else if (*hmet) {
      src.load();
      const toy::TaskWorld world(src.task);
      json config = an.to_json();
      config["checkpoint"] = fs::path(src.checkpoint).filename().string();
      const auto ctxs = contexts(src, world, an);
      prepare_out();
      std::string csv;
      json j = json::array();
      for (const auto& c : ctxs) {
        const auto rows = head_metrics(c);
        std::string part = to_csv(rows);
        // prefix a seed column
        std::stringstream in(part);
        std::string line;
        bool header = true;
        while (std::getline(in, line)) {
          if (header) {
            if (csv.empty()) csv += "seed," + line + "\n";
            header = false;
          } else {
            csv += std::to_string(c.run.seed) + "," + line + "\n";
          }
        }
        for (const auto& r : rows) {
          auto e = to_json(r);
          e["seed"] = c.run.seed;
          j.push_back(e);
        }
      }
      write_json(out / "heads_metrics.json", {{"heads", j}, {"provenance", base_provenance("heads metrics", config, common)}});
      write_text(out / "heads_metrics.csv", csv);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ComputeError& e) {
    std::cerr << "compute error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "compute error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
