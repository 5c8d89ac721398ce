// knobs: pipeline driver and HTTP service.
//
// Every subcommand reads an optional flat TOML file (--config) whose keys are
// the long option names (underscores or hyphens); flags given on the command
// line win. Artifacts go to --out together with run_manifest.json.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "knobs/concept_map.hpp"
#include "knobs/dataset.hpp"
#include "knobs/eval.hpp"
#include "knobs/model_io.hpp"
#include "knobs/service.hpp"
#include "knobs/service_http.hpp"
#include "knobs/steering.hpp"
#include "knobs/synthetic.hpp"

namespace fs = std::filesystem;
using namespace knobs;

namespace {

enum Exit : int {
  kOk = 0,
  kOther = 1,
  kUsage = 2,
  kMissingInput = 3,
  kIncompatible = 4,
  kBadData = 5,
  kTraining = 6,
};

int exit_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::missing_input: return kMissingInput;
    case ErrorCode::incompatible_dims: return kIncompatible;
    case ErrorCode::training: return kTraining;
    case ErrorCode::parse:
    case ErrorCode::format:
    case ErrorCode::config:
    case ErrorCode::empty_corpus:
    case ErrorCode::empty_tags: return kBadData;
    default: return kOther;
  }
}

int fail(std::string_view code, const std::string& message, int status) {
  const Json j = {{"error", {{"code", code}, {"message", message}, {"exit_status", status}}}};
  std::cerr << j.dump() << '\n';
  return status;
}

// ---------------------------------------------------------------------------
// Config replay and manifests
// ---------------------------------------------------------------------------

std::optional<std::string> find_config_path(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return std::nullopt;
}

// Flat TOML keys turned into --key=value arguments.
std::vector<std::string> config_args(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::missing_input, "config file " + path.string() + " not found");
  std::ifstream in(path);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(in);
  } catch (const CLI::Error& e) {
    throw Error(ErrorCode::parse, "config file " + path.string() + ": " + e.what());
  }
  std::vector<std::string> out;
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    if (!item.parents.empty())
      throw Error(ErrorCode::config, "config file " + path.string() + ": sections are not supported");
    std::string key = item.name;
    std::replace(key.begin(), key.end(), '_', '-');
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) value += (i ? "," : "") + item.inputs[i];
    out.push_back("--" + key + "=" + value);
  }
  return out;
}

// Numbers and booleans keep their type in the manifest; all else is a string.
Json typed_value(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  long long i = 0;
  auto [pi, ei] = std::from_chars(s.data(), s.data() + s.size(), i);
  if (ei == std::errc() && pi == s.data() + s.size() && !s.empty()) return i;
  double d = 0.0;
  auto [pd, ed] = std::from_chars(s.data(), s.data() + s.size(), d);
  if (ed == std::errc() && pd == s.data() + s.size() && !s.empty()) return round_sig9(d);
  return s;
}

Json collect_config(const CLI::App& sub) {
  Json config = Json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name == "out") continue;
    std::replace(name.begin(), name.end(), '-', '_');
    std::string value = opt->count() > 0 ? opt->results().back() : opt->get_default_str();
    config[name] = typed_value(value);
  }
  return config;
}

struct Manifest {
  Json config = Json::object();
  Json inputs = Json::object();
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
};

void write_manifest(const fs::path& out, const std::string& subcommand, const Manifest& m) {
  Json outputs = Json::object();
  for (const auto& name : m.outputs) outputs[name] = file_hash(out / name);
  const Json j = {{"subcommand", subcommand},
                  {"version", KNOBS_VERSION},
                  {"seed", m.seed},
                  {"config", m.config},
                  {"config_hash", fnv1a_hex(m.config.dump())},
                  {"inputs", m.inputs},
                  {"outputs", outputs}};
  write_json(out / "run_manifest.json", j);
}

fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw Error(ErrorCode::config, "--out is required");
  fs::create_directories(out);
  return out;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw Error(ErrorCode::config, std::string("--") + what + " is required");
  if (!fs::exists(path)) throw Error(ErrorCode::missing_input, std::string(what) + " " + path + " not found");
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto b = part.find_first_not_of(" \t[]\"'");
    const auto e = part.find_last_not_of(" \t[]\"'");
    if (b == std::string::npos) continue;
    part = part.substr(b, e - b + 1);
    if constexpr (std::is_same_v<T, std::string>) {
      out.push_back(part);
    } else {
      T v{};
      auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
      if (ec != std::errc() || p != part.data() + part.size())
        throw Error(ErrorCode::config, std::string("bad value '") + part + "' in --" + what);
      out.push_back(v);
    }
  }
  if (out.empty()) throw Error(ErrorCode::config, std::string("--") + what + " is empty");
  return out;
}

HoldoutSet test_holdout(const Dataset& d, double frac, std::uint64_t seed) {
  if (d.split.test.empty()) throw Error(ErrorCode::config, "dataset has no test users");
  return split_holdout_per_user(d.x, d.split.test, frac, seed);
}

void check_catalog(const Dataset& d, const Cfae& cfae) {
  if (cfae_items(cfae) != d.x.num_items())
    throw Error(ErrorCode::incompatible_dims, "model covers " + std::to_string(cfae_items(cfae)) +
                                                  " items but the dataset has " +
                                                  std::to_string(d.x.num_items()));
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct Common {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
};

void add_common(CLI::App* sub, Common& c, bool out_required = true) {
  sub->add_option("--config", c.config, "flat TOML file with option defaults");
  auto* out = sub->add_option("--out", c.out, "output directory");
  if (!out_required) out->description("output directory for the run manifest (optional)");
  sub->add_option("--seed", c.seed, "random seed");
}

struct IngestArgs {
  Common c;
  std::string interactions, tags, catalog, format = "explicit";
  double threshold = 4.0;
  std::size_t min_item = 0, min_user = 5;
  double tag_min_count = 1.0;
  double test_frac = 0.1, val_frac = 0.1;
};

void run_ingest(const CLI::App& sub, const IngestArgs& a) {
  require_file(a.interactions, "interactions");
  require_file(a.tags, "tags");
  if (!a.catalog.empty()) require_file(a.catalog, "catalog");
  RecordFormat format;
  if (a.format == "explicit") format = RecordFormat::explicit_ratings;
  else if (a.format == "implicit") format = RecordFormat::implicit;
  else throw Error(ErrorCode::config, "format must be explicit or implicit");
  const auto records = load_interactions(a.interactions, format);
  Dataset d;
  d.x = filter_min_activity(binarize_threshold(records, format == RecordFormat::implicit ? 0.0 : a.threshold),
                            a.min_item, a.min_user);
  d.tags = load_tags(a.tags, d.x, a.tag_min_count);
  d.titles = load_catalog(a.catalog, d.x);
  d.split = split_strong_generalization(d.x, a.test_frac, a.val_frac, a.c.seed);
  const auto out = prepare_out(a.c.out);
  write_dataset(out, d);
  Manifest m{collect_config(sub), {{"interactions", file_hash(a.interactions)}, {"tags", file_hash(a.tags)}},
             {kDatasetFiles, kDatasetFiles + 4}, a.c.seed};
  if (!a.catalog.empty()) m.inputs["catalog"] = file_hash(a.catalog);
  write_manifest(out, "ingest", m);
}

struct SynthArgs {
  Common c;
  SyntheticSpec spec;
  double test_frac = 0.1, val_frac = 0.1;
};

void run_synth(const CLI::App& sub, SynthArgs a) {
  a.spec.seed = a.c.seed;
  const auto corpus = generate_synthetic(a.spec);
  Dataset d{corpus.x, corpus.tags, corpus.titles, {}, std::nullopt};
  d.split = split_strong_generalization(d.x, a.test_frac, a.val_frac, a.c.seed);
  const auto out = prepare_out(a.c.out);
  write_dataset(out, d, truth_to_json(corpus));
  Manifest m{collect_config(sub), Json::object(), {kDatasetFiles, kDatasetFiles + 4}, a.c.seed};
  m.outputs.push_back("truth.json");
  write_manifest(out, "synth", m);
}

struct TrainCfaeArgs {
  Common c;
  std::string data, model = "elsa", elsa_loss = "normalized", pooling = "mean";
  std::size_t dim = 64;
  std::optional<std::size_t> batch_size, epochs;
  std::optional<double> lr;
  std::size_t patience = 10;
  double beta1 = 0.9, beta2 = 0.99;
  std::optional<double> beta_step;
  double beta_cap = 0.2, dropout = 0.5;
};

void run_train_cfae(const CLI::App& sub, const TrainCfaeArgs& a) {
  if (a.data.empty()) throw Error(ErrorCode::config, "--data is required");
  const Dataset d = load_dataset(a.data);
  Manifest m{collect_config(sub), {{"data", dataset_hash(a.data)}}, {"cfae.knob", "cfae.json"}, a.c.seed};
  if (a.dim < 1) throw Error(ErrorCode::config, "dim must be >= 1");
  Cfae cfae;
  if (a.model == "elsa") {
    TrainConfig cfg;
    cfg.batch_size = a.batch_size.value_or(cfg.batch_size);
    cfg.max_epochs = a.epochs.value_or(cfg.max_epochs);
    cfg.patience = a.patience;
    cfg.adam = {a.lr.value_or(cfg.adam.alpha), a.beta1, a.beta2, cfg.adam.epsilon};
    cfg.loss = parse_elsa_loss(a.elsa_loss);
    cfg.pooling = parse_elsa_pooling(a.pooling);
    cfg.seed = a.c.seed;
    cfg.validate();
    if (d.split.val.empty()) throw Error(ErrorCode::config, "ELSA early stopping needs validation users");
    cfae = elsa_train(d.x, d.split, a.dim, cfg);
    m.config["batch_size"] = cfg.batch_size;
    m.config["epochs"] = cfg.max_epochs;
    m.config["lr"] = round_sig9(cfg.adam.alpha);
  } else if (a.model == "multvae") {
    MultVaeConfig cfg;
    cfg.batch_size = a.batch_size.value_or(cfg.batch_size);
    cfg.epochs = a.epochs.value_or(cfg.epochs);
    cfg.adam = {a.lr.value_or(cfg.adam.alpha), a.beta1, a.beta2, cfg.adam.epsilon};
    cfg.beta_step = a.beta_step.value_or(cfg.beta_step);
    cfg.beta_cap = a.beta_cap;
    cfg.keep_prob = 1.0 - a.dropout;
    cfg.seed = a.c.seed;
    if (!(a.dropout >= 0.0 && a.dropout < 1.0)) throw Error(ErrorCode::config, "dropout must lie in [0, 1)");
    cfae = multvae_train(d.x, d.split, a.dim, cfg);
    m.config["batch_size"] = cfg.batch_size;
    m.config["epochs"] = cfg.epochs;
    m.config["lr"] = round_sig9(cfg.adam.alpha);
    m.config["beta_step"] = round_sig9(cfg.beta_step);
  } else {
    throw Error(ErrorCode::config, "model must be elsa or multvae");
  }
  const auto out = prepare_out(a.c.out);
  save_cfae(out / "cfae.knob", cfae);
  write_manifest(out, "train-cfae", m);
}

struct SaeArgs {
  std::string variant = "topk", loss = "l2", preset = "default";
  std::size_t k = 32, width_ratio = 8;
  double lambda1 = 3e-4;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size, epochs, patience;
};

void add_sae_options(CLI::App* sub, SaeArgs& s, bool grid) {
  if (!grid) {
    sub->add_option("--variant", s.variant, "basic or topk");
    sub->add_option("--k", s.k, "active neurons for topk");
    sub->add_option("--width-ratio", s.width_ratio, "sparse width / input dim");
    sub->add_option("--loss", s.loss, "l2 or cosine");
    sub->add_option("--lambda1", s.lambda1, "L1 coefficient");
  }
  sub->add_option("--preset", s.preset, "default or fine_grained optimizer settings");
  sub->add_option("--lr", s.lr, "Adam step size (overrides the preset)");
  sub->add_option("--batch-size", s.batch_size, "minibatch size (overrides the preset)");
  sub->add_option("--epochs", s.epochs, "maximum epochs (overrides the preset)");
  sub->add_option("--patience", s.patience, "early stopping patience (overrides the preset)");
}

SaeTrainConfig sae_config(const SaeArgs& s, std::uint64_t seed, Json& config) {
  SaeTrainConfig cfg;
  if (s.preset == "fine_grained") cfg = SaeTrainConfig::fine_grained();
  else if (s.preset != "default") throw Error(ErrorCode::config, "preset must be default or fine_grained");
  cfg.variant = parse_variant(s.variant);
  cfg.loss = parse_loss_kind(s.loss);
  cfg.k = s.k;
  cfg.width_ratio = s.width_ratio;
  cfg.lambda1 = s.lambda1;
  cfg.adam.alpha = s.lr.value_or(cfg.adam.alpha);
  cfg.batch_size = s.batch_size.value_or(cfg.batch_size);
  cfg.max_epochs = s.epochs.value_or(cfg.max_epochs);
  cfg.patience = s.patience.value_or(cfg.patience);
  cfg.seed = seed;
  config["lr"] = round_sig9(cfg.adam.alpha);
  config["batch_size"] = cfg.batch_size;
  config["epochs"] = cfg.max_epochs;
  config["patience"] = cfg.patience;
  return cfg;
}

struct TrainSaeArgs {
  Common c;
  std::string data, cfae;
  SaeArgs sae;
};

void run_train_sae(const CLI::App& sub, const TrainSaeArgs& a) {
  if (a.data.empty()) throw Error(ErrorCode::config, "--data is required");
  require_file(a.cfae, "cfae");
  const Dataset d = load_dataset(a.data);
  const Cfae cfae = load_cfae(a.cfae);
  check_catalog(d, cfae);
  Manifest m{collect_config(sub), {{"data", dataset_hash(a.data)}, {"cfae", file_hash(a.cfae)}},
             {"sae.knob", "sae.json"}, a.c.seed};
  const SaeTrainConfig cfg = sae_config(a.sae, a.c.seed, m.config);
  if (d.split.val.empty()) throw Error(ErrorCode::config, "SAE early stopping needs validation users");
  const RowMatrix train = user_embeddings(cfae, d.x.select_rows(d.split.train));
  const RowMatrix val = user_embeddings(cfae, d.x.select_rows(d.split.val));
  const SaeModel sae = sae_train(train, val, cfg);
  for (const auto& w : sae.meta.warnings) std::cerr << "warning: " << w << '\n';
  const auto out = prepare_out(a.c.out);
  save_sae(out / "sae.knob", sae, a.cfae);
  write_manifest(out, "train-sae", m);
}

struct EvalArgs {
  Common c;
  std::string data, cfae, sae;
  double holdout_frac = 0.2;
  std::size_t n = 20;
};

void run_eval(const CLI::App& sub, const EvalArgs& a) {
  if (a.data.empty()) throw Error(ErrorCode::config, "--data is required");
  require_file(a.cfae, "cfae");
  if (!a.sae.empty()) require_file(a.sae, "sae");
  if (a.n < 1) throw Error(ErrorCode::config, "n must be >= 1");
  const Dataset d = load_dataset(a.data);
  const Cfae cfae = load_cfae(a.cfae);
  check_catalog(d, cfae);
  std::optional<SaeModel> sae;
  if (!a.sae.empty()) {
    sae = load_sae(a.sae);
    check_compatible(cfae, *sae);
  }
  const HoldoutSet users = test_holdout(d, a.holdout_frac, a.c.seed);
  const MetricsReport report = evaluate(cfae, sae ? &*sae : nullptr, users, a.n);
  Json j = report_to_json(report);
  j["model"] = cfae_name(cfae);
  j["popularity"] = ranking_json(evaluate_popularity(d.x.select_rows(d.split.train), d.x.num_items(), users, a.n));
  j["holdout_users"] = users.users.size();
  j["holdout_skipped"] = users.skipped.size();
  const auto out = prepare_out(a.c.out);
  write_json(out / "report.json", j);
  Manifest m{collect_config(sub), {{"data", dataset_hash(a.data)}, {"cfae", file_hash(a.cfae)}},
             {"report.json"}, a.c.seed};
  if (sae) m.inputs["sae"] = file_hash(a.sae);
  write_manifest(out, "eval", m);
}

struct SweepArgs {
  Common c;
  std::string data, cfae;
  std::string variants = "topk,basic", k_grid = "8,16,32,64", lambda_grid = "0.0003,0.001,0.003,0.01";
  std::string width_ratios = "8", losses = "l2";
  double topk_lambda1 = 3e-4;
  double holdout_frac = 0.2;
  SaeArgs sae;
};

void run_sweep(const CLI::App& sub, const SweepArgs& a) {
  if (a.data.empty()) throw Error(ErrorCode::config, "--data is required");
  require_file(a.cfae, "cfae");
  const Dataset d = load_dataset(a.data);
  const Cfae cfae = load_cfae(a.cfae);
  check_catalog(d, cfae);
  Manifest m{collect_config(sub), {{"data", dataset_hash(a.data)}, {"cfae", file_hash(a.cfae)}},
             {"sweep.csv", "sweep_plot.json"}, a.c.seed};
  const SaeTrainConfig base = sae_config(a.sae, a.c.seed, m.config);
  std::vector<SweepCell> grid;
  for (const auto width : parse_list<std::size_t>(a.width_ratios, "width-ratios"))
    for (const auto& loss : parse_list<std::string>(a.losses, "losses"))
      for (const auto& variant : parse_list<std::string>(a.variants, "variants")) {
        const SaeVariant v = parse_variant(variant);
        const SaeLossKind l = parse_loss_kind(loss);
        if (v == SaeVariant::topk)
          for (const auto k : parse_list<std::size_t>(a.k_grid, "k-grid"))
            grid.push_back({v, width, k, a.topk_lambda1, l});
        else
          for (const auto lambda : parse_list<double>(a.lambda_grid, "lambda-grid"))
            grid.push_back({v, width, 0, lambda, l});
      }
  const HoldoutSet users = test_holdout(d, a.holdout_frac, a.c.seed);
  const auto results = sparsity_accuracy_sweep(cfae, d.x.select_rows(d.split.train),
                                               d.x.select_rows(d.split.val), users, grid, base);
  for (const auto& r : results)
    if (!r.ok) std::cerr << "warning: cell failed: " << r.error << '\n';
  const auto out = prepare_out(a.c.out);
  std::ostringstream csv;
  write_sparsity_csv(csv, results);
  write_text(out / "sweep.csv", csv.str());
  write_json(out / "sweep_plot.json", sparsity_plot_json(results));
  write_manifest(out, "sweep", m);
}

struct MapArgs {
  Common c;
  std::string data, cfae, sae;
  std::size_t top_tags = 5;
};

void run_map(const CLI::App& sub, const MapArgs& a) {
  if (a.data.empty()) throw Error(ErrorCode::config, "--data is required");
  require_file(a.cfae, "cfae");
  require_file(a.sae, "sae");
  const Dataset d = load_dataset(a.data);
  const Cfae cfae = load_cfae(a.cfae);
  const SaeModel sae = load_sae(a.sae);
  check_catalog(d, cfae);
  check_compatible(cfae, sae);
  const ConceptNeuronMap map = build_concept_map(cfae, sae, d.tags);
  if (map.activation.isZero(0.0)) std::cerr << "warning: tag-activation matrix is all zero\n";
  const auto out = prepare_out(a.c.out);
  write_json(out / "concept_map.json", labels_to_json(make_labels(map, a.top_tags)));
  std::ostringstream csv;
  write_selectivity_csv(csv, selectivity(map.tags_to_neurons, map.neurons_to_tags, map.tag_names));
  write_text(out / "selectivity.csv", csv.str());
  Json overlap = overlap_to_json(map.maps.overlap, map.tag_names);
  overlap["inactive_neurons"] = map.inactive_neurons();
  write_json(out / "overlap.json", overlap);
  Manifest m{collect_config(sub),
             {{"data", dataset_hash(a.data)}, {"cfae", file_hash(a.cfae)}, {"sae", file_hash(a.sae)}},
             {"concept_map.json", "selectivity.csv", "overlap.json"}, a.c.seed};
  if (d.truth) {
    write_json(out / "recovery.json", recovery_to_json(concept_recovery_score(map, *d.truth)));
    m.outputs.push_back("recovery.json");
  }
  write_manifest(out, "map", m);
}

struct SnapshotArgs {
  std::string data, cfae, sae, map;
};

void add_snapshot_options(CLI::App* sub, SnapshotArgs& s) {
  sub->add_option("--data", s.data, "dataset directory (titles and corpus stats)");
  sub->add_option("--cfae", s.cfae, "CFAE model file");
  sub->add_option("--sae", s.sae, "SAE model file");
  sub->add_option("--map", s.map, "concept_map.json");
}

EngineSnapshot open_snapshot(const SnapshotArgs& s, Json& inputs) {
  require_file(s.cfae, "cfae");
  require_file(s.sae, "sae");
  require_file(s.map, "map");
  EngineSnapshot snap = load_snapshot({s.cfae, s.sae, s.map, s.data});
  inputs = {{"cfae", file_hash(s.cfae)}, {"sae", file_hash(s.sae)}, {"map", file_hash(s.map)}};
  if (!s.data.empty()) inputs["data"] = dataset_hash(s.data);
  return snap;
}

struct SteerArgs {
  Common c;
  SnapshotArgs snap;
  std::string history, user, tag, mapping = "representative";
  std::optional<std::size_t> neuron;
  double alpha = 0.15;
  std::size_t n = 20;
  bool mask_seen = true, include_baseline = true;
};

void run_steer(const CLI::App& sub, const SteerArgs& a) {
  Json inputs;
  const EngineSnapshot s = open_snapshot(a.snap, inputs);
  std::vector<index_t> history;
  if (!a.history.empty())
    for (const auto i : parse_list<std::size_t>(a.history, "history")) history.push_back(static_cast<index_t>(i));
  if (!a.user.empty()) {
    if (a.snap.data.empty()) throw Error(ErrorCode::config, "--user needs --data");
    const Dataset d = load_dataset(a.snap.data);
    const auto u = d.x.users.find(a.user);
    if (!u) throw Error(ErrorCode::config, "unknown user '" + a.user + "'");
    history.insert(history.end(), d.x.rows[*u].begin(), d.x.rows[*u].end());
  }
  if (!a.tag.empty() && a.neuron) throw Error(ErrorCode::config, "give either --tag or --neuron, not both");
  Json req = {{"history", history},
              {"alpha", a.alpha},
              {"n", a.n},
              {"mask_seen", a.mask_seen},
              {"include_baseline", a.include_baseline},
              {"mapping", a.mapping},
              {"boosts", Json::array()}};
  if (!a.tag.empty()) req["boosts"].push_back({{"tag", a.tag}, {"weight", 1.0}});
  if (a.neuron) req["boosts"].push_back({{"neuron", *a.neuron}, {"weight", 1.0}});
  Json result;
  try {
    result = recommend_json(s, req);
  } catch (const detail::BadRequest& e) {
    throw Error(ErrorCode::config, e.message);
  }
  const auto out = prepare_out(a.c.out);
  write_json(out / "steer.json", result);
  write_manifest(out, "steer", {collect_config(sub), inputs, {"steer.json"}, a.c.seed});
}

struct SweepSteerArgs {
  Common c;
  SnapshotArgs snap;
  std::string alphas = "0,0.05,0.1,0.15,0.2,0.4,0.6,0.8", mappings = "representative,unique";
  double holdout_frac = 0.2;
};

void run_sweep_steer(const CLI::App& sub, const SweepSteerArgs& a) {
  if (a.snap.data.empty()) throw Error(ErrorCode::config, "--data is required");
  Json inputs;
  const EngineSnapshot s = open_snapshot(a.snap, inputs);
  const Dataset d = load_dataset(a.snap.data);
  const auto alphas = parse_list<double>(a.alphas, "alphas");
  std::vector<NeuronMapping> mappings;
  for (const auto& name : parse_list<std::string>(a.mappings, "mappings")) mappings.push_back(parse_mapping(name));
  const HoldoutSet users = test_holdout(d, a.holdout_frac, a.c.seed);
  const SweepTable table = steering_sweep(s.cfae, s.sae, s.labels, users, d.tags, alphas, mappings);
  const auto out = prepare_out(a.c.out);
  std::ostringstream csv;
  write_sweep_csv(csv, table);
  write_text(out / "steering_sweep.csv", csv.str());
  Manifest m{collect_config(sub), inputs, {"steering_sweep.csv"}, a.c.seed};
  m.config["users_skipped"] = table.users_skipped;
  write_manifest(out, "sweep-steer", m);
}

struct ServeArgs {
  Common c;
  SnapshotArgs snap;
  std::string host = "127.0.0.1";
  int port = 8080;
};

void run_serve(const CLI::App& sub, const ServeArgs& a) {
  Json inputs;
  const EngineSnapshot s = open_snapshot(a.snap, inputs);
  if (!a.c.out.empty()) {
    const auto out = prepare_out(a.c.out);
    write_manifest(out, "serve", {collect_config(sub), inputs, {}, a.c.seed});
  }
  std::cerr << "serving " << cfae_name(s.cfae) << " snapshot " << s.config_hash << " on " << a.host << ':'
            << a.port << '\n';
  serve(s, a.host, a.port);
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);

  CLI::App app{"Steerable recommendations through sparse autoencoder knobs"};
  app.set_version_flag("--version", KNOBS_VERSION);
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();

  IngestArgs ingest;
  auto* s_ingest = app.add_subcommand("ingest", "binarize, filter and split an interaction log");
  add_common(s_ingest, ingest.c);
  s_ingest->add_option("--interactions", ingest.interactions, "user_id<TAB>item_id<TAB>value file");
  s_ingest->add_option("--tags", ingest.tags, "item_id<TAB>tag file");
  s_ingest->add_option("--catalog", ingest.catalog, "item_id<TAB>title file");
  s_ingest->add_option("--format", ingest.format, "explicit or implicit");
  s_ingest->add_option("--threshold", ingest.threshold, "ratings >= threshold are positive");
  s_ingest->add_option("--min-item-interactions", ingest.min_item, "item activity filter");
  s_ingest->add_option("--min-user-interactions", ingest.min_user, "user activity filter");
  s_ingest->add_option("--tag-min-count", ingest.tag_min_count, "drop rarer tags");
  s_ingest->add_option("--test-frac", ingest.test_frac, "share of test users");
  s_ingest->add_option("--val-frac", ingest.val_frac, "share of validation users");

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "generate a planted-concept corpus");
  add_common(s_synth, synth.c);
  s_synth->add_option("--num-concepts", synth.spec.num_concepts, "concept blocks G");
  s_synth->add_option("--items-per-concept", synth.spec.items_per_concept, "items per block");
  s_synth->add_option("--num-users", synth.spec.num_users, "users");
  s_synth->add_option("--interactions-per-user", synth.spec.interactions_per_user, "mean history length");
  s_synth->add_option("--min-interactions-per-user", synth.spec.min_interactions_per_user,
                      "shortest history (defaults to the mean: fixed length)");
  s_synth->add_option("--concentration", synth.spec.concentration, "Dirichlet concentration");
  s_synth->add_option("--overlap", synth.spec.overlap, "share of items with a second concept");
  s_synth->add_option("--zipf", synth.spec.zipf, "popularity decay inside a block");
  s_synth->add_option("--test-frac", synth.test_frac, "share of test users");
  s_synth->add_option("--val-frac", synth.val_frac, "share of validation users");

  TrainCfaeArgs cfae;
  auto* s_cfae = app.add_subcommand("train-cfae", "train ELSA or MultVAE");
  add_common(s_cfae, cfae.c);
  s_cfae->add_option("--data", cfae.data, "dataset directory");
  s_cfae->add_option("--model", cfae.model, "elsa or multvae");
  s_cfae->add_option("--dim", cfae.dim, "embedding dimension (r or d)");
  s_cfae->add_option("--batch-size", cfae.batch_size, "minibatch size [1024]");
  s_cfae->add_option("--epochs", cfae.epochs, "maximum epochs [25]");
  s_cfae->add_option("--lr", cfae.lr, "Adam step size [elsa 3e-4, multvae 1e-3]");
  s_cfae->add_option("--beta1", cfae.beta1, "Adam beta1");
  s_cfae->add_option("--beta2", cfae.beta2, "Adam beta2");
  s_cfae->add_option("--patience", cfae.patience, "ELSA early stopping patience");
  s_cfae->add_option("--elsa-loss", cfae.elsa_loss, "normalized or squared");
  s_cfae->add_option("--pooling", cfae.pooling, "ELSA user embedding: mean or sum of item rows");
  s_cfae->add_option("--beta-step", cfae.beta_step, "MultVAE KL annealing step [1e-6]");
  s_cfae->add_option("--beta-cap", cfae.beta_cap, "MultVAE KL weight ceiling");
  s_cfae->add_option("--dropout", cfae.dropout, "MultVAE input dropout");

  TrainSaeArgs tsae;
  auto* s_sae = app.add_subcommand("train-sae", "train a sparse autoencoder on CFAE user embeddings");
  add_common(s_sae, tsae.c);
  s_sae->add_option("--data", tsae.data, "dataset directory");
  s_sae->add_option("--cfae", tsae.cfae, "CFAE model file");
  add_sae_options(s_sae, tsae.sae, false);

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "ranking and reconstruction metrics on test users");
  add_common(s_eval, ev.c);
  s_eval->add_option("--data", ev.data, "dataset directory");
  s_eval->add_option("--cfae", ev.cfae, "CFAE model file");
  s_eval->add_option("--sae", ev.sae, "SAE model file (optional)");
  s_eval->add_option("--holdout-frac", ev.holdout_frac, "share of each history held out");
  s_eval->add_option("--n", ev.n, "ranking depth");

  SweepArgs sw;
  auto* s_sweep = app.add_subcommand("sweep", "sparsity / accuracy sweep over SAE configurations");
  add_common(s_sweep, sw.c);
  s_sweep->add_option("--data", sw.data, "dataset directory");
  s_sweep->add_option("--cfae", sw.cfae, "CFAE model file");
  s_sweep->add_option("--variants", sw.variants, "comma list of basic, topk");
  s_sweep->add_option("--k-grid", sw.k_grid, "comma list of k for topk");
  s_sweep->add_option("--lambda-grid", sw.lambda_grid, "comma list of lambda1 for basic");
  s_sweep->add_option("--topk-lambda1", sw.topk_lambda1, "lambda1 used by topk cells");
  s_sweep->add_option("--width-ratios", sw.width_ratios, "comma list of width ratios");
  s_sweep->add_option("--losses", sw.losses, "comma list of l2, cosine");
  s_sweep->add_option("--holdout-frac", sw.holdout_frac, "share of each history held out");
  add_sae_options(s_sweep, sw.sae, true);

  MapArgs mp;
  auto* s_map = app.add_subcommand("map", "concept-neuron map, labels and selectivity");
  add_common(s_map, mp.c);
  s_map->add_option("--data", mp.data, "dataset directory");
  s_map->add_option("--cfae", mp.cfae, "CFAE model file");
  s_map->add_option("--sae", mp.sae, "SAE model file");
  s_map->add_option("--top-tags", mp.top_tags, "tags listed per neuron");

  SteerArgs st;
  auto* s_steer = app.add_subcommand("steer", "steered top-n for one history");
  add_common(s_steer, st.c);
  add_snapshot_options(s_steer, st.snap);
  s_steer->add_option("--history", st.history, "comma list of item indices");
  s_steer->add_option("--user", st.user, "external user id whose full history is used");
  s_steer->add_option("--tag", st.tag, "boost the neuron mapped to this tag");
  s_steer->add_option("--neuron", st.neuron, "boost this neuron");
  s_steer->add_option("--mapping", st.mapping, "representative or unique");
  s_steer->add_option("--alpha", st.alpha, "steering intensity in [0, 1]");
  s_steer->add_option("--n", st.n, "list length");
  s_steer->add_option("--mask-seen", st.mask_seen, "drop history items from the list");
  s_steer->add_option("--include-baseline", st.include_baseline, "also emit the unsteered list");

  SweepSteerArgs ss;
  auto* s_ss = app.add_subcommand("sweep-steer", "salient-segment steering sweep over alpha");
  add_common(s_ss, ss.c);
  add_snapshot_options(s_ss, ss.snap);
  s_ss->add_option("--alphas", ss.alphas, "comma list of alpha values");
  s_ss->add_option("--mappings", ss.mappings, "comma list of representative, unique");
  s_ss->add_option("--holdout-frac", ss.holdout_frac, "share of each history held out");

  ServeArgs sv;
  auto* s_serve = app.add_subcommand("serve", "HTTP API over one snapshot");
  add_common(s_serve, sv.c, false);
  add_snapshot_options(s_serve, sv.snap);
  s_serve->add_option("--host", sv.host, "bind address");
  s_serve->add_option("--port", sv.port, "bind port");

  const std::map<CLI::App*, std::function<void()>> runners = {
      {s_ingest, [&] { run_ingest(*s_ingest, ingest); }},
      {s_synth, [&] { run_synth(*s_synth, synth); }},
      {s_cfae, [&] { run_train_cfae(*s_cfae, cfae); }},
      {s_sae, [&] { run_train_sae(*s_sae, tsae); }},
      {s_eval, [&] { run_eval(*s_eval, ev); }},
      {s_sweep, [&] { run_sweep(*s_sweep, sw); }},
      {s_map, [&] { run_map(*s_map, mp); }},
      {s_steer, [&] { run_steer(*s_steer, st); }},
      {s_ss, [&] { run_sweep_steer(*s_ss, ss); }},
      {s_serve, [&] { run_serve(*s_serve, sv); }},
  };

  try {
    // Config values go right after the subcommand so later flags override them.
    if (const auto path = find_config_path(args); path && !args.empty()) {
      const auto replay = config_args(*path);
      args.insert(args.begin() + 1, replay.begin(), replay.end());
    }
    std::vector<std::string> full{argv[0]};
    full.insert(full.end(), args.begin(), args.end());
    std::vector<char*> ptrs;
    for (auto& s : full) ptrs.push_back(s.data());
    app.parse(static_cast<int>(ptrs.size()), ptrs.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e);
      return kOk;
    }
    return fail("usage_error", e.what(), kUsage);
  } catch (const Error& e) {
    return fail(to_string(e.code()), e.what(), exit_for(e.code()));
  }

  try {
    for (const auto& [sub, fn] : runners)
      if (sub->parsed()) fn();
  } catch (const Error& e) {
    return fail(to_string(e.code()), e.what(), exit_for(e.code()));
  } catch (const Json::exception& e) {
    return fail("format_error", e.what(), kBadData);
  } catch (const std::exception& e) {
    return fail("internal_error", e.what(), kOther);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
