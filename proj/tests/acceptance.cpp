// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Tolerances and gates are fixed here; measured values are printed alongside.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <type_traits>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "fixtures.hpp"
#include "knobs/concept_map.hpp"
#include "knobs/dataset.hpp"
#include "knobs/eval.hpp"
#include "knobs/model_io.hpp"
#include "knobs/service.hpp"
#include "knobs/steering.hpp"
#include "oracles.hpp"

using namespace knobs;
namespace fs = std::filesystem;

namespace {

constexpr double kFdTolerance = 1e-4;
constexpr double kFdStep = 1e-5;
constexpr double kGradientSeconds = 30.0;
constexpr std::size_t kEncodes = 10000;
constexpr double kRoundTrip = 1e-10;
constexpr std::size_t kMetricInstances = 1000;
constexpr double kRecoveredFloorPct = 90.0;
constexpr std::size_t kMaxInversions = 1;
constexpr double kFidelitySeconds = 600.0;
constexpr double kCosineSlack = 0.02;
constexpr double kRecoveryGate = 0.8;
constexpr std::size_t kDistinctNeurons = 12;
constexpr double kSteerAlpha = 0.2;
constexpr double kPrecisionFactor = 2.0;
constexpr double kRecallRetained = 0.7;
constexpr double kUsersImproved = 0.9;
constexpr double kEntropyTolerance = 1e-9;
constexpr double kAverageRowKl = 1e-6;

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += pass ? 0 : 1;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------

void gradient_suite() {
  Stopwatch clock;
  Rng rng(101);
  double elsa_worst = 0.0, vae_worst = 0.0;
  for (int trial = 0; trial < 4; ++trial) {
    const auto n = static_cast<Eigen::Index>(8 + rng.below(13));
    const auto r = static_cast<Eigen::Index>(2 + rng.below(11));
    RowMatrix a = test::random_matrix(rng, n, r);
    normalize_rows(a);
    const auto batch = indicator_batch(test::random_rows(rng, 6, static_cast<std::size_t>(n), 1, 5),
                                       static_cast<std::size_t>(n));
    for (auto loss : {ElsaLoss::squared, ElsaLoss::normalized}) {
      const RowMatrix g = elsa_grad(a, batch, loss);
      elsa_worst = std::max(elsa_worst, test::max_fd_error<RowMatrix>(
                                            a, g, [&] { return elsa_loss(a, batch, loss); }, kFdStep));
    }
  }
  for (double beta : {0.0, 0.2}) {
    // hidden width is 3d, so d = 4 keeps every dimension at 12 or below
    auto p = test::random_vae_params(rng, 12, 4);
    const auto rows = test::random_rows(rng, 5, 12, 1, 6);
    const auto input = normalized_input(rows, 12);
    const auto targets = indicator_batch(rows, 12);
    const RowMatrix noise = test::random_matrix(rng, 5, 4);
    MultVaeParams g = MultVaeParams::zeros_like(p);
    multvae_loss_grad(p, input, targets, noise, beta, &g);
    const std::function<double()> f = [&] {
      return multvae_loss_grad(p, input, targets, noise, beta, nullptr).total;
    };
    const auto check = [&](auto& param, const auto& grad) {
      using Param = std::decay_t<decltype(param)>;
      vae_worst = std::max(vae_worst, test::max_fd_error<Param>(param, grad, f, kFdStep));
    };
    check(p.enc_w1, g.enc_w1);
    check(p.enc_b1, g.enc_b1);
    check(p.mu_w, g.mu_w);
    check(p.mu_b, g.mu_b);
    check(p.lv_w, g.lv_w);
    check(p.lv_b, g.lv_b);
    check(p.dec_w1, g.dec_w1);
    check(p.dec_b1, g.dec_b1);
    check(p.out_w, g.out_w);
    check(p.out_b, g.out_b);
  }
  std::string sae_detail;
  bool sae_ok = true;
  for (auto variant : {SaeVariant::basic, SaeVariant::topk})
    for (auto loss : {SaeLossKind::l2, SaeLossKind::cosine}) {
      auto p = test::random_sae_params(rng, 6, 12);
      const RowMatrix y = test::random_matrix(rng, 8, 6, 2.0);
      SaeParams g;
      sae_loss_grad(p, variant, 3, loss, 0.01, y, &g);
      const std::function<double()> f = [&] { return sae_loss_grad(p, variant, 3, loss, 0.01, y, nullptr).total; };
      double worst = test::max_fd_error<RowMatrix>(p.enc_w, g.enc_w, f, kFdStep);
      worst = std::max(worst, test::max_fd_error<RowVector>(p.enc_b, g.enc_b, f, kFdStep));
      worst = std::max(worst, test::max_fd_error<RowMatrix>(p.dec_w, g.dec_w, f, kFdStep));
      worst = std::max(worst, test::max_fd_error<RowVector>(p.dec_b, g.dec_b, f, kFdStep));
      sae_ok = sae_ok && worst <= kFdTolerance;
      sae_detail += fmt(" %s/%s=%.2e", to_string(variant).c_str(), to_string(loss).c_str(), worst);
    }
  const double elapsed = clock.seconds();
  const bool pass = elsa_worst <= kFdTolerance && vae_worst <= kFdTolerance && sae_ok &&
                    elapsed < kGradientSeconds;
  report("gradient suite", pass,
         fmt("max rel err elsa=%.2e multvae=%.2e%s (tol %.0e); %.2f s (< %.0f s)", elsa_worst, vae_worst,
             sae_detail.c_str(), kFdTolerance, elapsed, kGradientSeconds));
}

void sparsity_invariants() {
  Rng rng(202);
  const std::size_t p = 12, d = 96, k = 16;
  const auto params = test::random_sae_params(rng, p, d);
  Standardizer s{test::random_row(rng, p), test::random_row(rng, p).cwiseAbs().array() + 0.1};
  const SaeModel topk(params, s, SaeVariant::topk, k, SaeLossKind::l2, 0.0);
  const SaeModel basic(params, s, SaeVariant::basic, k, SaeLossKind::l2, 0.0);
  std::size_t over_k = 0, non_positive = 0;
  double round_trip = 0.0;
  for (std::size_t t = 0; t < kEncodes; ++t) {
    const Vector y = test::random_row(rng, p, 3.0).transpose();
    const auto a = topk.encode(y);
    const auto b = basic.encode(y);
    over_k += a.l0() > k ? 1 : 0;
    for (const auto& e : a.entries) non_positive += e.value > 0.0 ? 0 : 1;
    for (const auto& e : b.entries) non_positive += e.value > 0.0 ? 0 : 1;
    round_trip = std::max(round_trip, (s.restore(s.apply(y)) - y).cwiseAbs().maxCoeff());
  }
  report("sparsity invariants", over_k == 0 && non_positive == 0 && round_trip <= kRoundTrip,
         fmt("%zu encodes: %zu TopK codes over k, %zu non-positive activations, round trip %.1e (<= %.0e)",
             kEncodes, over_k, non_positive, round_trip, kRoundTrip));
}

void metric_oracle() {
  const auto bad = test::metric_oracle_mismatches(kMetricInstances, 303);
  report("metric oracle", bad == 0, fmt("%zu of %zu instances disagree", bad, kMetricInstances));
}

void selectivity_math() {
  Eigen::VectorXd uniform = Eigen::VectorXd::Constant(8192, 1.0 / 8192.0);
  const double h = entropy_bits(uniform);

  // Third row is the mean of the first two, so it equals the average row.
  RowMatrix rows(3, 6);
  rows.row(0) << 1, 2, 0, 4, 1, 0;
  rows.row(1) << 0, 3, 3, 1, 0, 5;
  rows.row(2) = 0.5 * (rows.row(0) / rows.row(0).sum() + rows.row(1) / rows.row(1).sum());
  const auto side = row_selectivity(rows, {"a", "b", "c"});
  const double avg_kl = side.rows[2].kl_bits;

  Rng rng(404);
  double min_kl = 1e300;
  for (int t = 0; t < 50; ++t) {
    RowMatrix m = test::random_matrix(rng, 9, 20).cwiseAbs();
    for (Eigen::Index c = 0; c < m.cols(); c += 3) m(t % 9, c) = 0.0;
    const auto r = selectivity(m, m, std::vector<std::string>(9, "t"));
    for (const auto& row : r.tags.rows) min_kl = std::min(min_kl, row.kl_bits);
    for (const auto& row : r.neurons.rows) min_kl = std::min(min_kl, row.kl_bits);
  }
  const bool pass = std::abs(h - 13.0) <= kEntropyTolerance && avg_kl <= kAverageRowKl && min_kl >= 0.0;
  report("selectivity math", pass,
         fmt("H(uniform 8192) = %.12f bits; D_KL(average row) = %.1e bits; min D_KL = %.1e", h, avg_kl,
             min_kl));
}

// ---------------------------------------------------------------------------
// Desk-scale stack on the default synthetic corpus

TrainConfig desk_elsa() {
  TrainConfig c;
  c.batch_size = 256;
  c.max_epochs = 30;
  c.patience = 30;
  c.adam.alpha = 3e-3;
  c.seed = 1;
  return c;
}

MultVaeConfig desk_multvae() {
  MultVaeConfig c;
  c.batch_size = 128;
  c.epochs = 30;
  c.beta_step = 1e-4;
  c.seed = 1;
  return c;
}

SaeTrainConfig desk_sae(std::size_t k, SaeLossKind loss) {
  SaeTrainConfig c;
  c.variant = SaeVariant::topk;
  c.k = k;
  c.width_ratio = 8;
  c.loss = loss;
  c.lambda1 = 3e-4;
  c.adam.alpha = 1e-3;
  c.batch_size = 256;
  c.max_epochs = 100;
  c.patience = 100;
  c.seed = 1;
  return c;
}

struct Desk {
  SyntheticCorpus corpus;
  SplitSpec split;
  HoldoutSet hold;
  Cfae elsa;
  Cfae vae;
};

SaeModel train_sae_on(const Desk& d, const Cfae& cfae, const SaeTrainConfig& cfg) {
  return sae_train(user_embeddings(cfae, d.corpus.x.select_rows(d.split.train)),
                   user_embeddings(cfae, d.corpus.x.select_rows(d.split.val)), cfg);
}

std::optional<SaeModel> fidelity_and_ablation(const Desk& d, const Stopwatch& clock) {
  const std::vector<std::size_t> ks{8, 16, 32, 64};
  std::vector<double> rec;
  std::string detail;
  double base = 0.0, l2_16 = 0.0;
  std::optional<SaeModel> sae16;
  for (std::size_t k : ks) {
    SaeModel sae = train_sae_on(d, d.elsa, desk_sae(k, SaeLossKind::l2));
    const auto r = evaluate(d.elsa, &sae, d.hold);
    base = r.base.recall.mean;
    rec.push_back(r.recovered_recall_pct);
    detail += fmt(" k%zu=%.2f%%", k, r.recovered_recall_pct);
    if (k == 16) {
      l2_16 = r.nested->recall.mean;
      sae16.emplace(std::move(sae));
    }
  }
  std::size_t inversions = 0;
  for (std::size_t i = 1; i < rec.size(); ++i) inversions += rec[i] < rec[i - 1] ? 1 : 0;
  const double elapsed = clock.seconds();
  report("reconstruction fidelity", rec[1] >= kRecoveredFloorPct && inversions <= kMaxInversions &&
                                        elapsed < kFidelitySeconds,
         fmt("ELSA Recall@20 %.4f; recovered%s; k16 >= %.0f%%; %zu inversions (<= %zu); %.0f s (< %.0f s)",
             base, detail.c_str(), kRecoveredFloorPct, inversions, kMaxInversions, elapsed,
             kFidelitySeconds));

  const SaeModel elsa_cos = train_sae_on(d, d.elsa, desk_sae(16, SaeLossKind::cosine));
  const double elsa_cos_recall = evaluate_model(d.elsa, &elsa_cos, d.hold).recall.mean;
  const SaeModel vae_l2 = train_sae_on(d, d.vae, desk_sae(16, SaeLossKind::l2));
  const SaeModel vae_cos = train_sae_on(d, d.vae, desk_sae(16, SaeLossKind::cosine));
  const double vae_l2_recall = evaluate_model(d.vae, &vae_l2, d.hold).recall.mean;
  const double vae_cos_recall = evaluate_model(d.vae, &vae_cos, d.hold).recall.mean;
  report("cosine-loss ablation",
         elsa_cos_recall >= l2_16 - kCosineSlack && vae_cos_recall < vae_l2_recall,
         fmt("ELSA cosine %.4f vs l2 %.4f (>= l2 - %.2f); MultVAE cosine %.4f vs l2 %.4f (strictly less); "
             "MultVAE base %.4f",
             elsa_cos_recall, l2_16, kCosineSlack, vae_cos_recall, vae_l2_recall,
             evaluate_model(d.vae, nullptr, d.hold).recall.mean));
  return sae16;
}

void concept_recovery(const Desk& d, const ConceptNeuronMap& map) {
  const auto r = concept_recovery_score(map, truth_from_corpus(d.corpus));
  report("concept recovery", r.score >= kRecoveryGate && r.distinct_neurons >= kDistinctNeurons,
         fmt("score %.3f (>= %.1f); %zu distinct representative neurons (>= %zu)", r.score, kRecoveryGate,
             r.distinct_neurons, kDistinctNeurons));
}

void steering(const Desk& d, const SaeModel& sae, const ConceptNeuronMap& map) {
  const ConceptLabels labels = make_labels(map);

  std::size_t users = 0, differing = 0;
  for (const auto& [u, pair] : d.hold.users) {
    const auto reference = item_ids(top_n(nested_scores(d.elsa, &sae, pair.input), 20, pair.input));
    for (std::size_t j : {std::size_t{0}, sae.width() / 2, sae.width() - 1}) {
      const auto directive = SteeringDirective::single(static_cast<index_t>(j), 0.0);
      differing += item_ids(recommend(d.elsa, &sae, pair.input, &directive, 20)) == reference ? 0 : 1;
    }
    ++users;
  }
  report("steering identity", differing == 0,
         fmt("alpha=0 lists differ from the unsteered nested model for %zu of %zu users x 3 neurons",
             differing, users));

  const auto segments = d.corpus.tags.items_by_tag();
  double min_factor = 1e300, min_retained = 1e300, min_improved = 1e300;
  double sum_factor = 0.0, sum_retained = 0.0;
  std::size_t concepts = 0;
  for (const auto& name : d.corpus.concepts) {
    const auto neuron = labels.neuron_for(name, NeuronMapping::representative);
    const auto tag = d.corpus.tags.find(name);
    if (!neuron || !tag) {
      min_factor = 0.0;
      continue;
    }
    const auto e = concept_boost_effect(d.elsa, sae, d.hold, {name, segments[*tag]}, *neuron, kSteerAlpha);
    const double factor = e.steered_precision / e.baseline_precision;
    const double retained = e.steered_recall / e.baseline_recall;
    min_factor = std::min(min_factor, factor);
    min_retained = std::min(min_retained, retained);
    min_improved = std::min(min_improved, static_cast<double>(e.users_improved) / static_cast<double>(e.users));
    sum_factor += factor;
    sum_retained += retained;
    ++concepts;
  }
  report("steering efficacy", min_factor >= kPrecisionFactor && min_retained >= kRecallRetained,
         fmt("alpha=%.1f over %zu concepts: precision x%.2f min / x%.2f mean (>= %.0f); recall retained "
             "%.1f%% min / %.1f%% mean (>= %.0f%%)",
             kSteerAlpha, concepts, min_factor, sum_factor / concepts, kPrecisionFactor, 100.0 * min_retained,
             100.0 * sum_retained / concepts, 100.0 * kRecallRetained));
  report("steering per-user gain", min_improved >= kUsersImproved,
         fmt("worst concept: %.1f%% of test users gain segment items in the top-20 at alpha=%.1f (>= %.0f%%)",
             100.0 * min_improved, kSteerAlpha, 100.0 * kUsersImproved));

  const std::vector<NeuronMapping> mappings{NeuronMapping::representative, NeuronMapping::unique};
  const auto table =
      steering_sweep(d.elsa, sae, labels, d.hold, d.corpus.tags, default_alpha_grid(), mappings);
  const std::size_t na = default_alpha_grid().size();
  std::size_t dominated = 0;
  std::string curve;
  for (std::size_t a = 0; a < na; ++a) {
    const auto& rep = table.rows[a];
    const auto& uni = table.rows[na + a];
    dominated += rep.segment_precision_at_20 >= uni.segment_precision_at_20 ? 1 : 0;
    curve += fmt(" %.2f:%.3f/%.3f", rep.alpha, rep.segment_precision_at_20, uni.segment_precision_at_20);
  }
  report("representative dominates unique", dominated == na,
         fmt("segment precision representative/unique at%s", curve.c_str()));
}

// ---------------------------------------------------------------------------
// Determinism: the whole stack twice on a smaller corpus

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::pair<std::string, std::string>> run_stack(const fs::path& dir) {
  fs::create_directories(dir);
  SyntheticSpec spec;
  spec.num_concepts = 6;
  spec.items_per_concept = 12;
  spec.num_users = 500;
  spec.interactions_per_user = 14;
  spec.min_interactions_per_user = 10;
  spec.seed = 7;
  const auto corpus = generate_synthetic(spec);
  Dataset data{corpus.x, corpus.tags, corpus.titles, split_strong_generalization(corpus.x, 0.1, 0.1, 7),
               std::nullopt};
  write_dataset(dir, data, truth_to_json(corpus));

  TrainConfig ec = desk_elsa();
  ec.max_epochs = ec.patience = 5;
  const Cfae elsa = elsa_train(corpus.x, data.split, 12, ec);
  save_cfae(dir / "elsa.knob", elsa);
  MultVaeConfig vc = desk_multvae();
  vc.epochs = 3;
  save_cfae(dir / "multvae.knob", multvae_train(corpus.x, data.split, 8, vc));

  SaeTrainConfig sc = desk_sae(4, SaeLossKind::l2);
  sc.width_ratio = 4;
  sc.max_epochs = sc.patience = 10;
  const SaeModel sae = sae_train(user_embeddings(elsa, corpus.x.select_rows(data.split.train)),
                                 user_embeddings(elsa, corpus.x.select_rows(data.split.val)), sc);
  save_sae(dir / "sae.knob", sae, "elsa.knob");

  const auto map = build_concept_map(elsa, sae, corpus.tags);
  const auto labels = make_labels(map);
  write_json(dir / "concept_map.json", labels_to_json(labels));
  std::ostringstream sel;
  write_selectivity_csv(sel, selectivity(map.tags_to_neurons, map.neurons_to_tags, map.tag_names));
  write_text(dir / "selectivity.csv", sel.str());

  const auto hold = split_holdout_per_user(corpus.x, data.split.test, 0.2, 7);
  write_json(dir / "report.json", report_to_json(evaluate(elsa, &sae, hold)));
  std::ostringstream sweep;
  const std::vector<NeuronMapping> mappings{NeuronMapping::representative, NeuronMapping::unique};
  write_sweep_csv(sweep, steering_sweep(elsa, sae, labels, hold, corpus.tags, default_alpha_grid(), mappings));
  write_text(dir / "steering_sweep.csv", sweep.str());

  const EngineSnapshot snap{elsa, sae, labels, corpus.titles,
                            {corpus.x.num_users(), corpus.x.num_items(), corpus.x.nnz()}, "fixed"};
  std::string responses;
  for (const char* path : {"/health", "/knobs", "/tags", "/items"})
    responses += dispatch(snap, "GET", path, {}, "").body + '\n';
  responses += dispatch(snap, "POST", "/recommend", {},
                        R"({"history":[0,1,2,13],"alpha":0.3,"boosts":[{"neuron":1,"weight":2},)"
                        R"({"tag":"children"}],"include_baseline":true})")
                   .body;
  responses += dispatch(snap, "POST", "/encode", {}, R"({"history":[3,4,5]})").body;
  write_text(dir / "responses.txt", responses);

  std::vector<std::pair<std::string, std::string>> files;
  std::vector<fs::path> paths;
  for (const auto& e : fs::directory_iterator(dir)) paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) files.push_back({p.filename().string(), slurp(p)});
  return files;
}

void determinism() {
  const fs::path root = fs::temp_directory_path() / fmt("knobs_acceptance_%d", static_cast<int>(::getpid()));
  const auto first = run_stack(root / "a");
  const auto second = run_stack(root / "b");
  std::size_t differing = first.size() == second.size() ? 0 : 1;
  std::string names;
  for (std::size_t i = 0; i < std::min(first.size(), second.size()); ++i) {
    if (first[i] != second[i]) {
      ++differing;
      names += " " + first[i].first;
    }
  }
  fs::remove_all(root);
  report("determinism", differing == 0 && first.size() >= 10,
         fmt("%zu artifacts and API transcripts compared byte for byte, %zu differ%s", first.size(), differing,
             names.c_str()));
}

}  // namespace

int main() {
  gradient_suite();
  sparsity_invariants();
  metric_oracle();
  selectivity_math();
  determinism();

  Stopwatch clock;
  Desk d;
  SyntheticSpec spec;
  spec.seed = 1;
  d.corpus = generate_synthetic(spec);
  d.split = split_strong_generalization(d.corpus.x, 0.1, 0.1, 1);
  d.hold = split_holdout_per_user(d.corpus.x, d.split.test, 0.2, 1);
  d.elsa = elsa_train(d.corpus.x, d.split, 64, desk_elsa());
  d.vae = multvae_train(d.corpus.x, d.split, 64, desk_multvae());

  const auto sae16 = fidelity_and_ablation(d, clock);
  const auto map = build_concept_map(d.elsa, *sae16, d.corpus.tags);
  concept_recovery(d, map);
  steering(d, *sae16, map);

  std::printf("%s: %d failing criteria\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
