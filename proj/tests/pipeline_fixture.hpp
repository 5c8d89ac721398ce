#pragma once

#include "knobs/concept_map.hpp"
#include "knobs/elsa.hpp"
#include "knobs/sae.hpp"
#include "knobs/synthetic.hpp"

namespace knobs::test {

// A small trained stack shared by the mapping, steering and service tests.
struct SmallPipeline {
  SyntheticCorpus corpus;
  SplitSpec split;
  Cfae cfae;
  SaeModel sae;
  ConceptNeuronMap map;
  ConceptLabels labels;
};

inline SyntheticSpec small_spec() {
  SyntheticSpec spec;
  spec.num_concepts = 8;
  spec.items_per_concept = 12;
  spec.num_users = 800;
  spec.interactions_per_user = 16;
  spec.min_interactions_per_user = 16;
  spec.seed = 21;
  return spec;
}

inline SmallPipeline build_small_pipeline() {
  SmallPipeline p;
  p.corpus = generate_synthetic(small_spec());
  p.split = split_strong_generalization(p.corpus.x, 0.1, 0.1, 1);
  TrainConfig ec;
  ec.batch_size = 128;
  ec.max_epochs = 20;
  ec.patience = 20;
  ec.adam.alpha = 3e-3;
  ec.seed = 1;
  p.cfae = elsa_train(p.corpus.x, p.split, 16, ec);
  const auto emb = [&](const std::vector<std::size_t>& users) {
    const auto rows = p.corpus.x.select_rows(users);
    RowMatrix y(static_cast<Eigen::Index>(rows.size()), 16);
    for (std::size_t u = 0; u < rows.size(); ++u)
      y.row(static_cast<Eigen::Index>(u)) = cfae_encode(p.cfae, rows[u]).transpose();
    return y;
  };
  SaeTrainConfig sc;
  sc.width_ratio = 4;
  sc.k = 8;
  sc.batch_size = 128;
  sc.adam.alpha = 1e-3;
  sc.max_epochs = 40;
  sc.patience = 40;
  sc.seed = 1;
  p.sae = sae_train(emb(p.split.train), emb(p.split.val), sc);
  p.map = build_concept_map(p.cfae, p.sae, p.corpus.tags);
  p.labels = make_labels(p.map);
  return p;
}

inline const SmallPipeline& small_pipeline() {
  static const SmallPipeline p = build_small_pipeline();
  return p;
}

}  // namespace knobs::test
