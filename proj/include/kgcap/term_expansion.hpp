#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <tuple>
#include <vector>

#include "kgcap/embedding_retrofit.hpp"
#include "kgcap/error.hpp"
#include "kgcap/kg_store.hpp"
#include "kgcap/text.hpp"

namespace kgcap {

struct DetectedObject {
  Term label;
  double confidence = 0.0;
};

struct ExpansionConfig {
  double detection_threshold = 0.30;
  int per_object_k = 5;
  int scene_k = 10;
  int hop_limit = 2;

  void validate() const {
    if (!(detection_threshold >= 0.0 && detection_threshold <= 1.0))
      throw ConfigError("detection_threshold must lie in [0,1]");
    if (per_object_k < 1) throw ConfigError("per_object_k must be >= 1");
    if (scene_k < 1) throw ConfigError("scene_k must be >= 1");
    if (hop_limit < 1) throw ConfigError("hop_limit must be >= 1");
  }
};

// The detected set O, its direct expansion D, the scene expansion R_O, and
// the indirect remainder I = R_O - D. Ranked lists keep the order in which
// terms are fed to the term encoders.
struct TermSets {
  std::set<Term> objects;
  std::set<Term> direct;
  std::set<Term> indirect;
  std::set<Term> scene;
  std::vector<Term> direct_ranked;
  std::vector<Term> indirect_ranked;
  std::vector<Term> scene_ranked;
};

// Labels at or above the threshold, each with its max confidence.
inline std::map<Term, double> confident_objects(const std::vector<DetectedObject>& dets,
                                                const ExpansionConfig& cfg) {
  std::map<Term, double> out;
  for (const auto& d : dets) {
    if (!(d.confidence >= 0.0 && d.confidence <= 1.0))
      throw ValidationError("detection confidence outside [0,1] for " + d.label.str());
    if (d.confidence < cfg.detection_threshold) continue;
    auto [it, fresh] = out.emplace(d.label, d.confidence);
    if (!fresh) it->second = std::max(it->second, d.confidence);
  }
  return out;
}

inline std::set<Term> filter_detections(const std::vector<DetectedObject>& dets,
                                        const ExpansionConfig& cfg) {
  std::set<Term> out;
  for (const auto& [t, _] : confident_objects(dets, cfg)) out.insert(t);
  return out;
}

namespace detail {

struct Candidate {
  Term term;
  int hops;
  std::optional<double> score;
};

// Scored candidates ascending by (score, hops, term); unscored ones after,
// by (hops, term).
inline std::vector<Term> rank_candidates(std::vector<Candidate> cands, int k) {
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score.has_value() != b.score.has_value()) return a.score.has_value();
    if (a.score && *a.score != *b.score) return *a.score < *b.score;
    return std::tie(a.hops, a.term) < std::tie(b.hops, b.term);
  });
  std::vector<Term> out;
  for (std::size_t i = 0; i < cands.size() && static_cast<int>(i) < k; ++i)
    out.push_back(cands[i].term);
  return out;
}

}  // namespace detail

// r_o: graph neighbourhood of `o` ranked by embedding distance to `o`.
inline std::vector<Term> expand_object(const KnowledgeGraph& g, const VectorStore& store,
                                       const Term& o, const ExpansionConfig& cfg) {
  cfg.validate();
  std::vector<detail::Candidate> cands;
  const bool scorable = store.contains(o);
  WeightedTermQuery query{{o}, {1.0}};
  for (const auto& r : neighbors(g, o, cfg.hop_limit)) {
    std::optional<double> s;
    if (scorable && store.contains(r.term)) s = relatedness_score(query, r.term, store);
    cands.push_back({r.term, r.hops, s});
  }
  return detail::rank_candidates(std::move(cands), cfg.per_object_k);
}

// R_O: union of the objects' neighbourhoods (minus O) ranked by the
// confidence-weighted distance to all of O.
inline std::vector<Term> expand_scene(const KnowledgeGraph& g, const VectorStore& store,
                                      const std::set<Term>& objects,
                                      const std::map<Term, double>& confidences,
                                      const ExpansionConfig& cfg) {
  cfg.validate();
  if (objects.empty()) return {};
  WeightedTermQuery query;
  for (const auto& o : objects) {
    if (!store.contains(o)) continue;
    auto it = confidences.find(o);
    double u = it == confidences.end() ? 1.0 : it->second;
    if (u <= 0.0) continue;
    query.words.push_back(o);
    query.weights.push_back(u);
  }
  std::map<Term, int> pool;
  for (const auto& o : objects)
    for (const auto& r : neighbors(g, o, cfg.hop_limit)) {
      if (objects.count(r.term)) continue;
      auto [it, fresh] = pool.emplace(r.term, r.hops);
      if (!fresh) it->second = std::min(it->second, r.hops);
    }
  std::vector<detail::Candidate> cands;
  for (const auto& [t, hops] : pool) {
    std::optional<double> s;
    if (!query.words.empty() && store.contains(t)) s = relatedness_score(query, t, store);
    cands.push_back({t, hops, s});
  }
  return detail::rank_candidates(std::move(cands), cfg.scene_k);
}

inline TermSets build_term_sets(const KnowledgeGraph& g, const VectorStore& store,
                                const std::vector<DetectedObject>& dets,
                                const ExpansionConfig& cfg) {
  cfg.validate();
  TermSets ts;
  auto confident = confident_objects(dets, cfg);
  for (const auto& [o, _] : confident) ts.objects.insert(o);

  auto push_direct = [&ts](const Term& t) {
    if (ts.direct.insert(t).second) ts.direct_ranked.push_back(t);
  };
  for (const auto& o : ts.objects) {
    push_direct(o);
    for (const auto& r : expand_object(g, store, o, cfg)) push_direct(r);
  }
  ts.scene_ranked = expand_scene(g, store, ts.objects, confident, cfg);
  for (const auto& t : ts.scene_ranked) {
    ts.scene.insert(t);
    if (!ts.direct.count(t)) {
      ts.indirect.insert(t);
      ts.indirect_ranked.push_back(t);
    }
  }
  return ts;
}

}  // namespace kgcap
