#pragma once

#include <algorithm>
#include <cstddef>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "kgcap/error.hpp"
#include "kgcap/text.hpp"

namespace kgcap {

struct Edge {
  std::string relation;
  Term start;
  Term end;
  double weight = 1.0;
};

struct Adjacent {
  Term term;
  std::string relation;
  double weight;
};

struct Reached {
  Term term;
  int hops;
  double weight;  // best weight among edges entering from the previous ring

  friend bool operator==(const Reached&, const Reached&) = default;
};

// Undirected commonsense graph. Each (unordered pair, relation) is stored once
// and is visible from both endpoints. Immutable once built.
class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;

  // Adds or merges an edge; a repeated (pair, relation) keeps the max weight.
  void add(const Edge& e) {
    if (e.start == e.end) throw ValidationError("self-loop on " + e.start.str());
    if (!(e.weight >= 0.0)) throw ValidationError("negative edge weight");
    const auto& [lo, hi] = std::minmax(e.start, e.end);
    auto key = std::make_tuple(lo, hi, e.relation);
    auto it = edges_.find(key);
    if (it != edges_.end()) {
      if (e.weight > it->second) {
        it->second = e.weight;
        set_weight(lo, hi, e.relation, e.weight);
        set_weight(hi, lo, e.relation, e.weight);
      }
      return;
    }
    edges_.emplace(key, e.weight);
    adjacency_[lo].push_back({hi, e.relation, e.weight});
    adjacency_[hi].push_back({lo, e.relation, e.weight});
  }

  bool contains(const Term& t) const { return adjacency_.count(t) != 0; }
  std::size_t term_count() const { return adjacency_.size(); }
  std::size_t edge_count() const { return edges_.size(); }

  const std::vector<Adjacent>& adjacent(const Term& t) const {
    static const std::vector<Adjacent> none;
    auto it = adjacency_.find(t);
    return it == adjacency_.end() ? none : it->second;
  }

  // Distinct neighbours, relation labels collapsed, each at its max weight.
  std::map<Term, double> neighbor_weights(const Term& t) const {
    std::map<Term, double> out;
    for (const auto& a : adjacent(t)) {
      auto [it, fresh] = out.emplace(a.term, a.weight);
      if (!fresh) it->second = std::max(it->second, a.weight);
    }
    return out;
  }

  std::vector<Term> terms() const {
    std::vector<Term> out;
    out.reserve(adjacency_.size());
    for (const auto& [t, _] : adjacency_) out.push_back(t);
    return out;
  }

  // Canonical edge list: endpoints ordered, sorted by (start, end, relation).
  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    out.reserve(edges_.size());
    for (const auto& [key, w] : edges_)
      out.push_back({std::get<2>(key), std::get<0>(key), std::get<1>(key), w});
    return out;
  }

  friend bool operator==(const KnowledgeGraph& a, const KnowledgeGraph& b) {
    return a.edges_ == b.edges_;
  }

 private:
  void set_weight(const Term& from, const Term& to, const std::string& rel, double w) {
    for (auto& a : adjacency_[from])
      if (a.term == to && a.relation == rel) a.weight = w;
  }

  std::map<std::tuple<Term, Term, std::string>, double> edges_;
  std::map<Term, std::vector<Adjacent>> adjacency_;
};

// Reads `relation,start,end[,weight]` lines. Blank lines and lines whose first
// non-space character is '#' are skipped.
inline KnowledgeGraph ingest_edges(std::istream& in) {
  KnowledgeGraph g;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    auto fields = split(body, ',');
    if (fields.size() != 3 && fields.size() != 4)
      throw ParseError("expected relation,start,end[,weight]", lineno);
    auto relation = std::string(trim(fields[0]));
    if (relation.empty()) throw ParseError("empty relation", lineno);
    double weight = 1.0;
    if (fields.size() == 4 && !parse_double(fields[3], weight))
      throw ParseError("bad weight '" + std::string(fields[3]) + "'", lineno);
    if (weight < 0.0) throw ValidationError("negative weight", lineno);
    auto start = Term::normalize(fields[1]);
    auto end = Term::normalize(fields[2]);
    if (start.empty() || end.empty()) throw ParseError("empty term", lineno);
    if (start == end) throw ValidationError("self-loop on " + start, lineno);
    g.add({relation, Term(start), Term(end), weight});
  }
  return g;
}

inline void export_edges(const KnowledgeGraph& g, std::ostream& out) {
  for (const auto& e : g.edges())
    out << e.relation << ',' << e.start.str() << ',' << e.end.str() << ','
        << format_double(e.weight) << '\n';
}

// Breadth-first closure around `t` (excluded). Results come ring by ring;
// within a ring, by descending entry weight then term.
inline std::vector<Reached> neighbors(const KnowledgeGraph& g, const Term& t, int max_hops) {
  if (max_hops < 1) throw ValidationError("max_hops must be >= 1");
  std::vector<Reached> out;
  if (!g.contains(t)) return out;
  std::set<Term> seen{t};
  std::vector<Term> frontier{t};
  for (int hop = 1; hop <= max_hops && !frontier.empty(); ++hop) {
    std::map<Term, double> ring;
    for (const auto& from : frontier) {
      for (const auto& a : g.adjacent(from)) {
        if (seen.count(a.term)) continue;
        auto [it, fresh] = ring.emplace(a.term, a.weight);
        if (!fresh) it->second = std::max(it->second, a.weight);
      }
    }
    std::vector<Reached> level;
    for (const auto& [term, w] : ring) {
      seen.insert(term);
      level.push_back({term, hop, w});
    }
    std::stable_sort(level.begin(), level.end(),
                     [](const Reached& a, const Reached& b) { return a.weight > b.weight; });
    frontier.clear();
    for (const auto& r : level) {
      frontier.push_back(r.term);
      out.push_back(r);
    }
  }
  return out;
}

}  // namespace kgcap
