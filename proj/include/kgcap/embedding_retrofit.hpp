#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "kgcap/error.hpp"
#include "kgcap/kg_store.hpp"
#include "kgcap/text.hpp"

namespace kgcap {

class VectorStore {
 public:
  VectorStore() = default;
  explicit VectorStore(int dim) : dim_(dim) {
    if (dim <= 0) throw ValidationError("vector dimension must be positive");
  }

  int dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return vectors_.size(); }
  bool contains(const Term& t) const { return vectors_.count(t) != 0; }

  const Eigen::VectorXd* find(const Term& t) const {
    auto it = vectors_.find(t);
    return it == vectors_.end() ? nullptr : &it->second;
  }

  const Eigen::VectorXd& at(const Term& t) const {
    auto it = vectors_.find(t);
    if (it == vectors_.end()) throw LookupError(t.str());
    return it->second;
  }

  void set(const Term& t, Eigen::VectorXd v) {
    if (v.size() != dim_) throw ValidationError("vector length differs from store dimension");
    vectors_[t] = std::move(v);
  }

  // Sorted by term.
  const std::map<Term, Eigen::VectorXd>& entries() const noexcept { return vectors_; }

 private:
  int dim_ = 0;
  std::map<Term, Eigen::VectorXd> vectors_;
};

// `word v1 ... vd` per line. Later duplicates overwrite earlier ones.
inline VectorStore load_vectors(std::istream& in) {
  std::vector<std::pair<Term, Eigen::VectorXd>> rows;
  int dim = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto body = trim(line);
    if (body.empty()) continue;
    std::vector<std::string_view> fields;
    for (auto f : split(body, ' '))
      if (!trim(f).empty()) fields.push_back(trim(f));
    if (fields.size() < 2) throw ParseError("expected word followed by components", lineno);
    const int d = static_cast<int>(fields.size()) - 1;
    if (dim == 0) dim = d;
    if (d != dim)
      throw ValidationError("expected " + std::to_string(dim) + " components, got " +
                                std::to_string(d),
                            lineno);
    Eigen::VectorXd v(d);
    for (int k = 0; k < d; ++k)
      if (!parse_double(fields[k + 1], v[k]))
        throw ParseError("non-numeric component '" + std::string(fields[k + 1]) + "'", lineno);
    auto norm = Term::normalize(fields[0]);
    if (norm.empty()) throw ParseError("empty word", lineno);
    rows.emplace_back(Term(norm), std::move(v));
  }
  if (rows.empty()) throw ValidationError("empty vocabulary");
  VectorStore store(dim);
  for (auto& [t, v] : rows) store.set(t, std::move(v));
  return store;
}

inline void save_vectors(const VectorStore& store, std::ostream& out) {
  for (const auto& [t, v] : store.entries()) {
    out << t.str();
    for (Eigen::Index k = 0; k < v.size(); ++k) out << ' ' << format_double(v[k]);
    out << '\n';
  }
}

// Edge weighting for the retrofit objective.
//   InverseDegree: beta_ij = 1/deg(i) at the vertex being updated. Because
//     that is not symmetric, the objective is evaluated in the equivalent
//     symmetric form obtained by scaling vertex i's update weights by
//     deg(i): alpha_i * deg(i) on the data term and 1 per edge. Both forms
//     produce identical coordinate updates.
//   Constant: beta_ij = value.
//   EdgeWeight: beta_ij = the graph weight of the pair (max over relations).
//   Custom: beta_ij = fn(i, j); fn must be symmetric.
struct BetaPolicy {
  enum class Kind { InverseDegree, Constant, EdgeWeight, Custom };
  Kind kind = Kind::InverseDegree;
  double value = 1.0;
  std::function<double(const Term&, const Term&)> fn;

  static BetaPolicy inverse_degree() { return {}; }
  static BetaPolicy constant(double v) { return {Kind::Constant, v, {}}; }
  static BetaPolicy edge_weight() { return {Kind::EdgeWeight, 1.0, {}}; }
  static BetaPolicy custom(std::function<double(const Term&, const Term&)> f) {
    return {Kind::Custom, 1.0, std::move(f)};
  }
};

struct RetrofitConfig {
  std::function<double(const Term&)> alpha;  // empty: constant 1
  BetaPolicy beta;
  int max_iterations = 10;
  double tolerance = 1e-8;  // sup-norm of the per-sweep change

  double alpha_of(const Term& t) const { return alpha ? alpha(t) : 1.0; }
};

namespace detail {

struct VertexUpdate {
  Term term;
  double alpha = 0.0;  // weights as used by the coordinate update
  std::vector<std::pair<Term, double>> betas;
  double degree = 0.0;
};

// Graph vertices that have a base vector, each with its in-vocabulary
// neighbours, in lexicographic order.
inline std::vector<VertexUpdate> plan_updates(const VectorStore& base, const KnowledgeGraph& g,
                                              const RetrofitConfig& cfg) {
  std::vector<VertexUpdate> plan;
  for (const auto& t : g.terms()) {
    if (!base.contains(t)) continue;
    VertexUpdate u{t, cfg.alpha_of(t), {}, 0.0};
    auto nbrs = g.neighbor_weights(t);
    for (const auto& [n, w] : nbrs)
      if (base.contains(n)) u.degree += 1.0;
    for (const auto& [n, w] : nbrs) {
      if (!base.contains(n)) continue;
      double b = 0.0;
      switch (cfg.beta.kind) {
        case BetaPolicy::Kind::InverseDegree: b = 1.0 / u.degree; break;
        case BetaPolicy::Kind::Constant: b = cfg.beta.value; break;
        case BetaPolicy::Kind::EdgeWeight: b = w; break;
        case BetaPolicy::Kind::Custom: b = cfg.beta.fn(t, n); break;
      }
      u.betas.emplace_back(n, b);
    }
    if (!(u.alpha >= 0.0)) throw ConfigError("negative alpha for " + t.str());
    for (const auto& [n, b] : u.betas)
      if (!(b >= 0.0)) throw ConfigError("negative beta on " + t.str() + "-" + n.str());
    plan.push_back(std::move(u));
  }
  return plan;
}

}  // namespace detail

// Retrofit objective, counting every unordered edge once.
inline double objective(const VectorStore& base, const VectorStore& q, const KnowledgeGraph& g,
                        const RetrofitConfig& cfg) {
  if (base.dim() != q.dim() || base.size() != q.size())
    throw ValidationError("retrofit objective: vocabulary mismatch");
  for (const auto& [t, _] : base.entries())
    if (!q.contains(t)) throw ValidationError("retrofit objective: " + t.str() + " missing");

  const bool inverse_degree = cfg.beta.kind == BetaPolicy::Kind::InverseDegree;
  double total = 0.0;
  for (const auto& u : detail::plan_updates(base, g, cfg)) {
    const double a = inverse_degree ? u.alpha * u.degree : u.alpha;
    total += a * (q.at(u.term) - base.at(u.term)).squaredNorm();
    for (const auto& [n, b] : u.betas) {
      if (!(u.term < n)) continue;
      const double w = inverse_degree ? 1.0 : b;
      total += w * (q.at(u.term) - q.at(n)).squaredNorm();
    }
  }
  return total;
}

using SweepObserver = std::function<void(int sweep, const VectorStore& current)>;

// Gauss-Seidel sweeps of the closed-form per-vertex minimiser, in term order.
// Vertices without in-vocabulary neighbours keep their base vector untouched.
inline VectorStore retrofit(const VectorStore& base, const KnowledgeGraph& g,
                            const RetrofitConfig& cfg, const SweepObserver& observe = {}) {
  if (cfg.max_iterations < 1) throw ConfigError("max_iterations must be >= 1");
  if (!(cfg.tolerance >= 0.0)) throw ConfigError("tolerance must be >= 0");

  auto plan = detail::plan_updates(base, g, cfg);
  for (const auto& u : plan) {
    if (u.betas.empty()) continue;
    double denom = u.alpha;
    for (const auto& [n, b] : u.betas) denom += b;
    if (denom == 0.0) throw ConfigError("alpha + sum(beta) is zero at " + u.term.str());
  }

  VectorStore q = base;
  Eigen::VectorXd acc(base.dim());
  for (int sweep = 1; sweep <= cfg.max_iterations; ++sweep) {
    double max_change = 0.0;
    for (const auto& u : plan) {
      if (u.betas.empty()) continue;
      double beta_sum = 0.0;
      acc.setZero();
      for (const auto& [n, b] : u.betas) {
        acc += b * q.at(n);
        beta_sum += b;
      }
      const auto& hat = base.at(u.term);
      Eigen::VectorXd next =
          beta_sum == 0.0 ? hat : Eigen::VectorXd((acc + u.alpha * hat) / (beta_sum + u.alpha));
      max_change = std::max(max_change, (next - q.at(u.term)).cwiseAbs().maxCoeff());
      q.set(u.term, std::move(next));
    }
    if (observe) observe(sweep, q);
    if (max_change < cfg.tolerance) break;
  }
  return q;
}

// 1 - cos(a, b); 1 when either vector has zero norm.
inline double cosine_distance(const Eigen::Ref<const Eigen::VectorXd>& a,
                              const Eigen::Ref<const Eigen::VectorXd>& b) {
  if (a.size() != b.size()) throw ValidationError("cosine_distance: length mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - a.dot(b) / (na * nb);
}

struct WeightedTermQuery {
  std::vector<Term> words;
  std::vector<double> weights;

  void validate() const {
    if (words.empty()) throw ValidationError("empty term query");
    if (words.size() != weights.size()) throw ValidationError("query words/weights length mismatch");
    double sum = 0.0;
    for (double u : weights) {
      if (!(u > 0.0)) throw ValidationError("query weights must be positive");
      sum += u;
    }
    if (!(sum > 0.0)) throw ValidationError("query weights sum to zero");
  }
};

// Weighted mean cosine distance from `w` to the query words; lower is closer.
inline double relatedness_score(const WeightedTermQuery& query, const Term& w,
                                const VectorStore& store) {
  query.validate();
  const auto& target = store.at(w);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < query.words.size(); ++i) {
    num += query.weights[i] * cosine_distance(target, store.at(query.words[i]));
    den += query.weights[i];
  }
  return num / den;
}

}  // namespace kgcap
