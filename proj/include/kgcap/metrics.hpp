#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kgcap/error.hpp"
#include "kgcap/text.hpp"

namespace kgcap::metrics {

using Tokens = std::vector<std::string>;
using NgramCounts = std::map<Tokens, int>;

struct EvalItem {
  std::string image_id;
  Tokens candidate;
  std::vector<Tokens> references;
};

using EvalCorpus = std::vector<EvalItem>;

inline EvalItem make_item(std::string image_id, const std::string& candidate,
                          const std::vector<std::string>& references) {
  EvalItem item{std::move(image_id), tokenize(candidate), {}};
  for (const auto& r : references) item.references.push_back(tokenize(r));
  return item;
}

inline void validate(const EvalCorpus& corpus) {
  for (const auto& item : corpus) {
    if (item.references.empty())
      throw ValidationError("image '" + item.image_id + "' has no references");
    for (const auto& r : item.references)
      if (r.empty()) throw ValidationError("image '" + item.image_id + "' has an empty reference");
  }
}

inline NgramCounts ngram_counts(const Tokens& toks, int n) {
  NgramCounts out;
  if (static_cast<int>(toks.size()) < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i)
    ++out[Tokens(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

// Corpus BLEU with clipped n-gram precision, uniform weights over orders
// 1..N, no smoothing, and a brevity penalty against the closest reference
// length (shorter wins ties).
inline double bleu(const EvalCorpus& corpus, int max_n) {
  if (max_n < 1 || max_n > 4) throw ValidationError("BLEU order must lie in 1..4");
  validate(corpus);
  std::array<long long, 4> matched{}, total{};
  long long cand_len = 0, ref_len = 0;
  for (const auto& item : corpus) {
    const long long c = static_cast<long long>(item.candidate.size());
    long long best = -1;
    for (const auto& r : item.references) {
      const long long rl = static_cast<long long>(r.size());
      if (best < 0 || std::llabs(rl - c) < std::llabs(best - c) ||
          (std::llabs(rl - c) == std::llabs(best - c) && rl < best))
        best = rl;
    }
    cand_len += c;
    ref_len += best;
    for (int n = 1; n <= max_n; ++n) {
      auto cand = ngram_counts(item.candidate, n);
      NgramCounts max_ref;
      for (const auto& r : item.references)
        for (const auto& [g, cnt] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], cnt);
      for (const auto& [g, cnt] : cand) {
        auto it = max_ref.find(g);
        matched[n - 1] += std::min(cnt, it == max_ref.end() ? 0 : it->second);
        total[n - 1] += cnt;
      }
    }
  }
  if (cand_len == 0) return 0.0;
  double log_p = 0.0;
  for (int n = 0; n < max_n; ++n) {
    if (matched[n] == 0 || total[n] == 0) return 0.0;
    log_p += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
  }
  const double bp = cand_len > ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return bp * std::exp(log_p / max_n);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Per image: precision and recall of the LCS, each maximised over the
// references, combined as F_beta; then the mean over images.
inline double rouge_l_image(const EvalItem& item, double beta = 1.2) {
  if (item.candidate.empty()) return 0.0;
  double p_max = 0.0, r_max = 0.0;
  for (const auto& r : item.references) {
    const double lcs = static_cast<double>(lcs_length(item.candidate, r));
    p_max = std::max(p_max, lcs / static_cast<double>(item.candidate.size()));
    r_max = std::max(r_max, lcs / static_cast<double>(r.size()));
  }
  if (p_max == 0.0 || r_max == 0.0) return 0.0;
  const double b2 = beta * beta;
  return (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max);
}

inline double rouge_l(const EvalCorpus& corpus, double beta = 1.2) {
  validate(corpus);
  if (corpus.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& item : corpus) sum += rouge_l_image(item, beta);
  return sum / static_cast<double>(corpus.size());
}

struct CiderOptions {
  int max_n = 4;
  double sigma = 6.0;
  double scale = 10.0;
};

// CIDEr-D with document frequencies taken from the corpus' own references.
inline std::vector<double> cider_d_per_image(const EvalCorpus& corpus,
                                             const CiderOptions& opt = {}) {
  validate(corpus);
  std::map<Tokens, int> df;
  for (const auto& item : corpus) {
    std::set<Tokens> seen;
    for (const auto& r : item.references)
      for (int n = 1; n <= opt.max_n; ++n)
        for (const auto& [g, _] : ngram_counts(r, n)) seen.insert(g);
    for (const auto& g : seen) ++df[g];
  }
  const double log_images = corpus.empty() ? 0.0 : std::log(static_cast<double>(corpus.size()));

  struct Weighted {
    std::vector<std::map<Tokens, double>> vec;
    std::vector<double> norm;
    double length = 0.0;
  };
  auto weigh = [&](const Tokens& toks) {
    Weighted w{std::vector<std::map<Tokens, double>>(opt.max_n),
               std::vector<double>(opt.max_n, 0.0), static_cast<double>(toks.size())};
    for (int n = 1; n <= opt.max_n; ++n) {
      for (const auto& [g, tf] : ngram_counts(toks, n)) {
        auto it = df.find(g);
        const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : double(it->second)));
        const double v = tf * (log_images - d);
        w.vec[n - 1][g] = v;
        w.norm[n - 1] += v * v;
      }
      w.norm[n - 1] = std::sqrt(w.norm[n - 1]);
    }
    return w;
  };

  std::vector<double> scores;
  scores.reserve(corpus.size());
  for (const auto& item : corpus) {
    const auto cand = weigh(item.candidate);
    double sum_refs = 0.0;
    for (const auto& r : item.references) {
      const auto ref = weigh(r);
      const double delta = cand.length - ref.length;
      const double penalty = std::exp(-(delta * delta) / (2.0 * opt.sigma * opt.sigma));
      double per_n = 0.0;
      for (int n = 0; n < opt.max_n; ++n) {
        if (cand.norm[n] == 0.0 || ref.norm[n] == 0.0) continue;
        double dot = 0.0;
        for (const auto& [g, v] : cand.vec[n]) {
          auto it = ref.vec[n].find(g);
          if (it != ref.vec[n].end()) dot += std::min(v, it->second) * it->second;
        }
        per_n += penalty * dot / (cand.norm[n] * ref.norm[n]);
      }
      sum_refs += per_n / opt.max_n;
    }
    scores.push_back(opt.scale * sum_refs / static_cast<double>(item.references.size()));
  }
  return scores;
}

inline double cider_d(const EvalCorpus& corpus, const CiderOptions& opt = {}) {
  if (corpus.empty()) return 0.0;
  double sum = 0.0;
  for (double s : cider_d_per_image(corpus, opt)) sum += s;
  return sum / static_cast<double>(corpus.size());
}

struct MetricReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider_d = 0.0;
  std::size_t images = 0;
};

// Scores every metric. Images are processed in image_id order so the result
// does not depend on input order.
inline MetricReport evaluate(EvalCorpus corpus) {
  std::stable_sort(corpus.begin(), corpus.end(),
                   [](const EvalItem& a, const EvalItem& b) { return a.image_id < b.image_id; });
  MetricReport rep;
  rep.images = corpus.size();
  for (int n = 1; n <= 4; ++n) rep.bleu[n - 1] = bleu(corpus, n);
  rep.rouge_l = rouge_l(corpus);
  rep.cider_d = cider_d(corpus);
  return rep;
}

inline nlohmann::ordered_json report_to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["images"] = r.images;
  j["bleu1"] = r.bleu[0];
  j["bleu2"] = r.bleu[1];
  j["bleu3"] = r.bleu[2];
  j["bleu4"] = r.bleu[3];
  j["meteor"] = nullptr;
  j["rouge_l"] = r.rouge_l;
  j["cider_d"] = r.cider_d;
  j["percent"] = {{"bleu1", 100 * r.bleu[0]}, {"bleu2", 100 * r.bleu[1]},
                  {"bleu3", 100 * r.bleu[2]}, {"bleu4", 100 * r.bleu[3]},
                  {"rouge_l", 100 * r.rouge_l},  {"cider_d_x100", 100 * r.cider_d}};
  return j;
}

inline std::string table_header(std::size_t label_width = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%8s %8s %8s %8s %8s %8s %8s", "B@1", "B@2", "B@3", "B@4", "M",
                "R", "C");
  if (!label_width) return buf;
  std::string label = "Input of model";
  label.resize(std::max(label_width, label.size()), ' ');
  return label + " | " + buf;
}

// BLEU and ROUGE-L as percentages, CIDEr-D on its native scale, METEOR "-".
inline std::string table_row(const MetricReport& r, const std::string& label = "",
                             std::size_t label_width = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%8.1f %8.1f %8.1f %8.1f %8s %8.1f %8.3f", 100 * r.bleu[0],
                100 * r.bleu[1], 100 * r.bleu[2], 100 * r.bleu[3], "-", 100 * r.rouge_l,
                r.cider_d);
  if (!label_width) return buf;
  std::string l = label;
  if (l.size() < label_width) l += std::string(label_width - l.size(), ' ');
  return l + " | " + buf;
}

}  // namespace kgcap::metrics
