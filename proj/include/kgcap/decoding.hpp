#pragma once

#include <algorithm>
#include <vector>

#include "kgcap/caption_model.hpp"
#include "kgcap/error.hpp"

namespace kgcap {

struct DecodeConfig {
  int beam_size = 3;
  int max_length = 20;  // generated tokens, END included

  void validate() const {
    if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
    if (max_length < 1) throw ConfigError("max_length must be >= 1");
  }
};

struct ScoredCaption {
  std::vector<int> tokens;  // generated tokens; ends with END unless cut at max_length
  double logprob = 0.0;
};

namespace detail {

inline int argmax_lowest(const Vec& v) {
  int best = 0;
  for (int k = 1; k < v.size(); ++k)
    if (v[k] > v[best]) best = k;
  return best;
}

// Descending log-probability, then lexicographic token order.
inline bool better(const ScoredCaption& a, const ScoredCaption& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  return a.tokens < b.tokens;
}

}  // namespace detail

// Surface tokens (no START/END) of the per-step argmax path.
inline std::vector<int> greedy_decode(const CaptionModelParams& m, const LstmState& start,
                                      const DecodeConfig& cfg) {
  cfg.validate();
  std::vector<int> out;
  LstmState s = start;
  int prev = Vocabulary::kStart;
  for (int step = 0; step < cfg.max_length; ++step) {
    auto [next, logp] = decoder_step(m, s, prev);
    const int tok = detail::argmax_lowest(logp);
    if (tok == Vocabulary::kEnd) break;
    out.push_back(tok);
    s = std::move(next);
    prev = tok;
  }
  return out;
}

inline std::vector<int> greedy_decode(const CaptionModelParams& m, const EmbeddingInputs& init,
                                      const DecodeConfig& cfg) {
  return greedy_decode(m, initial_state(m, init), cfg);
}

// Keeps the k best partial sequences per step (ranked over all expansions);
// expansions that emit END retire to the completed pool, and so do the
// survivors of the final step, cut at max_length. Returns the k best of that
// pool by descending log-probability.
inline std::vector<ScoredCaption> beam_search(const CaptionModelParams& m, const LstmState& start,
                                              const DecodeConfig& cfg) {
  cfg.validate();
  struct Live {
    ScoredCaption cap;
    LstmState state;
  };
  const auto k = static_cast<std::size_t>(cfg.beam_size);
  std::vector<Live> live{{{{}, 0.0}, start}};
  std::vector<ScoredCaption> completed;

  for (int step = 0; step < cfg.max_length && !live.empty(); ++step) {
    std::vector<Live> expansions;
    for (const auto& h : live) {
      const int prev = h.cap.tokens.empty() ? Vocabulary::kStart : h.cap.tokens.back();
      auto [next, logp] = decoder_step(m, h.state, prev);
      for (int v = 0; v < logp.size(); ++v) {
        Live e{h.cap, next};
        e.cap.tokens.push_back(v);
        e.cap.logprob += logp[v];
        expansions.push_back(std::move(e));
      }
    }
    std::sort(expansions.begin(), expansions.end(),
              [](const Live& a, const Live& b) { return detail::better(a.cap, b.cap); });
    if (expansions.size() > k) expansions.resize(k);
    live.clear();
    const bool last = step + 1 == cfg.max_length;
    for (auto& e : expansions) {
      if (last || e.cap.tokens.back() == Vocabulary::kEnd)
        completed.push_back(std::move(e.cap));
      else
        live.push_back(std::move(e));
    }
    std::sort(completed.begin(), completed.end(), detail::better);
    // Later completions score no higher than the best live hypothesis now.
    if (completed.size() >= k && !live.empty() &&
        completed[k - 1].logprob > live.front().cap.logprob)
      break;
  }

  if (completed.size() > k) completed.resize(k);
  return completed;
}

inline std::vector<ScoredCaption> beam_search(const CaptionModelParams& m,
                                              const EmbeddingInputs& init,
                                              const DecodeConfig& cfg) {
  return beam_search(m, initial_state(m, init), cfg);
}

inline std::vector<int> strip_end(std::vector<int> tokens) {
  if (!tokens.empty() && tokens.back() == Vocabulary::kEnd) tokens.pop_back();
  return tokens;
}

}  // namespace kgcap
