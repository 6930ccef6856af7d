#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "kgcap/dataset_io.hpp"
#include "kgcap/embedding_retrofit.hpp"
#include "kgcap/error.hpp"
#include "kgcap/lstm.hpp"
#include "kgcap/rng.hpp"

namespace kgcap {

// Which conditioning inputs feed the decoder's initial step. The order of the
// enumerators is the row order of the ablation table.
enum class InputMode {
  None,           // sequence only, no conditioning step
  Image,          // image embedding (the baseline NIC generator)
  Direct,         // detected objects and directly related terms
  Indirect,       // indirectly related terms
  DirectImage,
  IndirectImage,
  Full,           // image || direct || indirect
};

inline constexpr std::array<InputMode, 7> kAllModes = {
    InputMode::None,        InputMode::Image,         InputMode::Direct, InputMode::Indirect,
    InputMode::DirectImage, InputMode::IndirectImage, InputMode::Full};

struct ModeInputs {
  bool image = false;
  bool direct = false;
  bool indirect = false;

  bool any() const { return image || direct || indirect; }
};

inline ModeInputs mode_inputs(InputMode m) {
  switch (m) {
    case InputMode::None: return {false, false, false};
    case InputMode::Image: return {true, false, false};
    case InputMode::Direct: return {false, true, false};
    case InputMode::Indirect: return {false, false, true};
    case InputMode::DirectImage: return {true, true, false};
    case InputMode::IndirectImage: return {true, false, true};
    case InputMode::Full: return {true, true, true};
  }
  return {};
}

inline std::string_view mode_name(InputMode m) {
  switch (m) {
    case InputMode::None: return "none";
    case InputMode::Image: return "image";
    case InputMode::Direct: return "direct";
    case InputMode::Indirect: return "indirect";
    case InputMode::DirectImage: return "direct+image";
    case InputMode::IndirectImage: return "indirect+image";
    case InputMode::Full: return "direct+indirect+image";
  }
  return "?";
}

inline std::string_view mode_label(InputMode m) {
  switch (m) {
    case InputMode::None: return "none(only seqs input)";
    case InputMode::Image: return "image embedding";
    case InputMode::Direct: return "detected objects and directly related terms";
    case InputMode::Indirect: return "indirectly related terms";
    case InputMode::DirectImage:
      return "detected objects and directly related terms + image embedding";
    case InputMode::IndirectImage: return "indirectly related terms + image embedding";
    case InputMode::Full:
      return "detected objects and directly related terms + indirectly related terms + image "
             "embedding";
  }
  return "?";
}

inline InputMode parse_mode(std::string_view name) {
  for (auto m : kAllModes)
    if (mode_name(m) == name) return m;
  if (name == "baseline-nic" || name == "baseline") return InputMode::Image;
  if (name == "cnet-nic" || name == "full") return InputMode::Full;
  throw ConfigError("unknown mode '" + std::string(name) + "'");
}

struct ModelDims {
  int vocab = 0;
  int embed = 32;
  int hidden = 32;
  int feature = 0;
  int term_dim = 0;
  int encoder_input = 16;
  int encoder_hidden = 16;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

// A term fed to an encoder: its vector, or nullopt for an out-of-store term.
using TermToken = std::optional<Vec>;

// x_k = W_r r_k run through an LSTM; the final hidden state is the encoding.
// The EMPTY and UNK term vectors are fixed at initialisation and not trained.
struct TermEncoderParams {
  Mat Wr;  // encoder_input x term_dim
  LstmParams lstm;
  Vec empty_term;
  Vec unk_term;

  static TermEncoderParams zeros(int term_dim, int input, int hidden) {
    return {Mat::Zero(input, term_dim), LstmParams::zeros(input, hidden), Vec::Zero(term_dim),
            Vec::Zero(term_dim)};
  }

  int term_dim() const { return static_cast<int>(Wr.cols()); }
  int hidden_size() const { return lstm.hidden_size(); }

  template <class Self, class F>
  static void visit_impl(Self& self, F&& f) {
    f("Wr", self.Wr);
    self.lstm.visit([&](const char* n, auto& t) { f(std::string("lstm.") + n, t); });
  }
  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }
};

struct CaptionModelParams {
  InputMode mode = InputMode::Image;
  ModelDims dims;
  Mat We;  // embed x vocab; column s is the embedding of token s
  LstmParams decoder;
  Mat Wo;  // vocab x hidden
  Vec bo;
  Mat P;  // embed x conditioning width; empty in None mode
  Vec bp;
  std::optional<TermEncoderParams> enc_direct;
  std::optional<TermEncoderParams> enc_indirect;

  int condition_width() const {
    auto in = mode_inputs(mode);
    return (in.image ? dims.feature : 0) + (in.direct ? dims.encoder_hidden : 0) +
           (in.indirect ? dims.encoder_hidden : 0);
  }

  static CaptionModelParams zeros(InputMode mode, const ModelDims& d) {
    CaptionModelParams m;
    m.mode = mode;
    m.dims = d;
    auto in = mode_inputs(mode);
    m.We = Mat::Zero(d.embed, d.vocab);
    m.decoder = LstmParams::zeros(d.embed, d.hidden);
    m.Wo = Mat::Zero(d.vocab, d.hidden);
    m.bo = Vec::Zero(d.vocab);
    const int width = m.condition_width();
    m.P = Mat::Zero(in.any() ? d.embed : 0, width);
    m.bp = Vec::Zero(in.any() ? d.embed : 0);
    if (in.direct)
      m.enc_direct = TermEncoderParams::zeros(d.term_dim, d.encoder_input, d.encoder_hidden);
    if (in.indirect)
      m.enc_indirect = TermEncoderParams::zeros(d.term_dim, d.encoder_input, d.encoder_hidden);
    return m;
  }

  // Visits every trainable tensor in a fixed order.
  template <class Self, class F>
  static void visit_impl(Self& self, F&& f) {
    f(std::string("We"), self.We);
    self.decoder.visit([&](const char* n, auto& t) { f(std::string("decoder.") + n, t); });
    f(std::string("Wo"), self.Wo);
    f(std::string("bo"), self.bo);
    if (mode_inputs(self.mode).any()) {
      f(std::string("P"), self.P);
      f(std::string("bp"), self.bp);
    }
    if (self.enc_direct)
      self.enc_direct->visit([&](const std::string& n, auto& t) { f("enc_direct." + n, t); });
    if (self.enc_indirect)
      self.enc_indirect->visit([&](const std::string& n, auto& t) { f("enc_indirect." + n, t); });
  }
  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  double squared_norm() const {
    double s = 0.0;
    visit([&](const std::string&, const auto& t) { s += t.squaredNorm(); });
    return s;
  }

  CaptionModelParams zeros_like() const {
    CaptionModelParams z = *this;
    z.visit([](const std::string&, auto& t) { t.setZero(); });
    return z;
  }
};

// y += alpha * x over matching trainable tensors.
inline void axpy_params(CaptionModelParams& y, double alpha, const CaptionModelParams& x) {
  std::vector<const double*> src;
  x.visit([&](const std::string&, const auto& t) { src.push_back(t.data()); });
  std::size_t k = 0;
  y.visit([&](const std::string&, auto& t) {
    const double* s = src.at(k++);
    for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] += alpha * s[j];
  });
}

inline void scale_params(CaptionModelParams& y, double alpha) {
  y.visit([&](const std::string&, auto& t) { t *= alpha; });
}

// Conditioning inputs of one image: the feature vector a and the ranked
// direct/indirect term sequences that the encoders turn into d and i.
struct ConditionInputs {
  Vec image;
  std::vector<TermToken> direct;
  std::vector<TermToken> indirect;
};

struct Example {
  ConditionInputs cond;
  std::vector<int> tokens;  // START ... END
};

inline std::vector<TermToken> lookup_terms(const std::vector<Term>& terms,
                                           const VectorStore& store) {
  std::vector<TermToken> out;
  out.reserve(terms.size());
  for (const auto& t : terms) {
    if (const auto* v = store.find(t))
      out.emplace_back(*v);
    else
      out.emplace_back(std::nullopt);
  }
  return out;
}

namespace detail {

inline Vec resolve_term(const TermEncoderParams& enc, const TermToken& tok) {
  return tok ? *tok : enc.unk_term;
}

struct EncoderTrace {
  std::vector<Vec> inputs;  // r_k as fed (after EMPTY/UNK substitution)
  std::vector<LstmStepCache> steps;
};

inline Vec run_encoder(const TermEncoderParams& enc, std::span<const TermToken> terms,
                       EncoderTrace* trace) {
  std::vector<Vec> inputs;
  if (terms.empty()) {
    inputs.push_back(enc.empty_term);
  } else {
    for (const auto& t : terms) {
      Vec r = resolve_term(enc, t);
      if (r.size() != enc.term_dim()) throw ValidationError("term vector dimension mismatch");
      inputs.push_back(std::move(r));
    }
  }
  LstmState s = LstmState::zeros(enc.hidden_size());
  if (trace) trace->steps.resize(inputs.size());
  for (std::size_t k = 0; k < inputs.size(); ++k)
    s = lstm_step(enc.lstm, enc.Wr * inputs[k], s, trace ? &trace->steps[k] : nullptr);
  if (trace) trace->inputs = std::move(inputs);
  return s.h;
}

inline void encoder_backward(const TermEncoderParams& enc, const EncoderTrace& trace,
                             const Vec& dh_last, TermEncoderParams& grad) {
  Vec dh = dh_last;
  Vec dc = Vec::Zero(enc.hidden_size());
  for (std::size_t k = trace.steps.size(); k-- > 0;) {
    auto g = lstm_step_backward(enc.lstm, trace.steps[k], dh, dc, grad.lstm);
    grad.Wr.noalias() += g.dx * trace.inputs[k].transpose();
    dh = std::move(g.dh_prev);
    dc = std::move(g.dc_prev);
  }
}

inline void check_tokens(const CaptionModelParams& m, const std::vector<int>& tokens) {
  if (tokens.size() < 2 || tokens.front() != Vocabulary::kStart ||
      tokens.back() != Vocabulary::kEnd)
    throw ValidationError("caption must start with START and end with END");
  for (int t : tokens)
    if (t < 0 || t >= m.dims.vocab)
      throw ValidationError("token index " + std::to_string(t) + " outside vocabulary");
}

inline Vec log_softmax(const Vec& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

inline Vec softmax(const Vec& logits) {
  Vec e = (logits.array() - logits.maxCoeff()).exp().matrix();
  return e / e.sum();
}

}  // namespace detail

// Final encoder state for a ranked term list (EMPTY when the list is empty,
// UNK for terms absent from the store).
inline Vec encode_terms(const TermEncoderParams& enc, const std::vector<Term>& terms,
                        const VectorStore& store) {
  auto toks = lookup_terms(terms, store);
  return detail::run_encoder(enc, toks, nullptr);
}

// d and i as produced by the model's encoders, plus the raw image features.
struct EmbeddingInputs {
  Vec a, d, i;
};

inline EmbeddingInputs embed_inputs(const CaptionModelParams& m, const ConditionInputs& cond) {
  auto in = mode_inputs(m.mode);
  EmbeddingInputs e;
  e.a = cond.image;
  if (in.direct) e.d = detail::run_encoder(*m.enc_direct, cond.direct, nullptr);
  if (in.indirect) e.i = detail::run_encoder(*m.enc_indirect, cond.indirect, nullptr);
  return e;
}

inline Vec concat_condition(const CaptionModelParams& m, const EmbeddingInputs& e) {
  auto in = mode_inputs(m.mode);
  Vec c(m.condition_width());
  Eigen::Index at = 0;
  auto put = [&](const Vec& v, int expected, const char* what) {
    if (v.size() != expected)
      throw ValidationError(std::string("conditioning input '") + what + "' has wrong width");
    c.segment(at, v.size()) = v;
    at += v.size();
  };
  if (in.image) put(e.a, m.dims.feature, "image");
  if (in.direct) put(e.d, m.dims.encoder_hidden, "direct");
  if (in.indirect) put(e.i, m.dims.encoder_hidden, "indirect");
  return c;
}

// Decoder state after the conditioning step x_{-1} = P (a||d||i) + b_p, whose
// output is discarded. In None mode the decoder starts from zeros.
inline LstmState initial_state(const CaptionModelParams& m, const EmbeddingInputs& e) {
  LstmState s = LstmState::zeros(m.dims.hidden);
  if (!mode_inputs(m.mode).any()) return s;
  Vec x = m.P * concat_condition(m, e) + m.bp;
  return lstm_step(m.decoder, x, s);
}

inline LstmState initial_state(const CaptionModelParams& m, const ConditionInputs& cond) {
  return initial_state(m, embed_inputs(m, cond));
}

// Feeds `token` and returns the next state with log-probabilities over the
// vocabulary for the following token.
inline std::pair<LstmState, Vec> decoder_step(const CaptionModelParams& m, const LstmState& s,
                                              int token) {
  if (token < 0 || token >= m.dims.vocab) throw ValidationError("token outside vocabulary");
  LstmState next = lstm_step(m.decoder, m.We.col(token), s);
  Vec logits = m.Wo * next.h + m.bo;
  return {std::move(next), detail::log_softmax(logits)};
}

// Probability rows p_1..p_N for a teacher-forced caption.
inline std::vector<Vec> forward_caption(const CaptionModelParams& m, const ConditionInputs& cond,
                                        const std::vector<int>& tokens) {
  detail::check_tokens(m, tokens);
  LstmState s = initial_state(m, cond);
  std::vector<Vec> rows;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    s = lstm_step(m.decoder, m.We.col(tokens[t]), s);
    rows.push_back(detail::softmax(m.Wo * s.h + m.bo));
  }
  return rows;
}

// The plain image-conditioned generator written out directly, without the
// generic concatenation path.
inline std::vector<Vec> forward_baseline(const CaptionModelParams& m, const Vec& image,
                                         const std::vector<int>& tokens) {
  if (m.mode != InputMode::Image) throw ConfigError("forward_baseline needs an image-mode model");
  detail::check_tokens(m, tokens);
  Vec x_init = m.P * image + m.bp;
  LstmState s = lstm_step(m.decoder, x_init, LstmState::zeros(m.dims.hidden));
  std::vector<Vec> rows;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    s = lstm_step(m.decoder, m.We.col(tokens[t]), s);
    rows.push_back(detail::softmax(m.Wo * s.h + m.bo));
  }
  return rows;
}

namespace detail {

// Negative log-likelihood of one caption; accumulates its gradient into
// `grad` when given.
inline double caption_nll(const CaptionModelParams& m, const Example& ex,
                          CaptionModelParams* grad) {
  check_tokens(m, ex.tokens);
  const auto in = mode_inputs(m.mode);

  EncoderTrace trace_d, trace_i;
  EmbeddingInputs e;
  e.a = ex.cond.image;
  if (in.direct) e.d = run_encoder(*m.enc_direct, ex.cond.direct, grad ? &trace_d : nullptr);
  if (in.indirect)
    e.i = run_encoder(*m.enc_indirect, ex.cond.indirect, grad ? &trace_i : nullptr);

  LstmState s = LstmState::zeros(m.dims.hidden);
  Vec cond;
  LstmStepCache init_cache;
  if (in.any()) {
    cond = concat_condition(m, e);
    s = lstm_step(m.decoder, m.P * cond + m.bp, s, grad ? &init_cache : nullptr);
  }

  const std::size_t steps = ex.tokens.size() - 1;
  std::vector<LstmStepCache> caches(grad ? steps : 0);
  std::vector<Vec> probs(grad ? steps : 0);
  std::vector<Vec> hiddens(grad ? steps : 0);
  double nll = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    s = lstm_step(m.decoder, m.We.col(ex.tokens[t]), s, grad ? &caches[t] : nullptr);
    Vec logp = log_softmax(m.Wo * s.h + m.bo);
    nll -= logp[ex.tokens[t + 1]];
    if (grad) {
      probs[t] = logp.array().exp().matrix();
      hiddens[t] = s.h;
    }
  }
  if (!std::isfinite(nll)) throw NumericError("non-finite caption likelihood");
  if (!grad) return nll;

  Vec dh_next = Vec::Zero(m.dims.hidden);
  Vec dc_next = Vec::Zero(m.dims.hidden);
  for (std::size_t t = steps; t-- > 0;) {
    Vec dlogits = probs[t];
    dlogits[ex.tokens[t + 1]] -= 1.0;
    grad->Wo.noalias() += dlogits * hiddens[t].transpose();
    grad->bo += dlogits;
    Vec dh = m.Wo.transpose() * dlogits + dh_next;
    auto g = lstm_step_backward(m.decoder, caches[t], dh, dc_next, grad->decoder);
    grad->We.col(ex.tokens[t]) += g.dx;
    dh_next = std::move(g.dh_prev);
    dc_next = std::move(g.dc_prev);
  }
  if (in.any()) {
    auto g = lstm_step_backward(m.decoder, init_cache, dh_next, dc_next, grad->decoder);
    grad->P.noalias() += g.dx * cond.transpose();
    grad->bp += g.dx;
    Vec dcond = m.P.transpose() * g.dx;
    Eigen::Index at = in.image ? m.dims.feature : 0;
    const int eh = m.dims.encoder_hidden;
    if (in.direct) {
      encoder_backward(*m.enc_direct, trace_d, dcond.segment(at, eh), *grad->enc_direct);
      at += eh;
    }
    if (in.indirect)
      encoder_backward(*m.enc_indirect, trace_i, dcond.segment(at, eh), *grad->enc_indirect);
  }
  return nll;
}

}  // namespace detail

// Mean caption negative log-likelihood over the batch plus lambda * ||theta||^2.
inline double loss(const CaptionModelParams& m, std::span<const Example> batch,
                   double lambda_theta) {
  if (batch.empty()) throw ValidationError("loss over an empty batch");
  double total = 0.0;
  for (const auto& ex : batch) total += detail::caption_nll(m, ex, nullptr);
  return total / static_cast<double>(batch.size()) + lambda_theta * m.squared_norm();
}

struct LossAndGradients {
  double loss = 0.0;
  double data_loss = 0.0;  // mean NLL without the penalty
  CaptionModelParams grad;
};

inline LossAndGradients loss_and_gradients(const CaptionModelParams& m,
                                           std::span<const Example> batch, double lambda_theta) {
  if (batch.empty()) throw ValidationError("gradients over an empty batch");
  LossAndGradients out{0.0, 0.0, m.zeros_like()};
  double total = 0.0;
  for (const auto& ex : batch) total += detail::caption_nll(m, ex, &out.grad);
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.data_loss = total * inv;
  out.loss = out.data_loss + lambda_theta * m.squared_norm();
  scale_params(out.grad, inv);
  if (lambda_theta != 0.0) axpy_params(out.grad, 2.0 * lambda_theta, m);
  return out;
}

inline CaptionModelParams gradients(const CaptionModelParams& m, std::span<const Example> batch,
                                    double lambda_theta) {
  return loss_and_gradients(m, batch, lambda_theta).grad;
}

struct TrainConfig {
  double initial_lr = 2.0;
  double decay = 1.0;  // learning-rate factor applied once per epoch
  double lr_shrink = 5.0;
  std::vector<int> milestones;  // empty: 1/4, 1/2 and 3/4 of max_iterations
  int batch_size = 32;
  int max_iterations = 2000;
  double lambda_theta = 1e-4;
  double clip_norm = 5.0;  // global gradient-norm clip; 0 disables
  double init_scale = 0.08;
  std::uint64_t rng_seed = 1;

  void validate() const {
    if (!(initial_lr > 0.0)) throw ConfigError("initial_lr must be positive");
    if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("decay must lie in (0,1]");
    if (!(lr_shrink >= 1.0)) throw ConfigError("lr_shrink must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_iterations < 0) throw ConfigError("max_iterations must be >= 0");
    if (!(lambda_theta >= 0.0)) throw ConfigError("lambda_theta must be >= 0");
    if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
    if (!std::is_sorted(milestones.begin(), milestones.end()))
      throw ConfigError("milestones must be sorted");
  }

  std::vector<int> effective_milestones() const {
    if (!milestones.empty()) return milestones;
    return {max_iterations / 4, max_iterations / 2, 3 * max_iterations / 4};
  }

  double learning_rate(int iteration, std::uint64_t epoch) const {
    double lr = initial_lr * std::pow(decay, static_cast<double>(epoch));
    for (int m : effective_milestones())
      if (iteration >= m && m > 0) lr /= lr_shrink;
    return lr;
  }
};

// Uniform(-scale, scale) initialisation in visit order, then the fixed
// EMPTY/UNK term vectors.
inline CaptionModelParams init_params(InputMode mode, const ModelDims& dims, double scale,
                                      std::uint64_t seed) {
  if (dims.vocab < Vocabulary::kReserved) throw ValidationError("vocabulary too small");
  auto in = mode_inputs(mode);
  if (in.image && dims.feature < 1) throw ValidationError("image mode needs feature dim");
  if ((in.direct || in.indirect) && dims.term_dim < 1)
    throw ValidationError("term modes need a term vector dimension");
  auto m = CaptionModelParams::zeros(mode, dims);
  Rng rng(seed);
  m.visit([&](const std::string&, auto& t) {
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = rng.uniform(-scale, scale);
  });
  for (auto* enc : {&m.enc_direct, &m.enc_indirect}) {
    if (!*enc) continue;
    for (auto* v : {&(*enc)->empty_term, &(*enc)->unk_term})
      for (Eigen::Index k = 0; k < v->size(); ++k) (*v)[k] = rng.uniform(-1.0, 1.0);
  }
  return m;
}

struct TrainResult {
  CaptionModelParams params;
  std::vector<double> loss_curve;  // per-iteration batch loss, penalty included
};

using TrainObserver = std::function<void(int iteration, double loss, double lr)>;

// Mini-batch SGD with seeded shuffling. A pretrained encoder, when given, is
// copied into both the direct and the indirect encoder slots.
inline TrainResult train(const std::vector<Example>& data, InputMode mode, const ModelDims& dims,
                         const TrainConfig& cfg, const TermEncoderParams* pretrained = nullptr,
                         const TrainObserver& observe = {}) {
  cfg.validate();
  if (data.empty()) throw ValidationError("training set is empty");
  TrainResult res{init_params(mode, dims, cfg.init_scale, cfg.rng_seed), {}};
  if (pretrained) {
    for (auto* enc : {&res.params.enc_direct, &res.params.enc_indirect}) {
      if (!*enc) continue;
      if (pretrained->term_dim() != dims.term_dim ||
          pretrained->hidden_size() != dims.encoder_hidden ||
          pretrained->lstm.input_size() != dims.encoder_input)
        throw ValidationError("pretrained encoder dimensions do not match the model");
      *enc = *pretrained;
    }
  }
  if (cfg.max_iterations == 0) return res;

  BatchStream stream(data.size(), cfg.batch_size, cfg.rng_seed);
  std::vector<Example> batch;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    const auto epoch = stream.epoch();
    batch.clear();
    for (auto idx : stream.next()) batch.push_back(data[idx]);
    auto lg = loss_and_gradients(res.params, batch, cfg.lambda_theta);
    if (!std::isfinite(lg.loss)) {
      std::ostringstream msg;
      msg << "training diverged at iteration " << it << " (loss " << lg.loss << ")";
      throw NumericError(msg.str());
    }
    res.loss_curve.push_back(lg.loss);
    double scale = 1.0;
    if (cfg.clip_norm > 0.0) {
      const double norm = std::sqrt(lg.grad.squared_norm());
      if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
    }
    const double lr = cfg.learning_rate(it, epoch);
    axpy_params(res.params, -lr * scale, lg.grad);
    if (observe) observe(it, lg.loss, lr);
  }
  return res;
}

// Mean per-token cross-entropy of the data (no penalty).
inline double per_token_cross_entropy(const CaptionModelParams& m,
                                      std::span<const Example> data) {
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : data) {
    nll += detail::caption_nll(m, ex, nullptr);
    tokens += ex.tokens.size() - 1;
  }
  return tokens ? nll / static_cast<double>(tokens) : 0.0;
}

struct PretrainResult {
  TermEncoderParams encoder;
  CaptionModelParams model;  // the full pretraining network (LSTM2 and friends)
  std::vector<double> loss_curve;
};

// Term-encoder pretraining: the examples' `direct` sequences are the related
// terms, encoded by LSTM1; concat(a, final state) conditions LSTM2, which is
// trained to emit the caption. The encoder is what gets reused.
inline PretrainResult pretrain_term_encoder(const std::vector<Example>& data,
                                            const ModelDims& dims, const TrainConfig& cfg,
                                            const TrainObserver& observe = {}) {
  if (data.empty()) throw ValidationError("pretraining set is empty");
  auto res = train(data, InputMode::DirectImage, dims, cfg, nullptr, observe);
  return {*res.params.enc_direct, std::move(res.params), std::move(res.loss_curve)};
}

}  // namespace kgcap
