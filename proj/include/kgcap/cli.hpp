#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kgcap/caption_model.hpp"
#include "kgcap/checkpoint.hpp"
#include "kgcap/dataset_io.hpp"
#include "kgcap/decoding.hpp"
#include "kgcap/embedding_retrofit.hpp"
#include "kgcap/error.hpp"
#include "kgcap/kg_store.hpp"
#include "kgcap/metrics.hpp"
#include "kgcap/rng.hpp"
#include "kgcap/term_expansion.hpp"

namespace kgcap::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

struct Paths {
  std::string graph, vectors, train, test, terms, encoder, model, results;
  std::string out = ".";
};

struct RetrofitSettings {
  std::string beta_policy = "inverse-degree";  // inverse-degree | constant | edge-weight | zero
  double beta = 1.0;
  double alpha = 1.0;
  int sweeps = 10;
  double tolerance = 1e-8;

  RetrofitConfig to_config() const {
    RetrofitConfig cfg;
    const double a = alpha;
    cfg.alpha = [a](const Term&) { return a; };
    if (beta_policy == "inverse-degree")
      cfg.beta = BetaPolicy::inverse_degree();
    else if (beta_policy == "constant")
      cfg.beta = BetaPolicy::constant(beta);
    else if (beta_policy == "edge-weight")
      cfg.beta = BetaPolicy::edge_weight();
    else if (beta_policy == "zero")
      cfg.beta = BetaPolicy::constant(0.0);
    else
      throw ConfigError("unknown beta policy '" + beta_policy + "'");
    cfg.max_iterations = sweeps;
    cfg.tolerance = tolerance;
    return cfg;
  }
};

struct RunConfig {
  std::uint64_t seed = 1;
  InputMode mode = InputMode::Full;
  Paths paths;
  RetrofitSettings retrofit;
  ExpansionConfig expansion;
  ModelDims dims;  // vocab, feature and term_dim come from the data
  int min_count = 4;
  TrainConfig train;
  TrainConfig pretrain;
  DecodeConfig decode;
  bool parallel = false;

  void validate() const {
    retrofit.to_config();
    if (retrofit.sweeps < 1) throw ConfigError("retrofit.sweeps must be >= 1");
    if (retrofit.beta_policy == "constant" && !(retrofit.beta >= 0.0))
      throw ConfigError("retrofit.beta must be >= 0");
    expansion.validate();
    train.validate();
    pretrain.validate();
    decode.validate();
    if (min_count < 1) throw ConfigError("vocabulary.min_count must be >= 1");
    if (dims.embed < 1 || dims.hidden < 1 || dims.encoder_input < 1 || dims.encoder_hidden < 1)
      throw ConfigError("model dimensions must be positive");
  }
};

namespace detail {

inline json train_json(const TrainConfig& t) {
  return {{"initial_lr", t.initial_lr},     {"decay", t.decay},
          {"lr_shrink", t.lr_shrink},       {"milestones", t.milestones},
          {"batch_size", t.batch_size},     {"max_iterations", t.max_iterations},
          {"lambda_theta", t.lambda_theta}, {"clip_norm", t.clip_norm},
          {"init_scale", t.init_scale}};
}

inline void check_keys(const nlohmann::json& j, const std::string& section,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, _] : j.items())
    if (!ok.count(k))
      throw ConfigError("unknown config key '" + (section.empty() ? k : section + "." + k) + "'");
}

template <class T>
void take(const nlohmann::json& j, const char* key, T& dst) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    dst = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

inline void apply_train(const nlohmann::json& j, const std::string& section, TrainConfig& t) {
  check_keys(j, section,
             {"initial_lr", "decay", "lr_shrink", "milestones", "batch_size", "max_iterations",
              "lambda_theta", "clip_norm", "init_scale"});
  take(j, "initial_lr", t.initial_lr);
  take(j, "decay", t.decay);
  take(j, "lr_shrink", t.lr_shrink);
  take(j, "milestones", t.milestones);
  take(j, "batch_size", t.batch_size);
  take(j, "max_iterations", t.max_iterations);
  take(j, "lambda_theta", t.lambda_theta);
  take(j, "clip_norm", t.clip_norm);
  take(j, "init_scale", t.init_scale);
}

inline std::string resolve(const std::string& p, const fs::path& base) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

}  // namespace detail

// Effective configuration as JSON; the hash of this (minus the output path)
// identifies a run.
inline json config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["mode"] = std::string(mode_name(c.mode));
  j["paths"] = {{"graph", c.paths.graph},     {"vectors", c.paths.vectors},
                {"train", c.paths.train},     {"test", c.paths.test},
                {"terms", c.paths.terms},     {"encoder", c.paths.encoder},
                {"model", c.paths.model},     {"results", c.paths.results},
                {"out", c.paths.out}};
  j["retrofit"] = {{"beta_policy", c.retrofit.beta_policy}, {"beta", c.retrofit.beta},
                   {"alpha", c.retrofit.alpha},             {"sweeps", c.retrofit.sweeps},
                   {"tolerance", c.retrofit.tolerance}};
  j["expansion"] = {{"threshold", c.expansion.detection_threshold},
                    {"per_object_k", c.expansion.per_object_k},
                    {"scene_k", c.expansion.scene_k},
                    {"hop_limit", c.expansion.hop_limit}};
  j["model"] = {{"embed", c.dims.embed},
                {"hidden", c.dims.hidden},
                {"encoder_input", c.dims.encoder_input},
                {"encoder_hidden", c.dims.encoder_hidden}};
  j["vocabulary"] = {{"min_count", c.min_count}};
  j["train"] = detail::train_json(c.train);
  j["pretrain"] = detail::train_json(c.pretrain);
  j["decode"] = {{"beam", c.decode.beam_size}, {"max_length", c.decode.max_length}};
  j["ablation"] = {{"parallel", c.parallel}};
  return j;
}

inline std::string config_hash(const RunConfig& c) {
  auto j = config_to_json(c);
  j["paths"].erase("out");
  j["ablation"].erase("parallel");  // never changes outputs
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

// Overlays a JSON config onto `c`. Relative paths resolve against `base_dir`.
// Unknown keys are rejected so typos do not silently fall back to defaults.
inline void apply_config_json(const nlohmann::json& j, RunConfig& c, const fs::path& base_dir) {
  using detail::take;
  detail::check_keys(j, "",
                     {"seed", "mode", "paths", "retrofit", "expansion", "model", "vocabulary",
                      "train", "pretrain", "decode", "ablation"});
  take(j, "seed", c.seed);
  if (j.contains("mode")) {
    std::string m;
    take(j, "mode", m);
    c.mode = parse_mode(m);
  }
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    detail::check_keys(p, "paths",
                       {"graph", "vectors", "train", "test", "terms", "encoder", "model",
                        "results", "out"});
    for (auto [key, dst] : std::initializer_list<std::pair<const char*, std::string*>>{
             {"graph", &c.paths.graph},
             {"vectors", &c.paths.vectors},
             {"train", &c.paths.train},
             {"test", &c.paths.test},
             {"terms", &c.paths.terms},
             {"encoder", &c.paths.encoder},
             {"model", &c.paths.model},
             {"results", &c.paths.results},
             {"out", &c.paths.out}}) {
      take(p, key, *dst);
      if (p.contains(key)) *dst = detail::resolve(*dst, base_dir);
    }
  }
  if (j.contains("retrofit")) {
    const auto& r = j["retrofit"];
    detail::check_keys(r, "retrofit", {"beta_policy", "beta", "alpha", "sweeps", "tolerance"});
    take(r, "beta_policy", c.retrofit.beta_policy);
    take(r, "beta", c.retrofit.beta);
    take(r, "alpha", c.retrofit.alpha);
    take(r, "sweeps", c.retrofit.sweeps);
    take(r, "tolerance", c.retrofit.tolerance);
  }
  if (j.contains("expansion")) {
    const auto& e = j["expansion"];
    detail::check_keys(e, "expansion", {"threshold", "per_object_k", "scene_k", "hop_limit"});
    take(e, "threshold", c.expansion.detection_threshold);
    take(e, "per_object_k", c.expansion.per_object_k);
    take(e, "scene_k", c.expansion.scene_k);
    take(e, "hop_limit", c.expansion.hop_limit);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::check_keys(m, "model", {"embed", "hidden", "encoder_input", "encoder_hidden"});
    take(m, "embed", c.dims.embed);
    take(m, "hidden", c.dims.hidden);
    take(m, "encoder_input", c.dims.encoder_input);
    take(m, "encoder_hidden", c.dims.encoder_hidden);
  }
  if (j.contains("vocabulary")) {
    detail::check_keys(j["vocabulary"], "vocabulary", {"min_count"});
    take(j["vocabulary"], "min_count", c.min_count);
  }
  if (j.contains("train")) detail::apply_train(j["train"], "train", c.train);
  c.pretrain = c.train;
  if (j.contains("pretrain")) detail::apply_train(j["pretrain"], "pretrain", c.pretrain);
  if (j.contains("decode")) {
    detail::check_keys(j["decode"], "decode", {"beam", "max_length"});
    take(j["decode"], "beam", c.decode.beam_size);
    take(j["decode"], "max_length", c.decode.max_length);
  }
  if (j.contains("ablation")) {
    detail::check_keys(j["ablation"], "ablation", {"parallel"});
    take(j["ablation"], "parallel", c.parallel);
  }
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  RunConfig c;
  apply_config_json(j, c, fs::absolute(path).parent_path());
  return c;
}

// Writes through a temporary file and renames it into place, so readers never
// see a half-written output.
inline void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

class Logger {
 public:
  enum Level { kQuiet = 0, kInfo = 1, kDebug = 2 };

  Logger(std::ostream& err, Level level) : err_(&err), level_(level) {}

  // KGCAP_LOG: quiet|info|debug (default info).
  static Level level_from_env() {
    const char* v = std::getenv("KGCAP_LOG");
    if (!v) return kInfo;
    const std::string s(v);
    if (s == "quiet" || s == "0" || s == "off") return kQuiet;
    if (s == "debug" || s == "2") return kDebug;
    return kInfo;
  }

  void info(const std::string& msg) const {
    if (level_ >= kInfo) *err_ << "[kgcap] " << msg << '\n';
  }
  void debug(const std::string& msg) const {
    if (level_ >= kDebug) *err_ << "[kgcap:debug] " << msg << '\n';
  }
  Level level() const { return level_; }

 private:
  std::ostream* err_;
  Level level_;
};

// Ranked term lists per (split, image_id).
struct ImageTerms {
  std::vector<Term> objects, direct, indirect, scene;
};
using TermTable = std::map<std::pair<std::string, std::string>, ImageTerms>;

namespace detail {

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return in;
}

inline std::string read_file(const std::string& path) {
  auto in = open_input(path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline std::vector<std::string> term_strings(const std::vector<Term>& ts) {
  std::vector<std::string> out;
  for (const auto& t : ts) out.push_back(t.str());
  return out;
}

inline std::vector<Term> terms_from(const nlohmann::json& j) {
  std::vector<Term> out;
  for (const auto& s : j) out.emplace_back(s.get<std::string>());
  return out;
}

inline Vec feature_vec(const ImageRecord& r) {
  return Eigen::Map<const Vec>(r.feature.data(), static_cast<Eigen::Index>(r.feature.size()));
}

}  // namespace detail

inline json term_row(const std::string& split, const std::string& id, const TermSets& ts) {
  json j;
  j["split"] = split;
  j["image_id"] = id;
  j["objects"] = detail::term_strings({ts.objects.begin(), ts.objects.end()});
  j["direct"] = detail::term_strings(ts.direct_ranked);
  j["indirect"] = detail::term_strings(ts.indirect_ranked);
  j["scene"] = detail::term_strings(ts.scene_ranked);
  return j;
}

inline TermTable expand_dataset(const Dataset& ds, const KnowledgeGraph& g,
                                const VectorStore& store, const ExpansionConfig& cfg,
                                std::string* jsonl = nullptr) {
  TermTable out;
  for (const auto& r : ds.records) {
    auto ts = build_term_sets(g, store, r.detections, cfg);
    if (jsonl) *jsonl += term_row(ds.split, r.image_id, ts).dump() + "\n";
    out[{ds.split, r.image_id}] = {{ts.objects.begin(), ts.objects.end()},
                                   ts.direct_ranked,
                                   ts.indirect_ranked,
                                   ts.scene_ranked};
  }
  return out;
}

inline TermTable load_terms(std::istream& in) {
  TermTable out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      ImageTerms t{detail::terms_from(j.at("objects")), detail::terms_from(j.at("direct")),
                   detail::terms_from(j.at("indirect")), detail::terms_from(j.at("scene"))};
      out[{j.at("split").get<std::string>(), j.at("image_id").get<std::string>()}] = std::move(t);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(e.what(), lineno);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(e.what(), lineno);
    }
  }
  return out;
}

// Conditioning inputs of one record. With `merged`, the direct slot carries
// D followed by I, which is what the encoder pretraining consumes.
inline ConditionInputs condition_for(const ImageRecord& r, const std::string& split,
                                     InputMode mode, const TermTable* terms,
                                     const VectorStore* store, bool merged = false) {
  ConditionInputs c;
  c.image = detail::feature_vec(r);
  const auto in = mode_inputs(mode);
  if (!in.direct && !in.indirect) return c;
  if (!terms || !store) throw ConfigError("this mode needs expanded terms and term vectors");
  auto it = terms->find({split, r.image_id});
  if (it == terms->end())
    throw ValidationError("no expanded terms for " + split + " image '" + r.image_id + "'");
  const auto& t = it->second;
  if (in.direct) {
    auto seq = t.direct;
    if (merged) seq.insert(seq.end(), t.indirect.begin(), t.indirect.end());
    c.direct = lookup_terms(seq, *store);
  }
  if (in.indirect) c.indirect = lookup_terms(t.indirect, *store);
  return c;
}

// One example per (record, reference).
inline std::vector<Example> make_examples(const Dataset& ds, InputMode mode, const Vocabulary& v,
                                          const TermTable* terms, const VectorStore* store,
                                          bool merged = false) {
  std::vector<Example> out;
  for (const auto& r : ds.records) {
    auto cond = condition_for(r, ds.split, mode, terms, store, merged);
    for (const auto& ref : r.references) out.push_back({cond, encode_caption(v, ref)});
  }
  if (out.empty()) throw ValidationError("dataset has no reference captions to train on");
  return out;
}

inline ModelDims model_dims(const RunConfig& c, const Vocabulary& v, const Dataset& ds,
                            const VectorStore* store) {
  ModelDims d = c.dims;
  d.vocab = v.size();
  d.feature = ds.feature_dim;
  d.term_dim = store ? store->dim() : 0;
  return d;
}

inline std::string loss_csv(const std::vector<double>& curve) {
  std::string s = "iteration,loss\n";
  for (std::size_t k = 0; k < curve.size(); ++k)
    s += std::to_string(k) + "," + format_double(curve[k]) + "\n";
  return s;
}

inline TrainObserver progress(const Logger& log, const std::string& what, int total) {
  return [&log, what, total](int it, double loss, double lr) {
    if (it % 100 == 0 || it + 1 == total)
      log.debug(what + " iteration " + std::to_string(it) + " loss " + format_double(loss) +
                " lr " + format_double(lr));
  };
}

struct CaptionOutput {
  std::string captions_jsonl;
  std::string results_jsonl;
  metrics::EvalCorpus corpus;
};

inline CaptionOutput caption_dataset(const CaptionModelParams& m, const Vocabulary& v,
                                     const Dataset& ds, const TermTable* terms,
                                     const VectorStore* store, const DecodeConfig& dc) {
  if (ds.feature_dim != 0 && ds.feature_dim != m.dims.feature && mode_inputs(m.mode).image)
    throw ValidationError("test feature dimension differs from the model's");
  CaptionOutput out;
  for (const auto& r : ds.records) {
    auto cond = condition_for(r, ds.split, m.mode, terms, store);
    auto beams = beam_search(m, embed_inputs(m, cond), dc);
    json row;
    row["image_id"] = r.image_id;
    auto caps = json::array();
    for (const auto& b : beams)
      caps.push_back({{"text", decode_caption(v, b.tokens)}, {"logprob", b.logprob}});
    row["captions"] = std::move(caps);
    out.captions_jsonl += row.dump() + "\n";
    const std::string best = beams.empty() ? "" : decode_caption(v, beams.front().tokens);
    json res;
    res["image_id"] = r.image_id;
    res["candidate"] = best;
    res["references"] = r.references;
    out.results_jsonl += res.dump() + "\n";
    out.corpus.push_back(metrics::make_item(r.image_id, best, r.references));
  }
  return out;
}

inline metrics::EvalCorpus load_results(std::istream& in) {
  metrics::EvalCorpus out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back(metrics::make_item(j.at("image_id").get<std::string>(),
                                       j.at("candidate").get<std::string>(),
                                       j.at("references").get<std::vector<std::string>>()));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(e.what(), lineno);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(e.what(), lineno);
    }
  }
  return out;
}

inline std::string report_text(const metrics::MetricReport& r) {
  std::string s = metrics::table_header() + "\n" + metrics::table_row(r) + "\n";
  s += "images: " + std::to_string(r.images) +
       "; B@N and R in percent; C is CIDEr-D on its native 0-10 scale (x100 = " +
       format_double(100 * r.cider_d) + "); M (METEOR) is not computed\n";
  return s;
}

// The ablation rows in table order; the CNN fine-tuning row has no
// counterpart here because image features are ingested, not learned.
struct AblationPlan {
  std::vector<InputMode> modes{kAllModes.begin(), kAllModes.end()};
};

struct AblationRow {
  InputMode mode;
  std::string label;
  double final_loss = 0.0;
  metrics::MetricReport report;
};

inline constexpr const char* kAblationFootnote =
    "Excluded: the \"+ fine tune CNN\" row. Image features are ingested, so no CNN is trained.";

inline json ablation_row_json(const AblationRow& r) {
  json j;
  j["mode"] = std::string(mode_name(r.mode));
  j["label"] = r.label;
  j["final_loss"] = r.final_loss;
  j["report"] = metrics::report_to_json(r.report);
  return j;
}

inline std::string ablation_text(const std::vector<AblationRow>& rows) {
  std::size_t width = 0;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  std::string s = metrics::table_header(width) + "\n";
  for (const auto& r : rows) s += metrics::table_row(r.report, r.label, width) + "\n";
  s += std::string(kAblationFootnote) + "\n";
  s += "B@N and R in percent; C is CIDEr-D on its native 0-10 scale; M (METEOR) is not computed.\n";
  return s;
}

// Retrofits the vectors, expands terms for both splits, pretrains one term
// encoder, then trains, decodes and scores every mode of the plan with the
// same seed and budget. `on_row` sees the finished prefix after each mode.
inline std::vector<AblationRow> run_ablation(
    const AblationPlan& plan, const RunConfig& cfg, const Logger& log,
    const std::function<void(const std::vector<AblationRow>&)>& on_row = {}) {
  auto graph_in = detail::open_input(cfg.paths.graph);
  auto graph = ingest_edges(graph_in);
  auto vec_in = detail::open_input(cfg.paths.vectors);
  auto base = load_vectors(vec_in);
  auto store = retrofit(base, graph, cfg.retrofit.to_config());
  auto train_in = detail::open_input(cfg.paths.train);
  auto train_ds = load_dataset(train_in, "train");
  auto test_in = detail::open_input(cfg.paths.test);
  auto test_ds = load_dataset(test_in, "test");
  if (train_ds.empty() || test_ds.empty())
    throw ValidationError("ablation needs non-empty train and test splits");

  TermTable terms = expand_dataset(train_ds, graph, store, cfg.expansion);
  terms.merge(expand_dataset(test_ds, graph, store, cfg.expansion));
  auto vocab = build_vocabulary(train_ds, cfg.min_count);
  const auto dims = model_dims(cfg, vocab, train_ds, &store);

  std::optional<TermEncoderParams> encoder;
  if (std::any_of(plan.modes.begin(), plan.modes.end(), [](InputMode m) {
        auto in = mode_inputs(m);
        return in.direct || in.indirect;
      })) {
    log.info("ablate: pretraining the term encoder");
    auto data = make_examples(train_ds, InputMode::DirectImage, vocab, &terms, &store, true);
    encoder = pretrain_term_encoder(data, dims, cfg.pretrain).encoder;
  }

  auto run_mode = [&](InputMode mode) {
    auto data = make_examples(train_ds, mode, vocab, &terms, &store);
    auto trained = train(data, mode, dims, cfg.train, encoder ? &*encoder : nullptr);
    auto caps = caption_dataset(trained.params, vocab, test_ds, &terms, &store, cfg.decode);
    AblationRow row{mode, std::string(mode_label(mode)),
                    trained.loss_curve.empty() ? 0.0 : trained.loss_curve.back(),
                    metrics::evaluate(caps.corpus)};
    return row;
  };

  std::vector<AblationRow> rows;
  if (cfg.parallel) {
    std::vector<std::future<AblationRow>> jobs;
    for (auto m : plan.modes) jobs.push_back(std::async(std::launch::async, run_mode, m));
    for (auto& j : jobs) {
      rows.push_back(j.get());
      log.info("ablate: finished " + std::string(mode_name(rows.back().mode)));
      if (on_row) on_row(rows);
    }
  } else {
    for (auto m : plan.modes) {
      log.info("ablate: training " + std::string(mode_name(m)));
      rows.push_back(run_mode(m));
      if (on_row) on_row(rows);
    }
  }
  return rows;
}

namespace detail {

// Which flags a subcommand accepts.
enum Flag : unsigned {
  kGraph = 1u << 0,
  kVectors = 1u << 1,
  kTrain = 1u << 2,
  kTest = 1u << 3,
  kTerms = 1u << 4,
  kEncoder = 1u << 5,
  kModel = 1u << 6,
  kResults = 1u << 7,
  kThreshold = 1u << 8,
  kBeam = 1u << 9,
  kMode = 1u << 10,
  kIterations = 1u << 11,
  kRetrofitFlags = 1u << 12,
  kMinCount = 1u << 13,
  kParallel = 1u << 14,
  kMaxLength = 1u << 15,
};

struct FlagValues {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  Paths paths;
  double threshold = 0.0;
  int beam = 0;
  std::string mode;
  int iterations = 0;
  std::string beta_policy;
  double beta = 0.0;
  double alpha = 0.0;
  int sweeps = 0;
  double tolerance = 0.0;
  int min_count = 0;
  bool parallel = false;
  int max_length = 0;
  std::multimap<std::string, CLI::Option*> opts;  // one entry per subcommand

  bool given(const std::string& name) const {
    auto [lo, hi] = opts.equal_range(name);
    return std::any_of(lo, hi, [](const auto& kv) { return kv.second->count() > 0; });
  }
};

inline void add_flags(CLI::App* app, unsigned mask, FlagValues& f) {
  auto opt = [&](const std::string& name, auto& dst, const std::string& help) {
    f.opts.emplace(name, app->add_option(name, dst, help));
  };
  opt("--config", f.config, "JSON config file (flags override its values)");
  opt("--seed", f.seed, "random seed");
  opt("--out", f.out, "output directory");
  if (mask & kGraph) opt("--graph", f.paths.graph, "edge-list CSV");
  if (mask & kVectors) opt("--vectors", f.paths.vectors, "term vectors (word v1 ... vd)");
  if (mask & kTrain) opt("--train", f.paths.train, "training split (JSON lines)");
  if (mask & kTest) opt("--test", f.paths.test, "test split (JSON lines)");
  if (mask & kTerms) opt("--terms", f.paths.terms, "expanded terms (from expand-terms)");
  if (mask & kEncoder) opt("--encoder", f.paths.encoder, "pretrained term encoder checkpoint");
  if (mask & kModel) opt("--model", f.paths.model, "caption model checkpoint");
  if (mask & kResults) opt("--results", f.paths.results, "results JSON lines");
  if (mask & kThreshold) opt("--threshold", f.threshold, "detection confidence threshold");
  if (mask & kBeam) opt("--beam", f.beam, "beam size");
  if (mask & kMaxLength) opt("--max-length", f.max_length, "maximum caption length");
  if (mask & kMode) opt("--mode", f.mode, "input mode, e.g. image or direct+indirect+image");
  if (mask & kIterations) opt("--iterations", f.iterations, "training iterations");
  if (mask & kMinCount) opt("--min-count", f.min_count, "vocabulary minimum word count");
  if (mask & kRetrofitFlags) {
    opt("--beta-policy", f.beta_policy, "inverse-degree | constant | edge-weight | zero");
    opt("--beta", f.beta, "edge weight for the constant policy");
    opt("--alpha", f.alpha, "data-term weight");
    opt("--sweeps", f.sweeps, "maximum retrofit sweeps");
    opt("--tolerance", f.tolerance, "convergence tolerance");
  }
  if (mask & kParallel)
    f.opts.emplace("--parallel",
                   app->add_flag("--parallel", f.parallel, "train ablation modes concurrently"));
}

// defaults < config file < flags
inline RunConfig effective_config(const FlagValues& f, const std::string& sub) {
  RunConfig c;
  c.pretrain = c.train;
  if (!f.config.empty()) c = load_config_file(f.config);
  if (f.given("--seed")) c.seed = f.seed;
  if (f.given("--out")) c.paths.out = f.out;
  for (auto [name, src, dst] :
       std::initializer_list<std::tuple<const char*, const std::string*, std::string*>>{
           {"--graph", &f.paths.graph, &c.paths.graph},
           {"--vectors", &f.paths.vectors, &c.paths.vectors},
           {"--train", &f.paths.train, &c.paths.train},
           {"--test", &f.paths.test, &c.paths.test},
           {"--terms", &f.paths.terms, &c.paths.terms},
           {"--encoder", &f.paths.encoder, &c.paths.encoder},
           {"--model", &f.paths.model, &c.paths.model},
           {"--results", &f.paths.results, &c.paths.results}})
    if (f.given(name)) *dst = *src;
  if (f.given("--threshold")) c.expansion.detection_threshold = f.threshold;
  if (f.given("--beam")) c.decode.beam_size = f.beam;
  if (f.given("--max-length")) c.decode.max_length = f.max_length;
  if (f.given("--mode")) c.mode = parse_mode(f.mode);
  if (f.given("--iterations")) {
    if (sub == "pretrain-encoder")
      c.pretrain.max_iterations = f.iterations;
    else
      c.train.max_iterations = f.iterations;
  }
  if (f.given("--min-count")) c.min_count = f.min_count;
  if (f.given("--beta-policy")) c.retrofit.beta_policy = f.beta_policy;
  if (f.given("--beta")) c.retrofit.beta = f.beta;
  if (f.given("--alpha")) c.retrofit.alpha = f.alpha;
  if (f.given("--sweeps")) c.retrofit.sweeps = f.sweeps;
  if (f.given("--tolerance")) c.retrofit.tolerance = f.tolerance;
  if (f.given("--parallel")) c.parallel = f.parallel;

  if (f.given("--beta") && c.retrofit.beta_policy != "constant")
    throw ConfigError("--beta only applies to --beta-policy constant (policy is '" +
                      c.retrofit.beta_policy + "')");
  c.train.rng_seed = c.seed;
  c.pretrain.rng_seed = c.seed;
  c.validate();
  return c;
}

inline void require_inputs(std::initializer_list<std::pair<const char*, const std::string*>> req) {
  for (const auto& [flag, path] : req) {
    if (path->empty()) throw ConfigError(std::string("missing required input ") + flag);
    if (!fs::exists(*path)) throw std::runtime_error(std::string(flag) + ": no such file " + *path);
  }
}

class Timer {
 public:
  void lap(const std::string& stage) {
    const auto now = std::chrono::steady_clock::now();
    laps_[stage] = std::chrono::duration<double>(now - last_).count();
    last_ = now;
  }
  json to_json() const {
    json j = json::object();
    for (const auto& [k, v] : laps_) j[k] = v;
    return j;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
  std::map<std::string, double> laps_;
};

}  // namespace detail

// Parses `args` (without the program name), runs one subcommand and returns
// its exit status.
inline int run_subcommand(const std::vector<std::string>& args, std::ostream& out = std::cout,
                          std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"kgcap: knowledge-guided image captioning toolkit"};
  app.require_subcommand(1, 1);
  FlagValues f;
  const std::vector<std::pair<std::string, unsigned>> subs{
      {"ingest-kg", kGraph},
      {"retrofit", kGraph | kVectors | kRetrofitFlags},
      {"expand-terms", kGraph | kVectors | kTrain | kTest | kThreshold},
      {"pretrain-encoder", kTrain | kTerms | kVectors | kIterations | kMinCount},
      {"train", kTrain | kTerms | kVectors | kEncoder | kMode | kIterations | kMinCount},
      {"caption", kModel | kTest | kTerms | kVectors | kBeam | kMaxLength},
      {"evaluate", kResults},
      {"ablate", kGraph | kVectors | kTrain | kTest | kThreshold | kBeam | kMaxLength |
                     kIterations | kMinCount | kRetrofitFlags | kParallel},
  };
  const std::map<std::string, std::string> help{
      {"ingest-kg", "validate an edge list and write its canonical form"},
      {"retrofit", "fit term vectors to the knowledge graph"},
      {"expand-terms", "build direct and indirect term lists per image"},
      {"pretrain-encoder", "pretrain the term encoder"},
      {"train", "train a caption model"},
      {"caption", "decode captions with beam search"},
      {"evaluate", "score results with BLEU, ROUGE-L and CIDEr-D"},
      {"ablate", "train and score every input mode"},
  };
  std::map<std::string, CLI::App*> apps;
  for (const auto& [name, mask] : subs) {
    apps[name] = app.add_subcommand(name, help.at(name));
    add_flags(apps[name], mask, f);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  std::string sub;
  for (const auto& [name, a] : apps)
    if (a->parsed()) sub = name;

  Logger log(err, Logger::level_from_env());
  try {
    const RunConfig cfg = effective_config(f, sub);
    const fs::path dir(cfg.paths.out);
    Timer timer;
    json outputs = json::array();
    json extra = json::object();
    auto emit = [&](const std::string& name, const std::string& content) {
      write_atomic(dir / name, content);
      outputs.push_back((dir / name).string());
    };

    if (sub == "ingest-kg") {
      require_inputs({{"--graph", &cfg.paths.graph}});
      auto in = open_input(cfg.paths.graph);
      auto g = ingest_edges(in);
      timer.lap("ingest");
      std::ostringstream s;
      export_edges(g, s);
      emit("graph.csv", s.str());
      extra["terms"] = g.term_count();
      extra["edges"] = g.edge_count();
      log.info("ingest-kg: " + std::to_string(g.term_count()) + " terms, " +
               std::to_string(g.edge_count()) + " edges");
    } else if (sub == "retrofit") {
      require_inputs({{"--graph", &cfg.paths.graph}, {"--vectors", &cfg.paths.vectors}});
      auto gin = open_input(cfg.paths.graph);
      auto g = ingest_edges(gin);
      auto vin = open_input(cfg.paths.vectors);
      auto base = load_vectors(vin);
      timer.lap("load");
      const auto rc = cfg.retrofit.to_config();
      int sweeps = 0;
      auto q = retrofit(base, g, rc, [&](int s, const VectorStore&) { sweeps = s; });
      timer.lap("retrofit");
      std::ostringstream s;
      save_vectors(q, s);
      emit("vectors.txt", s.str());
      extra["sweeps"] = sweeps;
      extra["objective_before"] = objective(base, base, g, rc);
      extra["objective_after"] = objective(base, q, g, rc);
      log.info("retrofit: " + std::to_string(q.size()) + " vectors, " + std::to_string(sweeps) +
               " sweeps");
    } else if (sub == "expand-terms") {
      require_inputs({{"--graph", &cfg.paths.graph}, {"--vectors", &cfg.paths.vectors}});
      if (cfg.paths.train.empty() && cfg.paths.test.empty())
        throw ConfigError("expand-terms needs --train and/or --test");
      auto gin = open_input(cfg.paths.graph);
      auto g = ingest_edges(gin);
      auto vin = open_input(cfg.paths.vectors);
      auto store = load_vectors(vin);
      std::string rows;
      for (auto [split, path] : {std::pair{"train", &cfg.paths.train}, {"test", &cfg.paths.test}}) {
        if (path->empty()) continue;
        require_inputs({{split, path}});
        auto in = open_input(*path);
        auto ds = load_dataset(in, split);
        expand_dataset(ds, g, store, cfg.expansion, &rows);
        extra[std::string(split) + "_images"] = ds.size();
      }
      timer.lap("expand");
      emit("terms.jsonl", rows);
    } else if (sub == "pretrain-encoder") {
      require_inputs({{"--train", &cfg.paths.train},
                      {"--terms", &cfg.paths.terms},
                      {"--vectors", &cfg.paths.vectors}});
      auto din = open_input(cfg.paths.train);
      auto ds = load_dataset(din, "train");
      auto tin = open_input(cfg.paths.terms);
      auto terms = load_terms(tin);
      auto vin = open_input(cfg.paths.vectors);
      auto store = load_vectors(vin);
      auto vocab = build_vocabulary(ds, cfg.min_count);
      auto data = make_examples(ds, InputMode::DirectImage, vocab, &terms, &store, true);
      const auto dims = model_dims(cfg, vocab, ds, &store);
      timer.lap("load");
      auto res = pretrain_term_encoder(data, dims, cfg.pretrain,
                                       progress(log, "pretrain", cfg.pretrain.max_iterations));
      timer.lap("pretrain");
      std::ostringstream s;
      checkpoint::save_encoder(s, res.encoder);
      emit("encoder.ckpt", s.str());
      emit("pretrain_loss.csv", loss_csv(res.loss_curve));
      extra["examples"] = data.size();
      if (!res.loss_curve.empty()) {
        extra["initial_loss"] = res.loss_curve.front();
        extra["final_loss"] = res.loss_curve.back();
      }
    } else if (sub == "train") {
      require_inputs({{"--train", &cfg.paths.train}});
      auto din = open_input(cfg.paths.train);
      auto ds = load_dataset(din, "train");
      const auto in = mode_inputs(cfg.mode);
      std::optional<TermTable> terms;
      std::optional<VectorStore> store;
      std::optional<TermEncoderParams> encoder;
      if (in.direct || in.indirect) {
        require_inputs({{"--terms", &cfg.paths.terms}, {"--vectors", &cfg.paths.vectors}});
        auto tin = open_input(cfg.paths.terms);
        terms = load_terms(tin);
        auto vin = open_input(cfg.paths.vectors);
        store = load_vectors(vin);
        if (!cfg.paths.encoder.empty()) {
          require_inputs({{"--encoder", &cfg.paths.encoder}});
          auto ein = open_input(cfg.paths.encoder);
          encoder = checkpoint::load_encoder(ein);
        } else {
          log.info("train: no --encoder given; term encoders start from random init");
        }
      } else if (!cfg.paths.encoder.empty()) {
        log.info("train: mode " + std::string(mode_name(cfg.mode)) +
                 " uses no term encoder; --encoder ignored");
      }
      auto vocab = build_vocabulary(ds, cfg.min_count);
      auto data = make_examples(ds, cfg.mode, vocab, terms ? &*terms : nullptr,
                                store ? &*store : nullptr);
      const auto dims = model_dims(cfg, vocab, ds, store ? &*store : nullptr);
      timer.lap("load");
      auto res = train(data, cfg.mode, dims, cfg.train, encoder ? &*encoder : nullptr,
                       progress(log, "train", cfg.train.max_iterations));
      timer.lap("train");
      std::ostringstream s;
      checkpoint::save_model(s, res.params, vocab);
      emit("model.ckpt", s.str());
      emit("loss_curve.csv", loss_csv(res.loss_curve));
      emit("vocabulary.json", vocab.to_json().dump(1) + "\n");
      extra["examples"] = data.size();
      extra["vocabulary_size"] = vocab.size();
      extra["unk_rate"] = unk_rate(vocab, ds);
      extra["parameter_count"] = res.params.parameter_count();
      if (!res.loss_curve.empty()) extra["final_loss"] = res.loss_curve.back();
      log.info("train: " + std::string(mode_name(cfg.mode)) + ", " +
               std::to_string(res.params.parameter_count()) + " parameters");
    } else if (sub == "caption") {
      require_inputs({{"--model", &cfg.paths.model}, {"--test", &cfg.paths.test}});
      auto min = open_input(cfg.paths.model);
      auto ck = checkpoint::load_model(min);
      auto din = open_input(cfg.paths.test);
      auto ds = load_dataset(din, "test");
      const auto in = mode_inputs(ck.params.mode);
      std::optional<TermTable> terms;
      std::optional<VectorStore> store;
      if (in.direct || in.indirect) {
        require_inputs({{"--terms", &cfg.paths.terms}, {"--vectors", &cfg.paths.vectors}});
        auto tin = open_input(cfg.paths.terms);
        terms = load_terms(tin);
        auto vin = open_input(cfg.paths.vectors);
        store = load_vectors(vin);
      }
      timer.lap("load");
      auto res = caption_dataset(ck.params, ck.vocabulary, ds, terms ? &*terms : nullptr,
                                 store ? &*store : nullptr, cfg.decode);
      timer.lap("decode");
      emit("captions.jsonl", res.captions_jsonl);
      emit("results.jsonl", res.results_jsonl);
      extra["images"] = ds.size();
    } else if (sub == "evaluate") {
      require_inputs({{"--results", &cfg.paths.results}});
      auto rin = open_input(cfg.paths.results);
      auto corpus = load_results(rin);
      auto rep = metrics::evaluate(corpus);
      timer.lap("evaluate");
      emit("report.json", metrics::report_to_json(rep).dump(2) + "\n");
      emit("report.txt", report_text(rep));
      out << report_text(rep);
    } else if (sub == "ablate") {
      require_inputs({{"--graph", &cfg.paths.graph},
                      {"--vectors", &cfg.paths.vectors},
                      {"--train", &cfg.paths.train},
                      {"--test", &cfg.paths.test}});
      const auto partial = dir / "ablation.partial.json";
      auto rows = run_ablation(AblationPlan{}, cfg, log, [&](const std::vector<AblationRow>& done) {
        json j = json::array();
        for (const auto& r : done) j.push_back(ablation_row_json(r));
        write_atomic(partial, j.dump(2) + "\n");
      });
      timer.lap("ablate");
      json table;
      table["seed"] = cfg.seed;
      table["config_hash"] = config_hash(cfg);
      table["rows"] = json::array();
      for (const auto& r : rows) table["rows"].push_back(ablation_row_json(r));
      table["excluded"] = {"+ fine tune CNN"};
      emit("ablation.json", table.dump(2) + "\n");
      emit("ablation.txt", ablation_text(rows));
      fs::remove(partial);
      out << ablation_text(rows);
    }

    json runlog;
    runlog["subcommand"] = sub;
    runlog["status"] = "ok";
    runlog["seed"] = cfg.seed;
    runlog["config_hash"] = config_hash(cfg);
    runlog["config"] = config_to_json(cfg);
    runlog["outputs"] = outputs;
    runlog["details"] = extra;
    runlog["timings_s"] = timer.to_json();
    write_atomic(dir / (sub + ".log.json"), runlog.dump(2) + "\n");
    return kOk;
  } catch (const ConfigError& e) {
    err << "kgcap " << sub << ": configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "kgcap " << sub << ": error: " << e.what() << '\n';
    return kFailure;
  }
}

inline int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_subcommand(args);
}

}  // namespace kgcap::cli
