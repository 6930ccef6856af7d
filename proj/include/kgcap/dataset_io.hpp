#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "kgcap/error.hpp"
#include "kgcap/rng.hpp"
#include "kgcap/term_expansion.hpp"
#include "kgcap/text.hpp"

namespace kgcap {

struct ImageRecord {
  std::string image_id;
  std::vector<double> feature;
  std::vector<DetectedObject> detections;
  std::vector<std::string> references;
};

struct Dataset {
  std::string split = "train";
  int feature_dim = 0;
  std::vector<ImageRecord> records;

  bool empty() const noexcept { return records.empty(); }
  std::size_t size() const noexcept { return records.size(); }
};

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& obj, const char* key,
                                     std::size_t lineno) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(std::string("missing field '") + key + "'", lineno);
  return *it;
}

}  // namespace detail

inline Dataset load_dataset(std::istream& in, std::string split = "train") {
  Dataset ds;
  ds.split = std::move(split);
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(e.what(), lineno);
    }
    if (!j.is_object()) throw ValidationError("record must be a JSON object", lineno);
    ImageRecord rec;
    try {
      rec.image_id = detail::require(j, "image_id", lineno).get<std::string>();
      rec.feature = detail::require(j, "feature", lineno).get<std::vector<double>>();
      for (const auto& d : detail::require(j, "detections", lineno)) {
        DetectedObject obj{Term(detail::require(d, "label", lineno).get<std::string>()),
                           detail::require(d, "confidence", lineno).get<double>()};
        if (!(obj.confidence >= 0.0 && obj.confidence <= 1.0))
          throw ValidationError("confidence outside [0,1]", lineno);
        rec.detections.push_back(std::move(obj));
      }
      rec.references =
          detail::require(j, "references", lineno).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(e.what(), lineno);
    }
    if (rec.feature.empty()) throw ValidationError("empty feature vector", lineno);
    if (ds.records.empty()) ds.feature_dim = static_cast<int>(rec.feature.size());
    if (static_cast<int>(rec.feature.size()) != ds.feature_dim)
      throw ValidationError("feature dimension " + std::to_string(rec.feature.size()) +
                                " differs from " + std::to_string(ds.feature_dim),
                            lineno);
    if (!ids.insert(rec.image_id).second)
      throw ValidationError("duplicate image_id '" + rec.image_id + "'", lineno);
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

inline nlohmann::ordered_json record_to_json(const ImageRecord& r) {
  nlohmann::ordered_json j;
  j["image_id"] = r.image_id;
  j["feature"] = r.feature;
  auto dets = nlohmann::ordered_json::array();
  for (const auto& d : r.detections)
    dets.push_back(nlohmann::ordered_json{{"label", d.label.str()}, {"confidence", d.confidence}});
  j["detections"] = std::move(dets);
  j["references"] = r.references;
  return j;
}

inline void export_dataset(const Dataset& ds, std::ostream& out) {
  for (const auto& r : ds.records) out << record_to_json(r).dump() << '\n';
}

// Word <-> index map. Indices 0..3 are the reserved START, END, UNK and EMPTY
// tokens; regular words follow by descending corpus count, then alphabetically.
class Vocabulary {
 public:
  static constexpr int kStart = 0;
  static constexpr int kEnd = 1;
  static constexpr int kUnk = 2;
  static constexpr int kEmpty = 3;
  static constexpr int kReserved = 4;

  Vocabulary() {
    for (const char* w : {"<start>", "<end>", "<unk>", "<empty>"}) add(w, 0);
  }

  // Restores a vocabulary from its word list (reserved tokens first).
  static Vocabulary from_words(const std::vector<std::string>& words,
                               const std::vector<std::int64_t>& counts = {}) {
    Vocabulary v;
    if (words.size() < kReserved) throw ValidationError("vocabulary lacks reserved tokens");
    for (int i = 0; i < kReserved; ++i)
      if (words[i] != v.words_[i]) throw ValidationError("reserved token mismatch: " + words[i]);
    for (std::size_t i = kReserved; i < words.size(); ++i) {
      if (v.index_.count(words[i])) throw ValidationError("duplicate vocabulary word " + words[i]);
      v.add(words[i], i < counts.size() ? counts[i] : 0);
    }
    return v;
  }

  int size() const noexcept { return static_cast<int>(words_.size()); }
  const std::string& word(int index) const { return words_.at(index); }
  std::int64_t count(int index) const { return counts_.at(index); }
  const std::vector<std::string>& words() const noexcept { return words_; }
  const std::vector<std::int64_t>& counts() const noexcept { return counts_; }
  bool contains(const std::string& w) const { return index_.count(w) != 0; }

  int index(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }

  nlohmann::ordered_json to_json() const {
    auto arr = nlohmann::ordered_json::array();
    for (int i = 0; i < size(); ++i)
      arr.push_back({{"word", words_[i]}, {"index", i}, {"count", counts_[i]}});
    return arr;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.words_ == b.words_;
  }

 private:
  void add(const std::string& w, std::int64_t c) {
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
    counts_.push_back(c);
  }

  std::vector<std::string> words_;
  std::vector<std::int64_t> counts_;
  std::unordered_map<std::string, int> index_;
};

inline Vocabulary build_vocabulary(const Dataset& ds, int min_count = 4) {
  std::map<std::string, std::int64_t> counts;
  for (const auto& r : ds.records)
    for (const auto& ref : r.references)
      for (auto& tok : tokenize(ref)) ++counts[tok];
  if (counts.empty()) throw ValidationError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::int64_t>> kept;
  for (auto& [w, c] : counts)
    if (c >= min_count) kept.emplace_back(w, c);
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words{"<start>", "<end>", "<unk>", "<empty>"};
  std::vector<std::int64_t> cs(Vocabulary::kReserved, 0);
  for (auto& [w, c] : kept) {
    words.push_back(w);
    cs.push_back(c);
  }
  return Vocabulary::from_words(words, cs);
}

inline std::vector<int> encode_caption(const Vocabulary& v, std::string_view raw) {
  std::vector<int> out{Vocabulary::kStart};
  for (const auto& tok : tokenize(raw)) out.push_back(v.index(tok));
  out.push_back(Vocabulary::kEnd);
  return out;
}

// Surface text of an index sequence; START/END are dropped.
inline std::string decode_caption(const Vocabulary& v, const std::vector<int>& ids) {
  std::vector<std::string> words;
  for (int id : ids) {
    if (id == Vocabulary::kStart || id == Vocabulary::kEnd) continue;
    words.push_back(v.word(id));
  }
  return join(words);
}

// Fraction of caption tokens that map to UNK.
inline double unk_rate(const Vocabulary& v, const Dataset& ds) {
  std::size_t total = 0, unk = 0;
  for (const auto& r : ds.records)
    for (const auto& ref : r.references)
      for (const auto& tok : tokenize(ref)) {
        ++total;
        if (!v.contains(tok)) ++unk;
      }
  return total ? static_cast<double>(unk) / static_cast<double>(total) : 0.0;
}

// Endless stream of index batches over [0, n). Each epoch is a fresh seeded
// permutation; the last batch of an epoch may be short.
class BatchStream {
 public:
  BatchStream(std::size_t n, int batch_size, std::uint64_t seed)
      : n_(n), batch_size_(batch_size), seed_(seed) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (n == 0) throw ValidationError("cannot batch an empty set");
  }

  static std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed,
                                              std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)));
    rng.shuffle(order);
    return order;
  }

  std::vector<std::size_t> next() {
    if (pos_ == 0) order_ = permutation(n_, seed_, epoch_);
    const std::size_t end = std::min(n_, pos_ + static_cast<std::size_t>(batch_size_));
    std::vector<std::size_t> batch(order_.begin() + pos_, order_.begin() + end);
    pos_ = end;
    if (pos_ == n_) {
      pos_ = 0;
      ++epoch_;
    }
    return batch;
  }

  std::uint64_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t n_;
  int batch_size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

// One epoch of record batches.
inline std::vector<std::vector<std::size_t>> batches(const Dataset& ds, int batch_size,
                                                     std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> out;
  if (ds.empty()) return out;
  BatchStream stream(ds.size(), batch_size, seed);
  do out.push_back(stream.next());
  while (stream.epoch() == 0);
  return out;
}

}  // namespace kgcap
