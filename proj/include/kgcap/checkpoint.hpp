#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kgcap/caption_model.hpp"
#include "kgcap/dataset_io.hpp"
#include "kgcap/error.hpp"

// Checkpoint layout:
//   "KGCAP1\n"                     7-byte magic
//   u64 little-endian              byte length of the JSON header
//   JSON header                    kind, mode, dims, vocabulary, tensor table
//   payload                        tensors in table order, each row-major,
//                                  IEEE-754 binary64 little-endian
namespace kgcap::checkpoint {

inline constexpr char kMagic[] = "KGCAP1\n";
inline constexpr std::size_t kMagicLen = 7;

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.put(static_cast<char>((v >> (8 * k)) & 0xFF));
}

inline std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) {
    int c = in.get();
    if (c == EOF) throw ParseError("checkpoint truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * k);
  }
  return v;
}

inline void put_f64(std::ostream& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  put_u64(out, bits);
}

inline double get_f64(std::istream& in) {
  std::uint64_t bits = get_u64(in);
  double d;
  std::memcpy(&d, &bits, sizeof d);
  return d;
}

struct TensorRef {
  std::string name;
  double* data;
  Eigen::Index rows, cols;  // storage is column-major
};

template <class T>
TensorRef ref(const std::string& name, T& t) {
  return {name, t.data(), t.rows(), t.cols()};
}

inline void write_container(std::ostream& out, nlohmann::ordered_json header,
                            const std::vector<TensorRef>& tensors) {
  auto table = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    table.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.rows * t.cols);
  }
  header["tensors"] = std::move(table);
  const std::string text = header.dump();
  out.write(kMagic, kMagicLen);
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors)
    for (Eigen::Index r = 0; r < t.rows; ++r)
      for (Eigen::Index c = 0; c < t.cols; ++c) put_f64(out, t.data[c * t.rows + r]);
  if (!out) throw std::runtime_error("checkpoint write failed");
}

inline nlohmann::json read_header(std::istream& in) {
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw ParseError("not a KGCAP1 checkpoint");
  const auto len = get_u64(in);
  if (len > (1ULL << 32)) throw ParseError("checkpoint header too large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError("checkpoint truncated in header");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
}

inline void read_payload(std::istream& in, const nlohmann::json& header,
                         const std::vector<TensorRef>& tensors) {
  const auto& table = header.at("tensors");
  if (table.size() != tensors.size()) throw ValidationError("checkpoint tensor count mismatch");
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const auto& t = tensors[k];
    const auto& e = table[k];
    if (e.at("name").get<std::string>() != t.name || e.at("rows").get<Eigen::Index>() != t.rows ||
        e.at("cols").get<Eigen::Index>() != t.cols)
      throw ValidationError("checkpoint tensor '" + t.name + "' does not match the model shape");
    for (Eigen::Index r = 0; r < t.rows; ++r)
      for (Eigen::Index c = 0; c < t.cols; ++c) t.data[c * t.rows + r] = get_f64(in);
  }
}

inline nlohmann::ordered_json dims_json(const ModelDims& d) {
  return {{"vocab", d.vocab},       {"embed", d.embed},
          {"hidden", d.hidden},     {"feature", d.feature},
          {"term_dim", d.term_dim}, {"encoder_input", d.encoder_input},
          {"encoder_hidden", d.encoder_hidden}};
}

inline ModelDims dims_from(const nlohmann::json& j) {
  ModelDims d;
  d.vocab = j.at("vocab");
  d.embed = j.at("embed");
  d.hidden = j.at("hidden");
  d.feature = j.at("feature");
  d.term_dim = j.at("term_dim");
  d.encoder_input = j.at("encoder_input");
  d.encoder_hidden = j.at("encoder_hidden");
  return d;
}

inline void encoder_tensors(const std::string& prefix, TermEncoderParams& enc,
                            std::vector<TensorRef>& out) {
  enc.visit([&](const std::string& n, auto& t) { out.push_back(ref(prefix + n, t)); });
  out.push_back(ref(prefix + "empty_term", enc.empty_term));
  out.push_back(ref(prefix + "unk_term", enc.unk_term));
}

inline std::vector<TensorRef> model_tensors(CaptionModelParams& m) {
  std::vector<TensorRef> out;
  out.push_back(ref("We", m.We));
  m.decoder.visit([&](const char* n, auto& t) { out.push_back(ref(std::string("decoder.") + n, t)); });
  out.push_back(ref("Wo", m.Wo));
  out.push_back(ref("bo", m.bo));
  if (mode_inputs(m.mode).any()) {
    out.push_back(ref("P", m.P));
    out.push_back(ref("bp", m.bp));
  }
  if (m.enc_direct) encoder_tensors("enc_direct.", *m.enc_direct, out);
  if (m.enc_indirect) encoder_tensors("enc_indirect.", *m.enc_indirect, out);
  return out;
}

}  // namespace detail

struct ModelCheckpoint {
  CaptionModelParams params;
  Vocabulary vocabulary;
};

inline void save_model(std::ostream& out, const CaptionModelParams& params,
                       const Vocabulary& vocab) {
  if (vocab.size() != params.dims.vocab)
    throw ValidationError("vocabulary size differs from model vocab dimension");
  nlohmann::ordered_json h;
  h["format"] = "KGCAP1";
  h["version"] = 1;
  h["kind"] = "caption_model";
  h["mode"] = std::string(mode_name(params.mode));
  h["dims"] = detail::dims_json(params.dims);
  h["parameter_count"] = params.parameter_count();
  h["vocabulary"] = vocab.words();
  h["vocabulary_counts"] = vocab.counts();
  auto copy = params;
  detail::write_container(out, std::move(h), detail::model_tensors(copy));
}

inline ModelCheckpoint load_model(std::istream& in) {
  auto h = detail::read_header(in);
  try {
    if (h.at("kind") != "caption_model") throw ValidationError("checkpoint is not a caption model");
    auto mode = parse_mode(h.at("mode").get<std::string>());
    auto dims = detail::dims_from(h.at("dims"));
    auto vocab = Vocabulary::from_words(h.at("vocabulary").get<std::vector<std::string>>(),
                                        h.value("vocabulary_counts", std::vector<std::int64_t>{}));
    auto params = CaptionModelParams::zeros(mode, dims);
    detail::read_payload(in, h, detail::model_tensors(params));
    return {std::move(params), std::move(vocab)};
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint header: ") + e.what());
  }
}

inline void save_encoder(std::ostream& out, const TermEncoderParams& enc) {
  nlohmann::ordered_json h;
  h["format"] = "KGCAP1";
  h["version"] = 1;
  h["kind"] = "term_encoder";
  h["dims"] = {{"term_dim", enc.term_dim()},
               {"encoder_input", enc.lstm.input_size()},
               {"encoder_hidden", enc.hidden_size()}};
  auto copy = enc;
  std::vector<detail::TensorRef> tensors;
  detail::encoder_tensors("", copy, tensors);
  detail::write_container(out, std::move(h), tensors);
}

inline TermEncoderParams load_encoder(std::istream& in) {
  auto h = detail::read_header(in);
  try {
    if (h.at("kind") != "term_encoder") throw ValidationError("checkpoint is not a term encoder");
    const auto& d = h.at("dims");
    auto enc = TermEncoderParams::zeros(d.at("term_dim"), d.at("encoder_input"),
                                        d.at("encoder_hidden"));
    std::vector<detail::TensorRef> tensors;
    detail::encoder_tensors("", enc, tensors);
    detail::read_payload(in, h, tensors);
    return enc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint header: ") + e.what());
  }
}

}  // namespace kgcap::checkpoint
