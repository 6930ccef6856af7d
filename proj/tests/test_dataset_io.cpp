#include <algorithm>
#include <sstream>

#include <gtest/gtest.h>

#include "kgcap/dataset_io.hpp"

using namespace kgcap;

namespace {

Dataset load(const std::string& text) {
  std::istringstream in(text);
  return load_dataset(in);
}

Dataset captions_only(const std::vector<std::string>& caps) {
  Dataset ds;
  ds.feature_dim = 1;
  int k = 0;
  for (const auto& c : caps) ds.records.push_back({"img" + std::to_string(k++), {0.0}, {}, {c}});
  return ds;
}

const char* kRecord =
    R"({"image_id":"img1","feature":[0.5,-1.25],"detections":[{"label":"cat","confidence":0.9}],"references":["A cat sits."]})";

}  // namespace

TEST(LoadDataset, EmptyStream) {
  auto ds = load("");
  EXPECT_TRUE(ds.empty());
}

TEST(LoadDataset, OneRecordRoundTrips) {
  auto ds = load(std::string(kRecord) + "\n");
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.feature_dim, 2);
  EXPECT_EQ(ds.records[0].detections[0].label, Term("cat"));
  std::ostringstream out;
  export_dataset(ds, out);
  EXPECT_EQ(out.str(), std::string(kRecord) + "\n");
}

TEST(LoadDataset, DimensionMismatchAtSecondLine) {
  try {
    load(R"({"image_id":"a","feature":[1,2],"detections":[],"references":["x"]})"
         "\n"
         R"({"image_id":"b","feature":[1,2,3],"detections":[],"references":["x"]})");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(LoadDataset, MissingFieldDuplicateIdAndBadJson) {
  try {
    load(R"({"image_id":"a","feature":[1],"references":["x"]})");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
  try {
    load(R"({"image_id":"a","feature":[1],"detections":[],"references":[]})"
         "\n\n"
         R"({"image_id":"a","feature":[2],"detections":[],"references":[]})");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(load("{not json"), ParseError);
}

TEST(BuildVocabulary, MinCountRule) {
  auto ds = captions_only({"cat cat", "cat dog", "Cat dog", "dog"});
  auto v = build_vocabulary(ds);
  EXPECT_TRUE(v.contains("cat"));
  EXPECT_FALSE(v.contains("dog"));
  EXPECT_EQ(v.index("cat"), Vocabulary::kReserved);
  auto all = build_vocabulary(ds, 1);
  EXPECT_TRUE(all.contains("dog"));
  EXPECT_EQ(all.size(), Vocabulary::kReserved + 2);
  EXPECT_THROW(build_vocabulary(Dataset{}), ValidationError);
}

TEST(BuildVocabulary, CountThenLexicographicOrder) {
  auto v = build_vocabulary(captions_only({"b a c c", "a b c"}), 1);
  EXPECT_EQ(v.word(4), "c");
  EXPECT_EQ(v.word(5), "a");
  EXPECT_EQ(v.word(6), "b");
  EXPECT_EQ(v.count(4), 3);
}

TEST(BuildVocabulary, IndependentOfRecordOrder) {
  std::vector<std::string> caps{"a man rides a horse", "a dog on a couch", "two dogs play",
                                "a man and a dog", "the horse runs"};
  auto base = build_vocabulary(captions_only(caps), 2);
  std::sort(caps.begin(), caps.end());
  do {
    EXPECT_TRUE(build_vocabulary(captions_only(caps), 2) == base);
  } while (std::next_permutation(caps.begin(), caps.end()));
}

TEST(EncodeCaption, Examples) {
  auto v = build_vocabulary(captions_only({"cat"}), 1);
  EXPECT_EQ(encode_caption(v, ""), (std::vector<int>{Vocabulary::kStart, Vocabulary::kEnd}));
  EXPECT_EQ(encode_caption(v, "A cat"),
            (std::vector<int>{Vocabulary::kStart, Vocabulary::kUnk, v.index("cat"), Vocabulary::kEnd}));
  auto w = build_vocabulary(captions_only({"a man rides a horse"}), 1);
  EXPECT_EQ(decode_caption(w, encode_caption(w, "A Man RIDES a horse")), "a man rides a horse");
}

TEST(EncodeCaption, UnkRate) {
  auto ds = captions_only({"cat cat", "cat dog"});
  auto v = build_vocabulary(ds, 2);
  EXPECT_DOUBLE_EQ(unk_rate(v, ds), 0.25);
}

TEST(Batches, SizesAndDeterminism) {
  auto ds = captions_only({"a", "b", "c", "d", "e"});
  auto b = batches(ds, 2, 42);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 2u);
  EXPECT_EQ(b[1].size(), 2u);
  EXPECT_EQ(b[2].size(), 1u);
  std::vector<std::size_t> all;
  for (const auto& x : b) all.insert(all.end(), x.begin(), x.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(batches(ds, 2, 42), b);
  EXPECT_THROW(batches(ds, 0, 1), ConfigError);
}

TEST(Batches, EpochsReshuffle) {
  BatchStream s(10, 10, 3);
  auto e0 = s.next();
  auto e1 = s.next();
  EXPECT_EQ(s.epoch(), 2u);
  EXPECT_NE(e0, e1);
}

TEST(Batches, DifferentSeedsDiffer) {
  // Two independent uniform permutations of 10 items coincide with
  // probability 1/10!; allow at most one collision in 100 trials.
  auto ds = captions_only({"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"});
  int same = 0;
  for (std::uint64_t t = 0; t < 100; ++t)
    if (batches(ds, 32, 2 * t) == batches(ds, 32, 2 * t + 1)) ++same;
  EXPECT_LE(same, 1);
}

TEST(Vocabulary, JsonAndRestore) {
  auto v = build_vocabulary(captions_only({"x y y"}), 1);
  auto j = v.to_json();
  EXPECT_EQ(j[4]["word"], "y");
  EXPECT_EQ(j[4]["count"], 2);
  auto back = Vocabulary::from_words(v.words(), v.counts());
  EXPECT_TRUE(back == v);
  EXPECT_THROW(Vocabulary::from_words({"x"}), ValidationError);
}
