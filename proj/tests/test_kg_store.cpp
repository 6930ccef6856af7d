#include <sstream>

#include <gtest/gtest.h>

#include "kgcap/kg_store.hpp"
#include "kgcap/rng.hpp"

using namespace kgcap;

namespace {

KnowledgeGraph from_text(const std::string& text) {
  std::istringstream in(text);
  return ingest_edges(in);
}

std::string random_edge_list(Rng& rng, int terms, int edges) {
  std::ostringstream out;
  const char* rels[] = {"IsA", "AtLocation", "UsedFor", "RelatedTo"};
  for (int e = 0; e < edges; ++e) {
    auto a = rng.below(terms), b = rng.below(terms);
    if (a == b) continue;
    out << rels[rng.below(4)] << ",t" << a << ",t" << b << ',' << rng.below(5) << ".5\n";
  }
  return out.str();
}

}  // namespace

TEST(Term, NormalizesCaseAndSpacing) {
  EXPECT_EQ(Term("  Living   Room ").str(), "living_room");
  EXPECT_EQ(Term("end_table"), Term("End Table"));
  EXPECT_THROW(Term("   "), ValidationError);
}

TEST(IngestEdges, EmptyStream) {
  auto g = from_text("");
  EXPECT_EQ(g.term_count(), 0u);
  EXPECT_EQ(g.edge_count(), 0u);
}

TEST(IngestEdges, TwoEdges) {
  auto g = from_text("AtLocation,chair,house,1.0\nIsA,chair,furniture,2.0\n");
  EXPECT_EQ(g.term_count(), 3u);
  EXPECT_EQ(g.edge_count(), 2u);
  EXPECT_EQ(g.adjacent(Term("chair")).size(), 2u);
}

TEST(IngestEdges, DuplicateKeepsMaxWeight) {
  auto g = from_text("IsA,chair,furniture,1.0\nIsA,chair,furniture,3.0\nIsA,chair,furniture,2.0\n");
  ASSERT_EQ(g.edge_count(), 1u);
  EXPECT_DOUBLE_EQ(g.edges()[0].weight, 3.0);
  EXPECT_DOUBLE_EQ(g.adjacent(Term("furniture"))[0].weight, 3.0);
}

TEST(IngestEdges, ReversedDirectionIsTheSameUndirectedEdge) {
  auto g = from_text("RelatedTo,a,b,1\nRelatedTo,b,a,2\n");
  EXPECT_EQ(g.edge_count(), 1u);
  EXPECT_DOUBLE_EQ(g.edges()[0].weight, 2.0);
}

TEST(IngestEdges, DefaultWeightCommentsAndBlankLines) {
  auto g = from_text("# header\n\nIsA,Pot Plant,plant\n");
  ASSERT_EQ(g.edge_count(), 1u);
  EXPECT_DOUBLE_EQ(g.edges()[0].weight, 1.0);
  EXPECT_TRUE(g.contains(Term("pot_plant")));
}

TEST(IngestEdges, MalformedLineReportsLineNumber) {
  try {
    from_text("IsA,a,b,1\nbroken line\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  try {
    from_text("IsA,a,b,abc\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
}

TEST(IngestEdges, NegativeWeightAndSelfLoopRejected) {
  EXPECT_THROW(from_text("IsA,a,b,-1\n"), ValidationError);
  EXPECT_THROW(from_text("IsA,a,A,1\n"), ValidationError);
}

TEST(Neighbors, AbsentTermGivesEmpty) {
  auto g = from_text("IsA,a,b,1\n");
  EXPECT_TRUE(neighbors(g, Term("zzz"), 2).empty());
  EXPECT_THROW(neighbors(g, Term("a"), 0), ValidationError);
}

TEST(Neighbors, StarOrderedByWeight) {
  auto g = from_text("AtLocation,chair,house,1.0\nIsA,chair,furniture,2.0\n");
  auto n = neighbors(g, Term("chair"), 1);
  ASSERT_EQ(n.size(), 2u);
  EXPECT_EQ(n[0], (Reached{Term("furniture"), 1, 2.0}));
  EXPECT_EQ(n[1], (Reached{Term("house"), 1, 1.0}));
}

TEST(Neighbors, PathReportsMinimumHop) {
  // a - b - c, plus a longer detour a - x - y - c
  auto g = from_text("R,a,b,1\nR,b,c,1\nR,a,x,1\nR,x,y,1\nR,y,c,1\n");
  auto n = neighbors(g, Term("a"), 2);
  ASSERT_EQ(n.size(), 4u);
  EXPECT_EQ(n[0].term, Term("b"));
  EXPECT_EQ(n[1].term, Term("x"));
  EXPECT_EQ(n[0].hops, 1);
  EXPECT_EQ(n[2].term, Term("c"));
  EXPECT_EQ(n[2].hops, 2);
  EXPECT_EQ(n[3].term, Term("y"));
}

TEST(Neighbors, TiesBrokenLexicographically) {
  auto g = from_text("R,hub,zeta,1\nR,hub,alpha,1\nR,hub,mid,1\n");
  auto n = neighbors(g, Term("hub"), 1);
  ASSERT_EQ(n.size(), 3u);
  EXPECT_EQ(n[0].term.str(), "alpha");
  EXPECT_EQ(n[1].term.str(), "mid");
  EXPECT_EQ(n[2].term.str(), "zeta");
}

TEST(KnowledgeGraphProperties, SymmetryMonotonicityRoundTrip) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto text = random_edge_list(rng, 8, 14);
    auto g = from_text(text);
    auto g2 = from_text(text);
    EXPECT_TRUE(g == g2);  // idempotent ingestion

    for (const auto& e : g.edges()) {
      auto from_start = neighbors(g, e.start, 1);
      auto from_end = neighbors(g, e.end, 1);
      auto has = [](const std::vector<Reached>& v, const Term& t) {
        for (const auto& r : v)
          if (r.term == t) return true;
        return false;
      };
      EXPECT_TRUE(has(from_start, e.end));
      EXPECT_TRUE(has(from_end, e.start));
    }

    for (const auto& t : g.terms()) {
      for (int h = 1; h < 4; ++h) {
        auto small = neighbors(g, t, h), big = neighbors(g, t, h + 1);
        for (const auto& r : small) {
          bool found = false;
          for (const auto& b : big) found |= (b.term == r.term && b.hops == r.hops);
          EXPECT_TRUE(found);
        }
      }
    }

    std::ostringstream out;
    export_edges(g, out);
    auto back = from_text(out.str());
    EXPECT_EQ(back.term_count(), g.term_count());
    EXPECT_EQ(back.edge_count(), g.edge_count());
    EXPECT_TRUE(back == g);
  }
}
