#include <fstream>

#include "doctest.h"
#include "selcal/error.hpp"
#include "selcal/records.hpp"
#include "support.hpp"

using namespace selcal;
using namespace selcal::testing;

TEST_SUITE("records") {

TEST_CASE("token records survive a save/load round trip") {
  TempDir dir("records");
  std::mt19937_64 rng(11);
  std::vector<TokenRecord> records;
  for (int i = 0; i < 200; ++i) {
    TokenRecord r = random_record(rng);
    r.utt_id = "utt" + std::to_string(i % 7);
    r.token_index = i;
    if (i % 3 != 0) r.y = static_cast<int>(rng() % 2);
    if (r.y) r.o = label_overconfident(r);
    records.push_back(r);
  }
  save_records(records, dir / "r.jsonl");
  const auto loaded = load_records(dir / "r.jsonl", 51865);
  REQUIRE(loaded.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) CHECK(loaded[i] == records[i]);
}

TEST_CASE("three-record set round trips field for field") {
  TempDir dir("records3");
  std::vector<TokenRecord> records = {record_from_logits({2.0, 0.0}, 4), record_from_logits({1.0, 0.5, -1.0}, 9),
                                      record_from_logits({3.0}, 1)};
  records[0].y = 1;
  records[1].y = 0;
  records[1].o = 0;
  save_records(records, dir / "r.jsonl");
  CHECK(load_records(dir / "r.jsonl") == records);
}

TEST_CASE("utterances and manifest round trip") {
  TempDir dir("utts");
  UtteranceRecord u{"a", -7.5, "mel/a.mel", 298, 80, {1, 2, 3}, {1, 4, 3}};
  UtteranceRecord v{"b", std::nullopt, "mel/b.mel", 10, 80, {}, {5}};
  std::vector<UtteranceRecord> utts = {u, v};
  save_utterances(utts, dir / "u.jsonl");
  CHECK(load_utterances(dir / "u.jsonl") == utts);

  CorpusManifest m;
  m.seed = 99;
  m.k = 16;
  save_manifest(m, dir / "corpus.json");
  const CorpusManifest back = load_manifest(dir / "corpus.json");
  CHECK(back.seed == 99);
  CHECK(back.k == 16);
  CHECK(back.vocab_size == 51865);
}

TEST_CASE("loading rejects records that violate invariants") {
  TempDir dir("bad");
  auto write_one = [&](const TokenRecord& r) {
    std::ofstream(dir / "r.jsonl") << to_json(r).dump() << "\n";
  };
  TokenRecord r = record_from_logits({2.0, 0.0});

  TokenRecord conf = r;
  conf.confidence = 1.2;
  write_one(conf);
  CHECK_THROWS_WITH_AS(load_records(dir / "r.jsonl"), doctest::Contains("confidence out of range"), ValidationError);

  TokenRecord order = r;
  order.topk_logits = {0.0, 2.0};
  write_one(order);
  CHECK_THROWS_WITH_AS(load_records(dir / "r.jsonl"), doctest::Contains("topk order"), ValidationError);

  TokenRecord mismatch = r;
  mismatch.confidence = 0.5;
  write_one(mismatch);
  CHECK_THROWS_AS(load_records(dir / "r.jsonl"), ValidationError);

  TokenRecord o_without_error = r;
  o_without_error.y = 1;
  o_without_error.o = 1;
  write_one(o_without_error);
  CHECK_THROWS_AS(load_records(dir / "r.jsonl"), ValidationError);

  std::ofstream(dir / "r.jsonl") << "{not json\n";
  CHECK_THROWS_AS(load_records(dir / "r.jsonl"), ValidationError);

  CHECK_THROWS_AS(load_records(dir / "missing.jsonl"), IoError);
}

TEST_CASE("vocab size pins the tail count") {
  std::mt19937_64 rng(3);
  const TokenRecord r = random_record(rng, 32, 51865);
  CHECK(r.tail_count == 51833);
  CHECK_NOTHROW(validate(r, 51865));
  CHECK_THROWS_AS(validate(r, 50000), ValidationError);
}

TEST_CASE("align_and_label examples") {
  CHECK(align_and_label(std::vector{5, 7, 9}, std::vector{5, 7, 9}) == std::vector{1, 1, 1});
  CHECK(align_and_label(std::vector{5, 8, 9}, std::vector{5, 7, 9}) == std::vector{1, 0, 1});
  CHECK(align_and_label(std::vector{5, 7}, std::vector{5, 6, 7}) == std::vector{1, 1});
  const Alignment a = align(std::vector{5, 7}, std::vector{5, 6, 7});
  CHECK(a.deletions == 1);
  CHECK(a.matches == 2);
}

TEST_CASE("alignment agrees with exhaustive search on all short pairs") {
  const auto seqs = all_sequences(5, 4);
  std::size_t pairs = 0, mismatches = 0;
  for (const auto& h : seqs) {
    for (const auto& r : seqs) {
      const AlignmentOracle oracle(h, r);
      const Alignment a = align(h, r);
      const bool ok = a.ops == oracle.ops() && a.errors() == oracle.cost() && align_and_label(h, r) == oracle.labels();
      if (!ok) ++mismatches;
      ++pairs;
    }
  }
  CHECK(pairs == 1365u * 1365u);
  CHECK(mismatches == 0);
}

TEST_CASE("word error rate") {
  CHECK(compute_wer(std::vector{1, 2, 3}, std::vector{1, 2, 3}) == 0.0);
  CHECK(compute_wer(std::vector{1, 9, 3}, std::vector{1, 2, 3}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(compute_wer(std::vector<int>{}, std::vector{1, 2}) == 1.0);
  CHECK(compute_wer(std::vector{1, 2, 3, 4}, std::vector{1}) == 3.0);
  CHECK_THROWS_AS(compute_wer(std::vector{1}, std::vector<int>{}), ValidationError);
}

TEST_CASE("overconfidence labels") {
  TokenRecord r = record_from_logits({2.0, 0.0});
  auto with = [&](double c, int y) {
    TokenRecord t = r;
    t.confidence = c;
    t.y = y;
    return t;
  };
  CHECK(label_overconfident(with(0.8, 0), 0.7) == 1);
  CHECK(label_overconfident(with(0.95, 1)) == 0);
  CHECK(label_overconfident(with(0.69, 0), 0.7) == 0);
  CHECK(label_overconfident(with(0.7, 0), 0.7) == 1);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const TokenRecord t = with(u(rng), static_cast<int>(rng() % 2));
    int prev = 1;
    for (int k = 1; k < 20; ++k) {
      const int now = label_overconfident(t, 0.05 * k);
      CHECK(now <= prev);
      prev = now;
    }
  }
}

}  // TEST_SUITE
