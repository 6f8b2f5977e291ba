#include <set>

#include "doctest.h"
#include "thermalign/evalkit.hpp"
#include "thermalign/vocab.hpp"

using namespace thermalign;

TEST_CASE("default vocabulary has exactly 64 tokens, all distinct") {
  const Vocabulary v = Vocabulary::default_vocab();
  CHECK(v.size() == 64);
  std::set<std::string> uniq(v.tokens().begin(), v.tokens().end());
  CHECK(uniq.size() == 64);
}

TEST_CASE("special token ids are pinned") {
  const Vocabulary v = Vocabulary::default_vocab();
  CHECK(v.bos() == 0);
  CHECK(v.eos() == 1);
  CHECK(v.pad() == 2);
  CHECK(v.img() == 3);
  CHECK(v.token(0) == "<bos>");
  CHECK(v.token(1) == "<eos>");
  CHECK(v.token(2) == "<pad>");
  CHECK(v.token(3) == "<image>");
}

TEST_CASE("id and token are inverse; absent words give -1") {
  const Vocabulary v = Vocabulary::default_vocab();
  for (int i = 0; i < v.size(); ++i) CHECK(v.id(v.token(i)) == i);
  CHECK(v.id("giraffe") == -1);
  CHECK(v.id("") == -1);
}

TEST_CASE("tokenize splits words, digits and punctuation") {
  const Vocabulary v = Vocabulary::default_vocab();
  const auto ids = v.tokenize("Deer; 12");
  REQUIRE(ids.size() == 5);
  CHECK(v.token(ids[0]) == "Deer");
  CHECK(v.token(ids[1]) == ";");
  CHECK(v.token(ids[2]) == " ");
  CHECK(v.token(ids[3]) == "1");
  CHECK(v.token(ids[4]) == "2");
}

TEST_CASE("tokenize treats the image marker as one token") {
  const Vocabulary v = Vocabulary::default_vocab();
  const auto ids = v.tokenize("<image>\nIdentify");
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == v.img());
  CHECK(v.token(ids[1]) == "\n");
  CHECK(v.token(ids[2]) == "Identify");
}

TEST_CASE("detokenize(tokenize(x)) == x for in-vocabulary text") {
  const Vocabulary v = Vocabulary::default_vocab();
  for (const std::string s :
       {std::string("Rhino; 7."), std::string("<image>\nA photo of a herd"),
        std::string("deer, rhino, elephant: 3 (4) 5")}) {
    CHECK(v.detokenize(v.tokenize(s), /*skip_special=*/false) == s);
  }
}

TEST_CASE("local evaluation prompts tokenize and round-trip") {
  // habitat prompts go to remote backends only, so they may use words the
  // toy vocabulary lacks; closed/open must tokenize exactly
  const Vocabulary v = Vocabulary::default_vocab();
  for (PromptMode mode : {PromptMode::closed_set, PromptMode::open_set}) {
    const std::string prompt = render_prompt(mode);
    CHECK(v.detokenize(v.tokenize(prompt), false) == prompt);
  }
  for (const char* answer : {"Deer; 1", "Elephant; 2", "Rhino; 12"})
    CHECK(v.detokenize(v.tokenize(answer), false) == answer);
}

TEST_CASE("unknown fragments raise UnknownToken naming the culprit") {
  const Vocabulary v = Vocabulary::default_vocab();
  CHECK_THROWS_WITH_AS(v.tokenize("giraffe"), doctest::Contains("giraffe"), UnknownToken);
  CHECK_THROWS_AS(v.tokenize("Deer @ 3"), UnknownToken);
}

TEST_CASE("detokenize skips bos/eos/pad but keeps the image marker") {
  const Vocabulary v = Vocabulary::default_vocab();
  const std::vector<int> ids = {v.bos(), v.img(), v.id("Deer"), v.eos(), v.pad()};
  CHECK(v.detokenize(ids) == "<image>Deer");
  CHECK(v.detokenize(ids, false) == "<bos><image>Deer<eos><pad>");
}

TEST_CASE("constructor validates the special ids") {
  CHECK_THROWS_AS(Vocabulary({"a", "b"}, 0, 1, 2, 3), Error);
  CHECK_THROWS_AS(Vocabulary({"a", "b", "c", "d"}, -1, 1, 2, 3), Error);
}
