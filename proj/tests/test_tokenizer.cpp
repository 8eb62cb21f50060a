#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "clip/tokenizer.h"
#include "core/errors.h"
#include "fixture/fixture.h"

using namespace ipc;

static tokenizer fixture_tok() {
    tokenizer t;
    t.set_vocab(fixture::fixture_vocab());
    return t;
}

TEST_CASE("word counts drive the eos position convention") {
    auto t = fixture_tok();
    CHECK(t.tokenize("").empty());
    CHECK(t.tokenize("a photo of a cat").size() == 5);
    CHECK(t.tokenize("A  PHOTO, of a: cat!!").size() == 5); // case and punctuation insensitive
}

TEST_CASE("unknown words map to <unk>") {
    auto t = fixture_tok();
    auto ids = t.tokenize("a zzzunknownzzz cat");
    REQUIRE(ids.size() == 3);
    CHECK(ids[1] == tokenizer::UNK);
    CHECK(ids[0] != tokenizer::UNK);
}

TEST_CASE("serialize round trip") {
    auto t = fixture_tok();
    auto bytes = t.serialize();
    auto t2 = tokenizer::deserialize(bytes);
    CHECK(t2.words == t.words);
    CHECK(t2.tokenize("a red circle") == t.tokenize("a red circle"));
}

TEST_CASE("vocab must carry the specials") {
    tokenizer t;
    CHECK_THROWS_AS(t.set_vocab({"a", "b"}), integrity_error);
}
