#include "doctest.h"

#include "lmdet/util.hpp"

using namespace lmdet;

TEST_CASE("sha256 known vectors") {
    CHECK(sha256_hex(std::string("")) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex(std::string("abc")) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex(std::string(
              "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")) ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    // one million 'a': spans many blocks
    std::string acc(1000000, 'a');
    CHECK(sha256_hex(acc) ==
          "cdc76e5c9914fb9281a1c7e284d73e67f1809a48a497200e046d39ccc7112cd0");
}

TEST_CASE("rng determinism and ranges") {
    Rng a(42), b(42), c(43);
    bool identical = true, differs = false;
    for (int i = 0; i < 1000; ++i) {
        const double va = a.uniform();
        if (va != b.uniform()) identical = false;
        if (va != c.uniform()) differs = true;
        CHECK(va >= 0.0);
        CHECK(va < 1.0);
    }
    CHECK(identical);
    CHECK(differs);
}

TEST_CASE("rng normal moments") {
    Rng r(7);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        sum += v;
        sq += v * v;
    }
    CHECK(std::abs(sum / n) < 0.01);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("csv round trip") {
    const std::string path = "/tmp/lmdet_test_csv.csv";
    write_text_file(path, "a,b,c\n1,2.5,x\n");
    auto rows = read_csv(path);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0][0] == "a");
    CHECK(rows[1][1] == "2.5");
}
