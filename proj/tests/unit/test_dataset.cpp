#include <catch2/catch_amalgamated.hpp>

#include "ebfkit/dataset.hpp"
#include "ebfkit/errors.hpp"

#include <sstream>

using namespace ebfkit;

TEST_CASE("csv columns are typed by content", "[dataset]") {
    std::istringstream in("y,x,g\n1.5,2,a\n-3,4e-1,b\n0,1,a\n");
    const auto d = read_csv(in);
    REQUIRE(d.n_rows() == 3);
    CHECK(d.is_numeric("y"));
    CHECK(d.is_numeric("x"));
    CHECK(d.is_categorical("g"));
    CHECK(d.numeric("x")[1] == 0.4);
    CHECK(d.categorical("g").levels == std::vector<std::string>{"a", "b"});
    CHECK(d.categorical("g").codes == std::vector<int>{0, 1, 0});
    CHECK(d.column_names() == std::vector<std::string>{"y", "x", "g"});
}

TEST_CASE("csv round trip", "[dataset]") {
    Dataset d;
    d.add_numeric("y", {0.1, 1.0 / 3.0, -2e-300});
    d.add_categorical("g", std::vector<std::string>{"u", "v", "u"});
    std::ostringstream out;
    write_csv(out, d);
    std::istringstream in(out.str());
    const auto back = read_csv(in);
    CHECK(back.numeric("y") == d.numeric("y"));
    CHECK(back.categorical("g").codes == d.categorical("g").codes);
}

TEST_CASE("subset re-derives levels", "[dataset]") {
    Dataset d;
    d.add_numeric("y", {1, 2, 3, 4});
    d.add_categorical("g", std::vector<std::string>{"a", "b", "c", "b"});
    const auto s = d.subset({3, 0});
    CHECK(s.numeric("y") == std::vector<double>{4, 1});
    CHECK(s.categorical("g").levels == std::vector<std::string>{"b", "a"});
}

TEST_CASE("malformed data is rejected", "[dataset]") {
    std::istringstream ragged("a,b\n1,2\n3\n");
    CHECK_THROWS_AS(read_csv(ragged), InputError);
    std::istringstream empty_cell("a,b\n1,\n");
    CHECK_THROWS_AS(read_csv(empty_cell), InputError);
    Dataset d;
    d.add_numeric("y", {1, 2});
    CHECK_THROWS_AS(d.add_numeric("x", {1, 2, 3}), InputError);
    CHECK_THROWS_AS(d.add_numeric("y", {1, 2}), InputError);
    CHECK_THROWS_AS(d.numeric("nope"), InputError);
    CHECK_THROWS_AS(read_csv_file("/nonexistent/file.csv"), InputError);
}
