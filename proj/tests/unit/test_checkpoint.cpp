#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>

#include "relectra/checkpoint.hpp"

using namespace relectra;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("record round trip is bit exact") {
    std::vector<TensorRecord> records;
    records.push_back({"embed.tok", {4, 3}, std::vector<float>(12, 0.5f)});
    records.push_back({"layer.0.attn.qk", {2, 2}, {1.0f, -2.25f, 3.5f, 0.0f}});
    records.push_back({"meta.step", {1}, {120000.0f}});
    // Values that are awkward in decimal round-trip fine in binary.
    records.push_back({"odd", {3}, {1e-38f, 3.14159265f, -0.0f}});

    std::string bytes = serialize_records(records);
    CHECK(bytes.substr(0, 4) == "RLCT");
    auto loaded = deserialize_records(bytes);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(loaded[i].name == records[i].name);
        CHECK(loaded[i].dims == records[i].dims);
        REQUIRE(loaded[i].values.size() == records[i].values.size());
        CHECK(std::memcmp(loaded[i].values.data(), records[i].values.data(),
                          records[i].values.size() * sizeof(float)) == 0);
    }
    // Serializing the loaded records byte-identically reproduces the file.
    CHECK(serialize_records(loaded) == bytes);
}

TEST_CASE("file header layout matches the contract") {
    std::vector<TensorRecord> records{{"ab", {2}, {1.0f, 2.0f}}};
    std::string b = serialize_records(records);
    // magic, version u32 LE, count u32 LE
    REQUIRE(b.size() >= 18);
    CHECK(b[0] == 'R');
    CHECK(b[3] == 'T');
    CHECK(static_cast<unsigned char>(b[4]) == kCheckpointVersion);
    CHECK(static_cast<unsigned char>(b[8]) == 1);
    // name length u16 LE then name bytes
    CHECK(static_cast<unsigned char>(b[12]) == 2);
    CHECK(b[14] == 'a');
    CHECK(b[15] == 'b');
    // rank u8, then dims u32 LE
    CHECK(static_cast<unsigned char>(b[16]) == 1);
    CHECK(static_cast<unsigned char>(b[17]) == 2);
}

TEST_CASE("write/read through the filesystem") {
    std::string path = temp_path("relectra_ckpt_test.rlct");
    std::vector<TensorRecord> records{{"x", {2, 2}, {1, 2, 3, 4}}};
    write_checkpoint(path, records);
    auto loaded = read_checkpoint(path);
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0].values == std::vector<float>{1, 2, 3, 4});
    std::remove(path.c_str());
}

TEST_CASE("malformed input is rejected") {
    CHECK_THROWS_AS(deserialize_records("XXXX"), DataError);
    std::string good = serialize_records({{"x", {1}, {1.0f}}});
    CHECK_THROWS_AS(deserialize_records(good.substr(0, good.size() - 2)), DataError);
    CHECK_THROWS_AS(deserialize_records(good + "zz"), DataError);
}

TEST_CASE("tensor conversion and u64 packing") {
    Tensor<double> t = Tensor<double>::from({2, 2}, {0.25, -1.5, 2.0, 3.0});
    TensorRecord r = to_record("t", t);
    CHECK(r.dims == std::vector<std::uint32_t>{2, 2});
    Tensor<double> back = Tensor<double>::zeros({2, 2});
    load_into(r, back);
    CHECK(back.data() == t.data());

    std::vector<std::uint64_t> vals{0xdeadbeefcafef00dULL, 0, 0xffffffffffffffffULL};
    CHECK(unpack_u64s(pack_u64s(vals)) == vals);
}
