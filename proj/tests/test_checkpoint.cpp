// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "cktwam/checkpoint.hpp"

using namespace cktwam;

namespace {

std::string tmp_file(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<char> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("checkpoint round-trips bitwise and re-saves identically", "[checkpoint]") {
    RunConfig cfg = desk_config();
    AdapterBank<double> bank(cfg.ckt);
    RngStream rng(31, 0, 0);
    for (auto& [name, t] : bank.named_params())
        for (auto& v : t->mutable_values()) v = rng.gaussian();
    std::string p1 = tmp_file("cktwam_ckpt_a.ckpt");
    std::string p2 = tmp_file("cktwam_ckpt_b.ckpt");
    checkpoint::save(p1, cfg, 42, bank);

    AdapterBank<double> restored(cfg.ckt);
    CHECK(checkpoint::load(p1, cfg, restored) == 42);
    for (size_t i = 0; i < bank.named_params().size(); ++i)
        CHECK(restored.named_params()[i].second->values() == bank.named_params()[i].second->values());

    checkpoint::save(p2, cfg, 42, restored);
    CHECK(read_bytes(p1) == read_bytes(p2));
}

TEST_CASE("checkpoint rejects mismatched configs", "[checkpoint]") {
    RunConfig cfg = desk_config();
    AdapterBank<double> bank(cfg.ckt);
    std::string path = tmp_file("cktwam_ckpt_cfg.ckpt");
    checkpoint::save(path, cfg, 1, bank);

    RunConfig other = cfg;
    other.ckt.m = cfg.ckt.m / 2;
    other.ckt.k = 1;
    AdapterBank<double> target(other.ckt);
    CHECK_THROWS_AS(checkpoint::load(path, other, target), ConfigError);

    RunConfig other2 = cfg;
    other2.teacher.seed += 1;
    AdapterBank<double> target2(other2.ckt);
    CHECK_THROWS_AS(checkpoint::load(path, other2, target2), ConfigError);
}

TEST_CASE("checkpoint rejects a wrong dtype and corrupt payloads", "[checkpoint]") {
    RunConfig cfg = desk_config();
    AdapterBank<double> bank(cfg.ckt);
    std::string path = tmp_file("cktwam_ckpt_dtype.ckpt");
    checkpoint::save(path, cfg, 7, bank);
    AdapterBank<float> wrong(cfg.ckt);
    CHECK_THROWS_AS(checkpoint::load(path, cfg, wrong), ConfigError);

    auto bytes = read_bytes(path);
    bytes[bytes.size() - 16] ^= 0x40;  // flip a payload bit, keep the stored checksum
    std::string corrupt = tmp_file("cktwam_ckpt_corrupt.ckpt");
    std::ofstream out(corrupt, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    AdapterBank<double> target(cfg.ckt);
    CHECK_THROWS_AS(checkpoint::load(corrupt, cfg, target), IntegrityError);
}

TEST_CASE("checkpoint rejects junk files", "[checkpoint]") {
    std::string path = tmp_file("cktwam_not_a_ckpt.bin");
    std::ofstream out(path, std::ios::binary);
    out << "definitely not a checkpoint";
    out.close();
    RunConfig cfg = desk_config();
    AdapterBank<double> bank(cfg.ckt);
    CHECK_THROWS_AS(checkpoint::load(path, cfg, bank), ConfigError);
}
