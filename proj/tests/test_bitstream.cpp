#include <doctest.h>

#include <filesystem>
#include <random>

#include "pcac/bitstream.hpp"

using namespace pcac;

namespace {

ArchSpec tiny_arch() {
    ArchSpec a;
    a.c1 = 2;
    a.c2 = 3;
    a.latent_channels = 2;
    a.res_blocks = 1;
    return a;
}

VoxelizedFrame smooth_frame(size_t n, int extent, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::unordered_map<Coord, int, CoordHash> seen;
    VoxelizedFrame f;
    f.depth = 6;
    while (f.coords.size() < n) {
        Coord c = {int32_t(rng() % extent), int32_t(rng() % extent),
                   int32_t(rng() % extent)};
        if (!seen.emplace(c, 1).second) continue;
        f.coords.push_back(c);
        f.colors.push_back({uint8_t((c[0] * 9 + 40) % 256), uint8_t((c[1] * 7) % 256),
                            uint8_t((c[2] * 5 + 100) % 256)});
    }
    f.canonicalize();
    return f;
}

}  // namespace

TEST_CASE("frame round trip: decoded latent and recon match the encoder") {
    for (uint64_t trial = 0; trial < 5; ++trial) {
        auto m = CodecModel::create(tiny_arch(), 100 + trial);
        auto f = smooth_frame(50 + 10 * trial, 24, 200 + trial);
        auto er = encode_frame(f, nullptr, m);
        CHECK(er.enc.type == 'I');
        CHECK(er.enc.point_count == f.size());
        auto dr = decode_frame(er.enc, f.coords, nullptr, m);
        CHECK(dr.latent.coords == er.latent.coords);
        CHECK(dr.latent.values == er.latent.values);
        CHECK(dr.recon == er.recon);
    }
}

TEST_CASE("P-frame round trip with temporal context") {
    auto m = CodecModel::create(tiny_arch(), 7);
    auto f0 = smooth_frame(50, 24, 8);
    auto f1 = smooth_frame(50, 24, 8);  // same geometry, shifted colors
    for (auto& c : f1.colors) c[0] = uint8_t(c[0] ^ 3);
    auto e0 = encode_frame(f0, nullptr, m);
    auto e1 = encode_frame(f1, &e0.latent, m);
    CHECK(e1.enc.type == 'P');
    auto d0 = decode_frame(e0.enc, f0.coords, nullptr, m);
    auto d1 = decode_frame(e1.enc, f1.coords, &d0.latent, m);
    CHECK(d1.latent.values == e1.latent.values);
    CHECK(d1.recon == e1.recon);
}

TEST_CASE("empty frame: header-only record") {
    auto m = CodecModel::create(tiny_arch(), 9);
    VoxelizedFrame f;
    f.depth = 6;
    auto er = encode_frame(f, nullptr, m);
    CHECK(er.enc.point_count == 0);
    CHECK(er.enc.element_count == 0);
    CHECK(er.enc.payload.empty());
    CHECK(er.enc.bpp() == 0.0);
    auto dr = decode_frame(er.enc, {}, nullptr, m);
    CHECK(dr.latent.values.empty());
    CHECK(dr.recon.empty());
}

TEST_CASE("deterministic encoding: identical bytes for identical inputs") {
    auto m = CodecModel::create(tiny_arch(), 11);
    auto f = smooth_frame(60, 24, 12);
    auto a = encode_frame(f, nullptr, m);
    auto b = encode_frame(f, nullptr, m);
    CHECK(a.enc.payload == b.enc.payload);
    CHECK(a.enc.geom_hash == b.enc.geom_hash);
}

TEST_CASE("payload length tracks the cross-entropy accumulator") {
    auto m = CodecModel::create(tiny_arch(), 13);
    auto f = smooth_frame(120, 32, 14);
    auto er = encode_frame(f, nullptr, m);
    CHECK(er.cross_entropy_bits > 0);
    CHECK(er.enc.payload_bits() <= er.cross_entropy_bits * 1.01 + 128.0);
    // bpp accounting is exact
    CHECK(er.enc.bpp() * double(er.enc.point_count) ==
          doctest::Approx(er.enc.payload_bits()).epsilon(1e-12));
}

TEST_CASE("I-frame decode ignores a supplied temporal latent") {
    auto m = CodecModel::create(tiny_arch(), 15);
    auto f = smooth_frame(40, 24, 16);
    auto er = encode_frame(f, nullptr, m);
    auto junk = encode_frame(smooth_frame(40, 24, 17), nullptr, m).latent;
    auto with = decode_frame(er.enc, f.coords, &junk, m);
    auto without = decode_frame(er.enc, f.coords, nullptr, m);
    CHECK(with.latent.values == without.latent.values);
    CHECK(with.recon == without.recon);
}

TEST_CASE("P-frame decoded with wrong temporal latent diverges") {
    auto m = CodecModel::create(tiny_arch(), 19);
    auto f0 = smooth_frame(60, 24, 20);
    auto f1 = f0;
    auto e0 = encode_frame(f0, nullptr, m);
    auto e1 = encode_frame(f1, &e0.latent, m);
    LatentTensor wrong = e0.latent;
    for (auto& v : wrong.values) v = std::clamp(v + 2.0, -255.0, 255.0);
    bool diverged = false;
    try {
        auto d = decode_frame(e1.enc, f1.coords, &wrong, m);
        diverged = d.latent.values != e1.latent.values;
    } catch (const DecodeError&) {
        diverged = true;
    }
    CHECK(diverged);
}

TEST_CASE("geometry checksum mismatch refuses to decode") {
    auto m = CodecModel::create(tiny_arch(), 21);
    auto f = smooth_frame(40, 24, 22);
    auto er = encode_frame(f, nullptr, m);
    auto other = smooth_frame(40, 24, 23);
    CHECK_THROWS_AS(decode_frame(er.enc, other.coords, nullptr, m),
                    GeometryMismatchError);
}

TEST_CASE("container file round trip preserves every field") {
    auto m = CodecModel::create(tiny_arch(), 25);
    FrameSequence seq;
    for (uint64_t i = 0; i < 4; ++i) seq.frames.push_back(smooth_frame(30, 24, 30 + i));
    SequenceEncodeResult r;
    auto path = (std::filesystem::temp_directory_path() / "seq.pcas").string();
    encode_sequence_file(seq, m, 0xDEADBEEFull, 2, path, &r);
    auto back = read_sequence_file(path);
    CHECK(back.model_id == 0xDEADBEEFull);
    CHECK(back.gof == 2);
    REQUIRE(back.frames.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(back.frames[i].type == r.container.frames[i].type);
        CHECK(back.frames[i].point_count == r.container.frames[i].point_count);
        CHECK(back.frames[i].element_count == r.container.frames[i].element_count);
        CHECK(back.frames[i].geom_hash == r.container.frames[i].geom_hash);
        CHECK(back.frames[i].payload == r.container.frames[i].payload);
    }
    CHECK(back.frames[0].type == 'I');
    CHECK(back.frames[1].type == 'P');
    CHECK(back.frames[2].type == 'I');
    CHECK(back.frames[3].type == 'P');

    std::ofstream(path, std::ios::binary) << "NOPE";
    CHECK_THROWS_AS(read_sequence_file(path), ParseError);
}

TEST_CASE("sequence decode reproduces encoder reconstructions exactly") {
    auto m = CodecModel::create(tiny_arch(), 27);
    FrameSequence seq;
    for (uint64_t i = 0; i < 5; ++i) seq.frames.push_back(smooth_frame(35, 24, 40 + i));
    auto path = (std::filesystem::temp_directory_path() / "seq2.pcas").string();
    SequenceEncodeResult r;
    encode_sequence_file(seq, m, 42, 3, path, &r);
    auto recon = decode_sequence_file(path, seq, m, 42);
    REQUIRE(recon.frames.size() == seq.frames.size());
    for (size_t i = 0; i < seq.frames.size(); ++i) {
        CHECK(recon.frames[i].coords == r.recon.frames[i].coords);
        CHECK(recon.frames[i].colors == r.recon.frames[i].colors);
    }
    CHECK_THROWS_AS(decode_sequence_file(path, seq, m, 43), DecodeError);
}

TEST_CASE("G=1 degenerates to independent I-frame coding") {
    auto m = CodecModel::create(tiny_arch(), 29);
    FrameSequence seq;
    for (uint64_t i = 0; i < 3; ++i) seq.frames.push_back(smooth_frame(30, 24, 50 + i));
    auto r = encode_sequence_frames(seq, m, 0, 1);
    size_t total = 0;
    for (const auto& fr : r.container.frames) {
        CHECK(fr.type == 'I');
        total += fr.payload.size();
    }
    size_t independent = 0;
    for (const auto& f : seq.frames)
        independent += encode_frame(f, nullptr, m).enc.payload.size();
    CHECK(total == independent);
}
