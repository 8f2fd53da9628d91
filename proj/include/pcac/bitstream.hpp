#ifndef PCAC_BITSTREAM_HPP
#define PCAC_BITSTREAM_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pcac/context_model.hpp"
#include "pcac/network.hpp"
#include "pcac/range_coder.hpp"

namespace pcac {

inline uint64_t fnv1a(const uint8_t* data, size_t size, uint64_t h = 0xCBF29CE484222325ull) {
    for (size_t i = 0; i < size; ++i) {
        h ^= data[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

inline uint64_t geometry_hash(const std::vector<Coord>& coords) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (const auto& c : coords)
        for (int32_t v : c) {
            uint32_t u = uint32_t(v);
            uint8_t bytes[4] = {uint8_t(u), uint8_t(u >> 8), uint8_t(u >> 16),
                                uint8_t(u >> 24)};
            h = fnv1a(bytes, 4, h);
        }
    return h;
}

inline uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    uint64_t h = 0xCBF29CE484222325ull;
    char buf[65536];
    while (in.read(buf, sizeof buf) || in.gcount() > 0)
        h = fnv1a(reinterpret_cast<const uint8_t*>(buf), size_t(in.gcount()), h);
    return h;
}

// ---------------------------------------------------------------------------
// Per-frame coding. Geometry travels out-of-band; the frame record carries a
// geometry checksum so mismatches fail fast instead of desynchronizing the
// coder.

struct EncodedFrame {
    char type = 'I';  // 'I': zero temporal context, 'P': previous latent
    uint64_t point_count = 0;
    uint64_t element_count = 0;
    uint64_t geom_hash = 0;
    std::vector<uint8_t> payload;

    double payload_bits() const { return double(payload.size()) * 8.0; }
    double bpp() const {
        return point_count ? payload_bits() / double(point_count) : 0.0;
    }
};

struct FrameEncodeResult {
    EncodedFrame enc;
    LatentTensor latent;         // identical to the decoder's latent
    std::vector<double> recon;   // normalized colors, identical to decoder's
    double cross_entropy_bits = 0;
};

inline FrameEncodeResult encode_frame(const VoxelizedFrame& frame,
                                      const LatentTensor* temporal,
                                      CodecModel& m) {
    FrameEncodeResult r;
    r.enc.type = temporal ? 'P' : 'I';
    r.enc.point_count = frame.size();
    r.enc.geom_hash = geometry_hash(frame.coords);
    if (frame.size() == 0) {
        r.latent.channels = m.arch.latent_channels;
        r.latent.quantized = true;
        return r;
    }

    r.latent = encode_and_quantize(frame, m);
    const int C = m.arch.latent_channels;
    const int A = m.arch.alphabet;
    r.enc.element_count = r.latent.element_count();

    const auto tmp = temporal_align(temporal, r.latent.coords, C);
    ContextEval ctx(m, r.latent.coords, tmp);

    // strict coding order: coordinates canonical, channels innermost; params
    // for element i computed before its features are revealed
    std::vector<double> revealed(r.latent.values.size(), 0.0);
    std::vector<double> mu(C), sigma(C);
    RangeEncoder coder;
    for (size_t i = 0; i < r.latent.coords.size(); ++i) {
        ctx.params_at(i, revealed.data(), mu.data(), sigma.data());
        for (int c = 0; c < C; ++c) {
            const double v = r.latent.values[i * size_t(C) + c];
            const int s = int(v);
            if (double(s) != v || s < -A || s > A)
                throw ContractError("encode_frame: latent symbol outside alphabet");
            coder.encode(build_symbol_model(mu[size_t(c)], sigma[size_t(c)], A), s);
            r.cross_entropy_bits += symbol_bits(v, mu[size_t(c)], sigma[size_t(c)], A);
        }
        for (int c = 0; c < C; ++c)
            revealed[i * size_t(C) + c] = r.latent.values[i * size_t(C) + c];
    }
    r.enc.payload = coder.finish();

    const auto sc = ScaleCoords::from_frame_coords(frame.coords);
    r.recon = decode_features(r.latent, sc, m);
    return r;
}

struct FrameDecodeResult {
    LatentTensor latent;
    std::vector<double> recon;  // normalized colors
};

inline FrameDecodeResult decode_frame(const EncodedFrame& enc,
                                      const std::vector<Coord>& geometry,
                                      const LatentTensor* temporal,
                                      CodecModel& m) {
    if (geometry_hash(geometry) != enc.geom_hash)
        throw GeometryMismatchError("decode_frame: geometry checksum mismatch");
    if (enc.point_count != geometry.size())
        throw GeometryMismatchError("decode_frame: point count mismatch");

    FrameDecodeResult r;
    const int C = m.arch.latent_channels;
    r.latent.channels = C;
    r.latent.quantized = true;
    if (enc.point_count == 0) return r;

    const auto sc = ScaleCoords::from_frame_coords(geometry);
    r.latent.coords = sc.levels[3];
    if (enc.element_count != r.latent.coords.size() * size_t(C))
        throw DecodeError("decode_frame: element count mismatch");
    r.latent.values.assign(enc.element_count, 0.0);

    const LatentTensor* tctx = enc.type == 'I' ? nullptr : temporal;
    const auto tmp = temporal_align(tctx, r.latent.coords, C);
    ContextEval ctx(m, r.latent.coords, tmp);

    const int A = m.arch.alphabet;
    std::vector<double> mu(C), sigma(C);
    RangeDecoder coder(enc.payload.data(), enc.payload.size());
    for (size_t i = 0; i < r.latent.coords.size(); ++i) {
        ctx.params_at(i, r.latent.values.data(), mu.data(), sigma.data());
        for (int c = 0; c < C; ++c) {
            const int s = coder.decode(
                build_symbol_model(mu[size_t(c)], sigma[size_t(c)], A));
            r.latent.values[i * size_t(C) + c] = double(s);
        }
    }

    r.recon = decode_features(r.latent, sc, m);
    return r;
}

inline VoxelizedFrame recon_to_frame(const std::vector<Coord>& geometry,
                                     const std::vector<double>& recon, int depth) {
    VoxelizedFrame f;
    f.depth = depth;
    f.coords = geometry;
    f.colors.resize(geometry.size());
    for (size_t i = 0; i < geometry.size(); ++i)
        for (int c = 0; c < 3; ++c)
            f.colors[i][size_t(c)] = uint8_t(
                std::clamp(std::nearbyint(recon[i * 3 + size_t(c)] * 255.0), 0.0, 255.0));
    return f;
}

// ---------------------------------------------------------------------------
// Sequence container: magic "PCAS", little-endian integers, per-frame offset
// table, then frame records.

struct EncodedSequence {
    uint64_t model_id = 0;
    uint32_t gof = 8;
    std::vector<EncodedFrame> frames;
};

inline void write_sequence_file(const std::string& path, const EncodedSequence& s) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write("PCAS", 4);
    ad::detail::put<uint32_t>(out, 1);
    ad::detail::put<uint64_t>(out, s.model_id);
    ad::detail::put<uint32_t>(out, s.gof);
    ad::detail::put<uint32_t>(out, uint32_t(s.frames.size()));
    uint64_t offset = 4 + 4 + 8 + 4 + 4 + 8ull * s.frames.size();
    for (const auto& f : s.frames) {
        ad::detail::put<uint64_t>(out, offset);
        offset += 1 + 8 + 8 + 8 + 8 + f.payload.size();
    }
    for (const auto& f : s.frames) {
        ad::detail::put<uint8_t>(out, uint8_t(f.type));
        ad::detail::put<uint64_t>(out, f.point_count);
        ad::detail::put<uint64_t>(out, f.element_count);
        ad::detail::put<uint64_t>(out, f.geom_hash);
        ad::detail::put<uint64_t>(out, f.payload.size());
        out.write(reinterpret_cast<const char*>(f.payload.data()),
                  std::streamsize(f.payload.size()));
    }
    if (!out) throw IoError("write failed: " + path);
}

inline EncodedSequence read_sequence_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "PCAS", 4) != 0)
        throw ParseError("sequence: bad magic");
    if (ad::detail::get<uint32_t>(in) != 1)
        throw ParseError("sequence: unsupported version");
    EncodedSequence s;
    s.model_id = ad::detail::get<uint64_t>(in);
    s.gof = ad::detail::get<uint32_t>(in);
    const uint32_t count = ad::detail::get<uint32_t>(in);
    std::vector<uint64_t> offsets(count);
    for (auto& o : offsets) o = ad::detail::get<uint64_t>(in);
    for (uint32_t i = 1; i < count; ++i)
        if (offsets[i] <= offsets[i - 1])
            throw ParseError("sequence: offsets not increasing");
    s.frames.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
        in.seekg(std::streamoff(offsets[i]));
        auto& f = s.frames[i];
        f.type = char(ad::detail::get<uint8_t>(in));
        if (f.type != 'I' && f.type != 'P')
            throw ParseError("sequence: bad frame type");
        f.point_count = ad::detail::get<uint64_t>(in);
        f.element_count = ad::detail::get<uint64_t>(in);
        f.geom_hash = ad::detail::get<uint64_t>(in);
        const uint64_t psize = ad::detail::get<uint64_t>(in);
        f.payload.resize(psize);
        if (psize &&
            !in.read(reinterpret_cast<char*>(f.payload.data()), std::streamoff(psize)))
            throw ParseError("sequence: truncated payload");
    }
    return s;
}

struct SequenceEncodeResult {
    EncodedSequence container;
    std::vector<double> bpp;                // per frame
    std::vector<double> cross_entropy_bits; // per frame
    FrameSequence recon;                    // encoder-side reconstructions
};

// Frame t is an I-frame when t mod G = 0, otherwise a P-frame conditioned on
// the decoded latent of frame t-1.
inline SequenceEncodeResult encode_sequence_frames(const FrameSequence& seq,
                                                   CodecModel& m, uint64_t model_id,
                                                   int gof) {
    if (gof < 1) throw ContractError("encode: gof must be >= 1");
    SequenceEncodeResult out;
    out.container.model_id = model_id;
    out.container.gof = uint32_t(gof);
    std::optional<LatentTensor> prev;
    for (size_t t = 0; t < seq.frames.size(); ++t) {
        const bool intra = t % size_t(gof) == 0;
        try {
            auto fr = encode_frame(seq.frames[t],
                                   intra ? nullptr : (prev ? &*prev : nullptr), m);
            out.container.frames.push_back(fr.enc);
            out.bpp.push_back(fr.enc.bpp());
            out.cross_entropy_bits.push_back(fr.cross_entropy_bits);
            out.recon.frames.push_back(recon_to_frame(
                seq.frames[t].coords, fr.recon, seq.frames[t].depth));
            prev = std::move(fr.latent);
        } catch (const Error& e) {
            throw Error("frame " + std::to_string(t) + ": " + e.what());
        }
    }
    return out;
}

inline void encode_sequence_file(const FrameSequence& seq, CodecModel& m,
                                 uint64_t model_id, int gof,
                                 const std::string& path,
                                 SequenceEncodeResult* result = nullptr) {
    auto r = encode_sequence_frames(seq, m, model_id, gof);
    write_sequence_file(path, r.container);
    if (result) *result = std::move(r);
}

// geometry: per-frame coordinate sets matching encode-time geometry.
inline FrameSequence decode_sequence_file(const std::string& path,
                                          const FrameSequence& geometry,
                                          CodecModel& m, uint64_t model_id) {
    const EncodedSequence s = read_sequence_file(path);
    if (s.model_id != model_id)
        throw DecodeError("decode: model identifier mismatch, refusing to decode");
    if (s.frames.size() != geometry.frames.size())
        throw GeometryMismatchError("decode: frame count mismatch");
    FrameSequence out;
    std::optional<LatentTensor> prev;
    for (size_t t = 0; t < s.frames.size(); ++t) {
        try {
            auto fr = decode_frame(s.frames[t], geometry.frames[t].coords,
                                   prev ? &*prev : nullptr, m);
            out.frames.push_back(recon_to_frame(geometry.frames[t].coords, fr.recon,
                                                geometry.frames[t].depth));
            prev = std::move(fr.latent);
        } catch (const DecodeError& e) {
            throw DecodeError("frame " + std::to_string(t) + ": " + e.what());
        } catch (const GeometryMismatchError& e) {
            throw GeometryMismatchError("frame " + std::to_string(t) + ": " +
                                        e.what());
        } catch (const Error& e) {
            throw Error("frame " + std::to_string(t) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace pcac

#endif  // PCAC_BITSTREAM_HPP
