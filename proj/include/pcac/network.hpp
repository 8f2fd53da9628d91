#ifndef PCAC_NETWORK_HPP
#define PCAC_NETWORK_HPP

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "pcac/autodiff.hpp"
#include "pcac/pointcloud.hpp"

namespace pcac {

// Channel plan. Production widths are fixed; tests shrink them to make
// exhaustive finite-difference sweeps affordable.
struct ArchSpec {
    int c1 = 32;              // first encoder width / last decoder width
    int c2 = 64;              // main trunk width
    int latent_channels = 64; // C_f at the bottleneck
    int res_blocks = 3;
    int alphabet = 255;       // coding alphabet [-A, A]
    double sigma_min = 1e-3;
    double sigma_max = 256.0;
};

// Quantized (or pre-quantization) bottleneck tensor at stride 8, element
// ordering canonical over coords with channels innermost.
struct LatentTensor {
    std::vector<Coord> coords;  // canonical order
    int channels = 0;
    std::vector<double> values;  // coords.size() * channels, row-major
    bool quantized = false;
    int stride = 8;

    size_t element_count() const { return coords.size() * size_t(channels); }
};

struct ConvP {
    ad::Parameter w, b;
};

struct ResBlockP {
    ConvP c1, c2;
};

namespace detail {

// Biases start small but nonzero: exact zeros would park pre-activations of
// zero-feature regions on the ReLU kink, where gradients are undefined.
inline void init_conv(ConvP& p, const std::string& name, int k3, int c_in,
                      int c_out, std::mt19937_64& rng) {
    p.w.resize(name + ".w", {k3, c_in, c_out});
    p.b.resize(name + ".b", {c_out});
    ad::init_uniform_fan(p.w, k3 * c_in, k3 * c_out, rng);
    for (auto& v : p.b.value) v = (2.0 * ad::uniform01(rng) - 1.0) * 0.05;
}

}  // namespace detail

// All learned parameters of encoder, decoder and context model, plus the
// lambda the model was trained for.
struct CodecModel {
    ArchSpec arch;
    double lambda = 0.0;

    ConvP enc1, enc2, enc_out;
    std::vector<ResBlockP> enc_res;
    ConvP dec1, dec2, dec3, dec_out;
    std::vector<ResBlockP> dec_res;
    ConvP ctx_ar, ctx_tmp, ctx_mix1, ctx_mix2;

    // bookkeeping blobs serialized alongside the weights
    ad::Parameter meta_arch, meta_lambda;

    static CodecModel create(const ArchSpec& arch, uint64_t seed) {
        CodecModel m;
        m.arch = arch;
        std::mt19937_64 rng(seed);
        const int k27 = 27, k125m = 62, k1 = 1;  // masked k5: offsets before center
        const int C = arch.latent_channels;
        detail::init_conv(m.enc1, "enc.conv1", k27, 3, arch.c1, rng);
        detail::init_conv(m.enc2, "enc.conv2", k27, arch.c1, arch.c2, rng);
        m.enc_res.resize(arch.res_blocks);
        for (int i = 0; i < arch.res_blocks; ++i) {
            const std::string n = "enc.res" + std::to_string(i);
            detail::init_conv(m.enc_res[i].c1, n + ".conv1", k27, arch.c2, arch.c2, rng);
            detail::init_conv(m.enc_res[i].c2, n + ".conv2", k27, arch.c2, arch.c2, rng);
        }
        detail::init_conv(m.enc_out, "enc.out", k27, arch.c2, C, rng);
        detail::init_conv(m.dec1, "dec.tconv1", k27, C, arch.c2, rng);
        m.dec_res.resize(arch.res_blocks);
        for (int i = 0; i < arch.res_blocks; ++i) {
            const std::string n = "dec.res" + std::to_string(i);
            detail::init_conv(m.dec_res[i].c1, n + ".conv1", k27, arch.c2, arch.c2, rng);
            detail::init_conv(m.dec_res[i].c2, n + ".conv2", k27, arch.c2, arch.c2, rng);
        }
        detail::init_conv(m.dec2, "dec.tconv2", k27, arch.c2, arch.c1, rng);
        detail::init_conv(m.dec3, "dec.tconv3", k27, arch.c1, arch.c1, rng);
        detail::init_conv(m.dec_out, "dec.out", k27, arch.c1, 3, rng);
        detail::init_conv(m.ctx_ar, "ctx.ar", k125m, C, C, rng);
        detail::init_conv(m.ctx_tmp, "ctx.tmp", k27, C, C, rng);
        detail::init_conv(m.ctx_mix1, "ctx.mix1", k1, 2 * C, 2 * C, rng);
        detail::init_conv(m.ctx_mix2, "ctx.mix2", k1, 2 * C, 2 * C, rng);
        m.sync_meta();
        return m;
    }

    void sync_meta() {
        meta_arch.resize("meta.arch", {7});
        meta_arch.value = {double(arch.c1), double(arch.c2),
                           double(arch.latent_channels), double(arch.res_blocks),
                           double(arch.alphabet), arch.sigma_min, arch.sigma_max};
        meta_lambda.resize("meta.lambda", {1});
        meta_lambda.value = {lambda};
    }

    std::vector<ad::Parameter*> trainable() {
        std::vector<ad::Parameter*> out;
        auto conv = [&](ConvP& c) {
            out.push_back(&c.w);
            out.push_back(&c.b);
        };
        conv(enc1);
        conv(enc2);
        for (auto& r : enc_res) {
            conv(r.c1);
            conv(r.c2);
        }
        conv(enc_out);
        conv(dec1);
        for (auto& r : dec_res) {
            conv(r.c1);
            conv(r.c2);
        }
        conv(dec2);
        conv(dec3);
        conv(dec_out);
        conv(ctx_ar);
        conv(ctx_tmp);
        conv(ctx_mix1);
        conv(ctx_mix2);
        return out;
    }

    void zero_grad() {
        for (auto* p : trainable()) p->zero_grad();
    }

    void save(const std::string& path) {
        sync_meta();
        std::vector<const ad::Parameter*> all;
        all.push_back(&meta_arch);
        all.push_back(&meta_lambda);
        for (auto* p : trainable()) all.push_back(p);
        ad::save_params(path, all);
    }

    static CodecModel load(const std::string& path) {
        // peek at meta.arch to size the parameter set, then load all
        ArchSpec probe;
        {
            CodecModel tmp;
            tmp.arch = probe;
            tmp.meta_arch.resize("meta.arch", {7});
            tmp.meta_lambda.resize("meta.lambda", {1});
            ad::load_params_prefix(path, {&tmp.meta_arch, &tmp.meta_lambda});
            probe.c1 = int(tmp.meta_arch.value[0]);
            probe.c2 = int(tmp.meta_arch.value[1]);
            probe.latent_channels = int(tmp.meta_arch.value[2]);
            probe.res_blocks = int(tmp.meta_arch.value[3]);
            probe.alphabet = int(tmp.meta_arch.value[4]);
            probe.sigma_min = tmp.meta_arch.value[5];
            probe.sigma_max = tmp.meta_arch.value[6];
        }
        CodecModel m = create(probe, 0);
        std::vector<ad::Parameter*> all;
        all.push_back(&m.meta_arch);
        all.push_back(&m.meta_lambda);
        for (auto* p : m.trainable()) all.push_back(p);
        ad::load_params(path, all);
        m.lambda = m.meta_lambda.value[0];
        return m;
    }
};

// Coordinate sets at strides 1, 2, 4, 8, all derivable from the losslessly
// known frame geometry.
struct ScaleCoords {
    std::array<std::vector<Coord>, 4> levels;  // stride 1, 2, 4, 8

    static ScaleCoords from_frame_coords(std::vector<Coord> coords) {
        std::sort(coords.begin(), coords.end());
        ScaleCoords s;
        s.levels[0] = std::move(coords);
        s.levels[1] = downsample_coords(s.levels[0], 1);
        s.levels[2] = downsample_coords(s.levels[1], 2);
        s.levels[3] = downsample_coords(s.levels[2], 4);
        return s;
    }
};

// Conv plans for one frame geometry; must outlive any Graph recorded on it.
struct CodecPlans {
    ad::ConvPlan enc1, enc2, enc_res, enc_out;  // enc_res reused by all blocks
    ad::ConvPlan dec1, dec_res, dec2, dec3, dec_out;

    static CodecPlans build(const ScaleCoords& sc) {
        CodecPlans p;
        p.enc1 = ad::make_conv_plan(sc.levels[0], 1, 3, 2);
        if (p.enc1.out_coords != sc.levels[1])
            throw ContractError("scale mismatch at stride 2");
        p.enc2 = ad::make_conv_plan(sc.levels[1], 2, 3, 2);
        p.enc_res = ad::make_conv_plan(sc.levels[2], 4, 3, 1);
        p.enc_out = ad::make_conv_plan(sc.levels[2], 4, 3, 2);
        p.dec1 = ad::make_tconv_plan(sc.levels[3], 8, 3, sc.levels[2]);
        p.dec_res = p.enc_res;
        p.dec2 = ad::make_tconv_plan(sc.levels[2], 4, 3, sc.levels[1]);
        p.dec3 = ad::make_tconv_plan(sc.levels[1], 2, 3, sc.levels[0]);
        p.dec_out = ad::make_conv_plan(sc.levels[0], 1, 3, 1);
        return p;
    }
};

inline std::vector<double> normalized_colors(const VoxelizedFrame& f) {
    std::vector<double> x(f.size() * 3);
    for (size_t i = 0; i < f.size(); ++i)
        for (int c = 0; c < 3; ++c) x[i * 3 + c] = f.colors[i][c] / 255.0;
    return x;
}

inline int res_block(ad::Graph& g, int x_id, const ad::ConvPlan& plan, int ch,
                     ResBlockP& p) {
    int h = ad::conv_op(g, x_id, plan, ch, p.c1.w, p.c1.b);
    h = ad::relu(g, h);
    h = ad::conv_op(g, h, plan, ch, p.c2.w, p.c2.b);
    return ad::add(g, x_id, h);
}

// Analysis transform: colors in [0,1] -> unquantized latent at stride 8.
// Returns the graph node; latent coords are sc.levels[3].
inline int encode_features_node(ad::Graph& g, const VoxelizedFrame& frame,
                                const ScaleCoords& sc, const CodecPlans& plans,
                                CodecModel& m) {
    if (frame.size() == 0) throw ContractError("encode_features: empty frame");
    int x = g.input(normalized_colors(frame));
    x = ad::conv_op(g, x, plans.enc1, 3, m.enc1.w, m.enc1.b);
    x = ad::relu(g, x);
    x = ad::conv_op(g, x, plans.enc2, m.arch.c1, m.enc2.w, m.enc2.b);
    x = ad::relu(g, x);
    for (auto& r : m.enc_res) x = res_block(g, x, plans.enc_res, m.arch.c2, r);
    x = ad::conv_op(g, x, plans.enc_out, m.arch.c2, m.enc_out.w, m.enc_out.b);
    return x;
}

inline LatentTensor encode_features(const VoxelizedFrame& frame, CodecModel& m) {
    const auto sc = ScaleCoords::from_frame_coords(frame.coords);
    const auto plans = CodecPlans::build(sc);
    ad::Graph g;
    const int node = encode_features_node(g, frame, sc, plans, m);
    LatentTensor lat;
    lat.coords = sc.levels[3];
    lat.channels = m.arch.latent_channels;
    lat.values = g.val(node);
    lat.quantized = false;
    return lat;
}

// Synthesis transform: quantized latent -> per-point colors in [0,1]
// (unclamped node; clamp applied by callers on the inference path).
inline int decode_features_node(ad::Graph& g, int latent_node,
                                const CodecPlans& plans, CodecModel& m) {
    int x = ad::conv_op(g, latent_node, plans.dec1, m.arch.latent_channels,
                        m.dec1.w, m.dec1.b);
    x = ad::relu(g, x);
    for (auto& r : m.dec_res) x = res_block(g, x, plans.dec_res, m.arch.c2, r);
    x = ad::conv_op(g, x, plans.dec2, m.arch.c2, m.dec2.w, m.dec2.b);
    x = ad::relu(g, x);
    x = ad::conv_op(g, x, plans.dec3, m.arch.c1, m.dec3.w, m.dec3.b);
    x = ad::relu(g, x);
    x = ad::conv_op(g, x, plans.dec_out, m.arch.c1, m.dec_out.w, m.dec_out.b);
    return x;
}

inline std::vector<double> decode_features(const LatentTensor& latent,
                                           const ScaleCoords& sc, CodecModel& m) {
    if (!latent.quantized)
        throw ContractError("decode_features: latent must be quantized");
    if (latent.coords != sc.levels[3])
        throw GeometryMismatchError("decode_features: latent/geometry mismatch");
    const auto plans = CodecPlans::build(sc);
    ad::Graph g;
    const int lat = g.input(latent.values);
    const int node = decode_features_node(g, lat, plans, m);
    std::vector<double> out = g.val(node);
    for (auto& v : out) v = std::clamp(v, 0.0, 1.0);
    return out;
}

// Training quantizer: independent additive uniform noise on (-0.5, 0.5].
inline std::vector<double> make_uniform_noise(size_t n, std::mt19937_64& rng) {
    std::vector<double> u(n);
    for (auto& v : u) v = 0.5 - ad::uniform01(rng);
    return u;
}

// Inference quantizer: round half to even, clamp to [-A, A]. Clamp events
// bias rate estimates, so the count is surfaced.
inline LatentTensor quantize_infer(const LatentTensor& latent, int alphabet,
                                   int* clamp_count = nullptr) {
    if (latent.quantized) throw ContractError("quantize_infer: already quantized");
    LatentTensor q = latent;
    int clamped = 0;
    const double a = double(alphabet);
    for (auto& v : q.values) {
        double r = std::nearbyint(v);  // ties to even under default FP mode
        if (r > a) {
            r = a;
            ++clamped;
        } else if (r < -a) {
            r = -a;
            ++clamped;
        }
        v = r;
    }
    q.quantized = true;
    if (clamp_count) *clamp_count = clamped;
    return q;
}

// Inference-path analysis: frame -> coded latent.
inline LatentTensor encode_and_quantize(const VoxelizedFrame& frame, CodecModel& m,
                                        int* clamp_count = nullptr) {
    return quantize_infer(encode_features(frame, m), m.arch.alphabet, clamp_count);
}

}  // namespace pcac

#endif  // PCAC_NETWORK_HPP
