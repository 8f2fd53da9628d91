#ifndef PCAC_CONTEXT_MODEL_HPP
#define PCAC_CONTEXT_MODEL_HPP

#include <cmath>
#include <optional>
#include <vector>

#include "pcac/autodiff.hpp"
#include "pcac/network.hpp"
#include "pcac/pointcloud.hpp"

namespace pcac {

// Per-element Gaussian parameters, already snapped to their coding grids.
struct GaussianParams {
    std::vector<double> mu, sigma;  // size coords * channels
};

// ---------------------------------------------------------------------------
// Coding grids. Entropy decoding requires the decoder's (mu, sigma) to match
// the encoder's bit for bit; snapping to coarse grids makes that robust even
// across compilers. Both grids are format constants (bitstream header).

constexpr int kMuGridShift = 8;       // mu step = 1/256
constexpr int kSigmaGridLevels = 64;  // geometric grid over [sigma_min, sigma_max]

inline double snap_mu(double mu) {
    return std::nearbyint(mu * 256.0) / 256.0;
}

struct SigmaGrid {
    std::vector<double> levels;

    explicit SigmaGrid(double sigma_min = 1e-3, double sigma_max = 256.0) {
        levels.resize(kSigmaGridLevels);
        const double step =
            std::log(sigma_max / sigma_min) / double(kSigmaGridLevels - 1);
        for (int i = 0; i < kSigmaGridLevels; ++i)
            levels[i] = sigma_min * std::exp(step * i);
        levels.front() = sigma_min;
        levels.back() = sigma_max;
    }

    // nearest level in log space; idempotent
    double snap(double sigma) const {
        const double s = std::clamp(sigma, levels.front(), levels.back());
        const double step = std::log(levels.back() / levels.front()) /
                            double(kSigmaGridLevels - 1);
        int idx = int(std::nearbyint(std::log(s / levels.front()) / step));
        idx = std::clamp(idx, 0, kSigmaGridLevels - 1);
        double best = levels[idx];
        double bestd = std::abs(std::log(s / best));
        for (int j : {idx - 1, idx + 1}) {
            if (j < 0 || j >= kSigmaGridLevels) continue;
            const double d = std::abs(std::log(s / levels[j]));
            if (d < bestd) {
                bestd = d;
                best = levels[j];
            }
        }
        return best;
    }
};

// ---------------------------------------------------------------------------
// Discretized Gaussian pmf over the alphabet [-A, A]: unit-bin integrals for
// interior symbols, boundary symbols absorb the full tail, every symbol
// floored at 2^-16 with renormalization.

constexpr double kProbFloor = 1.0 / 65536.0;

namespace gauss {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
inline double pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

// P(a < Z <= b), cancellation-safe in both tails
inline double cdf_diff(double a, double b) {
    double p;
    if (a + b > 0)
        p = 0.5 * (std::erfc(a * kInvSqrt2) - std::erfc(b * kInvSqrt2));
    else
        p = 0.5 * (std::erfc(-b * kInvSqrt2) - std::erfc(-a * kInvSqrt2));
    return p > 0 ? p : 0.0;
}

}  // namespace gauss

// raw (pre-floor) probability of an interior symbol / value
inline double raw_interior_prob(double y, double mu, double sigma) {
    return gauss::cdf_diff((y - 0.5 - mu) / sigma, (y + 0.5 - mu) / sigma);
}

inline double raw_lower_tail(double mu, double sigma, int A) {
    return gauss::cdf((-A + 0.5 - mu) / sigma);
}

inline double raw_upper_tail(double mu, double sigma, int A) {
    return 0.5 * std::erfc(((A - 0.5 - mu) / sigma) * gauss::kInvSqrt2);
}

// Contiguous interior support where raw prob exceeds the floor, plus the
// normalizer Z = sum over the alphabet of max(raw, floor).
struct PmfInfo {
    int lo = 0, hi = -1;  // interior support, empty when hi < lo
    double tail_lo = 0, tail_hi = 0;
    double z = 0;
    bool has_interior() const { return hi >= lo; }
};

inline PmfInfo pmf_info(double mu, double sigma, int A) {
    PmfInfo info;
    info.tail_lo = raw_lower_tail(mu, sigma, A);
    info.tail_hi = raw_upper_tail(mu, sigma, A);
    const int s_lo = -A + 1, s_hi = A - 1;
    const int mode = int(std::clamp<long long>(std::llround(mu), s_lo, s_hi));
    const int n_interior = s_hi - s_lo + 1;
    if (n_interior > 0 && raw_interior_prob(mode, mu, sigma) > kProbFloor) {
        // raw prob is unimodal in s; binary search each side of the mode
        int a = s_lo, b = mode;
        while (a < b) {  // first s with raw > floor
            const int m = a + (b - a) / 2;
            if (raw_interior_prob(m, mu, sigma) > kProbFloor) b = m;
            else a = m + 1;
        }
        info.lo = a;
        a = mode;
        b = s_hi;
        while (a < b) {  // last s with raw > floor
            const int m = a + (b - a + 1) / 2;
            if (raw_interior_prob(m, mu, sigma) > kProbFloor) a = m;
            else b = m - 1;
        }
        info.hi = a;
    } else {
        info.lo = 0;
        info.hi = -1;
    }
    double z = std::max(info.tail_lo, kProbFloor) + std::max(info.tail_hi, kProbFloor);
    if (info.has_interior()) {
        z += gauss::cdf_diff((info.lo - 0.5 - mu) / sigma,
                             (info.hi + 0.5 - mu) / sigma);
        z += kProbFloor * double(n_interior - (info.hi - info.lo + 1));
    } else {
        z += kProbFloor * double(n_interior);
    }
    info.z = z;
    return info;
}

// pre-floor mass with boundary-tail absorption, also defined for real-valued
// y so the training rate term coincides with the coding pmf at integers
inline double raw_symbol_prob(double y, double mu, double sigma, int A) {
    if (y >= double(A)) return raw_upper_tail(mu, sigma, A);
    if (y <= double(-A)) return raw_lower_tail(mu, sigma, A);
    return raw_interior_prob(y, mu, sigma);
}

inline double discretized_gaussian_pmf(int s, double mu, double sigma, int A) {
    if (s < -A || s > A) throw ContractError("pmf: symbol outside alphabet");
    const PmfInfo info = pmf_info(mu, sigma, A);
    const double num = std::max(raw_symbol_prob(s, mu, sigma, A), kProbFloor);
    return num / info.z;
}

// bits = -log2 pmf, shared by the trainer rate term and the validation path
inline double symbol_bits(double y, double mu, double sigma, int A) {
    const PmfInfo info = pmf_info(mu, sigma, A);
    const double num = std::max(raw_symbol_prob(y, mu, sigma, A), kProbFloor);
    return -(std::log(num) - std::log(info.z)) / M_LN2;
}

// ---------------------------------------------------------------------------
// Temporal context: exact-coordinate gather with zero fill. The first frame
// of a group uses the all-zero context.

inline std::vector<double> temporal_align(const LatentTensor* previous,
                                          const std::vector<Coord>& current_coords,
                                          int channels) {
    std::vector<double> out(current_coords.size() * size_t(channels), 0.0);
    if (!previous) return out;
    if (previous->channels != channels)
        throw ContractError("temporal_align: channel mismatch");
    const CoordMap prev_map = build_coord_map(previous->coords);
    for (size_t i = 0; i < current_coords.size(); ++i) {
        auto it = prev_map.find(current_coords[i]);
        if (it == prev_map.end()) continue;
        const double* src = previous->values.data() + size_t(it->second) * channels;
        double* dst = out.data() + i * size_t(channels);
        for (int c = 0; c < channels; ++c) dst[c] = src[c];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic context-network evaluation. The full-tensor pass and the
// element-sequential decode pass run the identical per-coordinate code, so
// they agree bit for bit. Causality: the AR path is a type-A masked k=5
// convolution (offsets lexicographically >= (0,0,0) zeroed), everything
// after it is per-coordinate.

class ContextEval {
public:
    ContextEval(CodecModel& model, const std::vector<Coord>& coords,
                const std::vector<double>& temporal_features, int stride = 8)
        : m_(model),
          C_(model.arch.latent_channels),
          coords_(coords),
          stride_(stride),
          map_(build_coord_map(coords)),
          ar_offsets_(ad::detail::kernel_offsets(5, true)),
          sigma_grid_(model.arch.sigma_min, model.arch.sigma_max) {
        if (temporal_features.size() != coords.size() * size_t(C_))
            throw ContractError("context: temporal feature shape mismatch");
        // temporal path: conv k3 s1 + ReLU, independent of the current latent
        tmp_plan_ = ad::make_conv_plan(coords_, stride_, 3, 1);
        tmp_act_.assign(coords_.size() * size_t(C_), 0.0);
        ad::conv_forward_plain(tmp_plan_, temporal_features.data(), C_,
                               m_.ctx_tmp.w.value.data(), m_.ctx_tmp.b.value.data(),
                               C_, tmp_act_.data());
        for (auto& v : tmp_act_)
            if (v < 0) v = 0;
    }

    int channels() const { return C_; }
    size_t coord_count() const { return coords_.size(); }

    // (mu, sigma) for all channels of coordinate i, snapped to the grids.
    // Reads only features of coordinates strictly before i in canonical order.
    void params_at(size_t i, const double* features, double* mu, double* sigma) const {
        const int C = C_;
        std::vector<double> ar(C);
        for (int c = 0; c < C; ++c) ar[c] = m_.ctx_ar.b.value[c];
        for (size_t d = 0; d < ar_offsets_.size(); ++d) {
            Coord probe;
            for (int a = 0; a < 3; ++a)
                probe[a] = coords_[i][a] + ar_offsets_[d][a] * stride_;
            auto it = map_.find(probe);
            if (it == map_.end()) continue;
            const double* f = features + size_t(it->second) * C;
            const double* wd = m_.ctx_ar.w.value.data() + d * size_t(C) * C;
            for (int ci = 0; ci < C; ++ci) {
                const double v = f[ci];
                const double* wr = wd + size_t(ci) * C;
                for (int co = 0; co < C; ++co) ar[co] += v * wr[co];
            }
        }
        for (auto& v : ar)
            if (v < 0) v = 0;

        std::vector<double> h(2 * C);
        for (int c = 0; c < C; ++c) h[c] = ar[c];
        for (int c = 0; c < C; ++c) h[C + c] = tmp_act_[i * C + c];

        std::vector<double> h2(2 * C);
        dense_(m_.ctx_mix1, h, h2);
        for (auto& v : h2)
            if (v < 0) v = 0;
        std::vector<double> out(2 * C);
        dense_(m_.ctx_mix2, h2, out);

        for (int c = 0; c < C; ++c) {
            mu[c] = snap_mu(out[c]);
            const double raw = out[C + c];
            const double sp =
                (raw > 30.0 ? raw : std::log1p(std::exp(raw))) + m_.arch.sigma_min;
            sigma[c] = sigma_grid_.snap(sp);
        }
    }

    GaussianParams full_pass(const std::vector<double>& features) const {
        GaussianParams p;
        p.mu.resize(coords_.size() * size_t(C_));
        p.sigma.resize(coords_.size() * size_t(C_));
        for (size_t i = 0; i < coords_.size(); ++i)
            params_at(i, features.data(), p.mu.data() + i * C_,
                      p.sigma.data() + i * C_);
        return p;
    }

private:
    void dense_(const ConvP& layer, const std::vector<double>& x,
                std::vector<double>& y) const {
        const int n = int(x.size());
        for (int co = 0; co < n; ++co) y[co] = layer.b.value[co];
        for (int ci = 0; ci < n; ++ci) {
            const double v = x[ci];
            const double* wr = layer.w.value.data() + size_t(ci) * n;
            for (int co = 0; co < n; ++co) y[co] += v * wr[co];
        }
    }

    CodecModel& m_;
    int C_;
    const std::vector<Coord>& coords_;
    int stride_;
    CoordMap map_;
    std::vector<Coord> ar_offsets_;
    SigmaGrid sigma_grid_;
    ad::ConvPlan tmp_plan_;
    std::vector<double> tmp_act_;
};

// Full-tensor prediction on a quantized latent (coding path).
inline GaussianParams predict_params(const LatentTensor& current,
                                     const std::vector<double>& temporal_features,
                                     CodecModel& model) {
    if (!current.quantized)
        throw ContractError("predict_params: latent must be quantized");
    ContextEval eval(model, current.coords, temporal_features, current.stride);
    return eval.full_pass(current.values);
}

// ---------------------------------------------------------------------------
// Differentiable context pass for training (no grid snapping).

struct ContextPlans {
    ad::ConvPlan ar, tmp, mix;

    static ContextPlans build(const std::vector<Coord>& coords, int stride = 8) {
        ContextPlans p;
        p.ar = ad::make_conv_plan(coords, stride, 5, 1, /*masked=*/true);
        p.tmp = ad::make_conv_plan(coords, stride, 3, 1);
        p.mix = ad::make_conv_plan(coords, stride, 1, 1);
        return p;
    }
};

// Returns (mu_node, sigma_node); sigma already softplus-shifted positive.
inline std::pair<int, int> predict_params_node(ad::Graph& g, int latent_node,
                                               int temporal_node,
                                               const ContextPlans& plans,
                                               CodecModel& m) {
    const int C = m.arch.latent_channels;
    int ar = ad::conv_op(g, latent_node, plans.ar, C, m.ctx_ar.w, m.ctx_ar.b);
    ar = ad::relu(g, ar);
    int tp = ad::conv_op(g, temporal_node, plans.tmp, C, m.ctx_tmp.w, m.ctx_tmp.b);
    tp = ad::relu(g, tp);
    int h = ad::concat_channels(g, ar, C, tp, C);
    h = ad::conv_op(g, h, plans.mix, 2 * C, m.ctx_mix1.w, m.ctx_mix1.b);
    h = ad::relu(g, h);
    h = ad::conv_op(g, h, plans.mix, 2 * C, m.ctx_mix2.w, m.ctx_mix2.b);
    const int mu = ad::slice_channels(g, h, 2 * C, 0, C);
    int sig = ad::slice_channels(g, h, 2 * C, C, C);
    sig = ad::softplus_shift(g, sig, m.arch.sigma_min);
    return {mu, sig};
}

// ---------------------------------------------------------------------------
// Differentiable rate term: bits_i = -log2( max(p(y_i), floor) / Z(mu_i, sigma_i) )
// with the same unit-bin integral, tail absorption, floor and normalizer the
// coding pmf uses, so the two estimators agree exactly at integers.

inline int rate_bits_op(ad::Graph& g, int y_id, int mu_id, int sigma_id, int A) {
    const auto& y = g.val(y_id);
    const auto& mu = g.val(mu_id);
    const auto& sg = g.val(sigma_id);
    const size_t n = y.size();
    if (mu.size() != n || sg.size() != n)
        throw ContractError("rate_bits: size mismatch");

    const int out_id = g.fresh(n);
    auto& bits = g.val(out_id);

    // partials of bits w.r.t. (y, mu, sigma), stored for backward
    auto dy = std::make_shared<std::vector<double>>(n);
    auto dmu = std::make_shared<std::vector<double>>(n);
    auto dsig = std::make_shared<std::vector<double>>(n);

    for (size_t i = 0; i < n; ++i) {
        const double yi = y[i], m = mu[i], s = sg[i];
        const PmfInfo info = pmf_info(m, s, A);
        const double raw = raw_symbol_prob(yi, m, s, A);
        const double num = std::max(raw, kProbFloor);
        bits[i] = -(std::log(num) - std::log(info.z)) / M_LN2;

        // d num / d{y, mu, sigma}
        double n_y = 0, n_mu = 0, n_sig = 0;
        if (raw > kProbFloor) {
            if (yi >= double(A)) {
                const double u = (A - 0.5 - m) / s;
                const double f = gauss::pdf(u);
                n_mu = f / s;
                n_sig = f * u / s;
            } else if (yi <= double(-A)) {
                const double u = (-A + 0.5 - m) / s;
                const double f = gauss::pdf(u);
                n_mu = -f / s;
                n_sig = -f * u / s;
            } else {
                const double a = (yi - 0.5 - m) / s, b = (yi + 0.5 - m) / s;
                const double fa = gauss::pdf(a), fb = gauss::pdf(b);
                n_y = (fb - fa) / s;
                n_mu = (fa - fb) / s;
                n_sig = (fa * a - fb * b) / s;
            }
        }
        // d Z / d{mu, sigma}; floored terms contribute zero
        double z_mu = 0, z_sig = 0;
        if (info.has_interior()) {
            const double a = (info.lo - 0.5 - m) / s, b = (info.hi + 0.5 - m) / s;
            const double fa = gauss::pdf(a), fb = gauss::pdf(b);
            z_mu += (fa - fb) / s;
            z_sig += (fa * a - fb * b) / s;
        }
        if (info.tail_lo > kProbFloor) {
            const double u = (-A + 0.5 - m) / s;
            const double f = gauss::pdf(u);
            z_mu += -f / s;
            z_sig += -f * u / s;
        }
        if (info.tail_hi > kProbFloor) {
            const double u = (A - 0.5 - m) / s;
            const double f = gauss::pdf(u);
            z_mu += f / s;
            z_sig += f * u / s;
        }
        const double inv_ln2 = 1.0 / M_LN2;
        (*dy)[i] = -(n_y / num) * inv_ln2;
        (*dmu)[i] = -(n_mu / num - z_mu / info.z) * inv_ln2;
        (*dsig)[i] = -(n_sig / num - z_sig / info.z) * inv_ln2;
    }

    g.node(out_id).back = [&g, y_id, mu_id, sigma_id, out_id, dy, dmu, dsig]() {
        const auto& go = g.grad(out_id);
        auto& gy = g.grad(y_id);
        auto& gm = g.grad(mu_id);
        auto& gs = g.grad(sigma_id);
        for (size_t i = 0; i < go.size(); ++i) {
            gy[i] += go[i] * (*dy)[i];
            gm[i] += go[i] * (*dmu)[i];
            gs[i] += go[i] * (*dsig)[i];
        }
    };
    return out_id;
}

}  // namespace pcac

#endif  // PCAC_CONTEXT_MODEL_HPP
