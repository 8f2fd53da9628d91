#ifndef PCAC_AUTODIFF_HPP
#define PCAC_AUTODIFF_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "pcac/pointcloud.hpp"

namespace pcac::ad {

// Dense parameter tensor with persistent gradient and Adam moments.
struct Parameter {
    std::string name;
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<double> adam_m, adam_v;

    size_t size() const { return value.size(); }

    void resize(std::string n, std::vector<int> s) {
        name = std::move(n);
        shape = std::move(s);
        size_t total = 1;
        for (int d : shape) total *= size_t(d);
        value.assign(total, 0.0);
        grad.assign(total, 0.0);
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

// Deterministic uniform in [0,1) from a mt19937_64 draw; avoids
// std::uniform_real_distribution portability quirks.
inline double uniform01(std::mt19937_64& rng) {
    return double(rng() >> 11) * 0x1.0p-53;
}

inline void init_uniform_fan(Parameter& p, int fan_in, int fan_out,
                             std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
    for (auto& v : p.value) v = (2.0 * uniform01(rng) - 1.0) * bound;
}

// Tape of executed differentiable ops. Single-owner; backward traverses in
// exact reverse execution order.
class Graph {
public:
    struct Node {
        std::vector<double> val;
        std::vector<double> grad;
        std::function<void()> back;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    int fresh(size_t n) {
        nodes_.push_back(std::make_unique<Node>());
        nodes_.back()->val.assign(n, 0.0);
        return int(nodes_.size()) - 1;
    }

    int input(std::vector<double> v) {
        nodes_.push_back(std::make_unique<Node>());
        nodes_.back()->val = std::move(v);
        return int(nodes_.size()) - 1;
    }

    int use(Parameter& p) {
        int id = input(p.value);
        param_nodes_.emplace_back(id, &p);
        return id;
    }

    // relu records its input node here so gradient checkers can tell when a
    // finite-difference step crosses an activation kink
    void mark_relu(int x_id) { relu_inputs_.push_back(x_id); }
    const std::vector<int>& relu_inputs() const { return relu_inputs_; }

    std::vector<double>& val(int id) { return nodes_[id]->val; }
    const std::vector<double>& val(int id) const { return nodes_[id]->val; }
    std::vector<double>& grad(int id) { return nodes_[id]->grad; }
    Node& node(int id) { return *nodes_[id]; }

    // Populates gradients of every Parameter used on this tape. Repeated
    // calls accumulate into Parameter::grad.
    void backward(int loss_id) {
        if (nodes_[loss_id]->val.size() != 1)
            throw ContractError("backward: loss must be scalar");
        for (auto& n : nodes_) n->grad.assign(n->val.size(), 0.0);
        nodes_[loss_id]->grad[0] = 1.0;
        for (int i = loss_id; i >= 0; --i)
            if (nodes_[i]->back) nodes_[i]->back();
        for (auto& [id, p] : param_nodes_) {
            if (id > loss_id) continue;
            const auto& g = nodes_[id]->grad;
            for (size_t k = 0; k < g.size(); ++k) p->grad[k] += g[k];
        }
    }

private:
    std::vector<std::unique_ptr<Node>> nodes_;
    std::vector<std::pair<int, Parameter*>> param_nodes_;
    std::vector<int> relu_inputs_;
};

// ---------------------------------------------------------------------------
// Sparse convolution plans. Kernel offsets are enumerated lexicographically
// (dx, dy, dz ascending) in units of the input stride; summation follows
// that order with channels ascending, which pins a cross-process-identical
// accumulation order.

struct ConvPlan {
    std::vector<Coord> out_coords;  // canonical order
    int n_in = 0;
    int n_offsets = 0;
    std::vector<std::pair<int, int>> pairs;  // (out, in), grouped by offset
    std::vector<int> pair_begin;             // size n_offsets + 1
};

namespace detail {

inline std::vector<Coord> kernel_offsets(int k, bool masked) {
    const int r = (k - 1) / 2;
    std::vector<Coord> offs;
    for (int dx = -r; dx <= r; ++dx)
        for (int dy = -r; dy <= r; ++dy)
            for (int dz = -r; dz <= r; ++dz) {
                const Coord d = {dx, dy, dz};
                if (masked && d >= Coord{0, 0, 0}) continue;
                offs.push_back(d);
            }
    return offs;
}

inline ConvPlan plan_from_offsets(const std::vector<Coord>& out_coords,
                                  const std::vector<Coord>& in_coords,
                                  const std::vector<Coord>& offs,
                                  int offset_scale, int sign) {
    ConvPlan plan;
    plan.out_coords = out_coords;
    plan.n_in = int(in_coords.size());
    plan.n_offsets = int(offs.size());
    const CoordMap in_map = build_coord_map(in_coords);
    std::vector<std::vector<std::pair<int, int>>> grouped(offs.size());
    for (int o = 0; o < int(out_coords.size()); ++o) {
        for (size_t d = 0; d < offs.size(); ++d) {
            Coord probe;
            for (int a = 0; a < 3; ++a)
                probe[a] = out_coords[o][a] + sign * offs[d][a] * offset_scale;
            auto it = in_map.find(probe);
            if (it != in_map.end()) grouped[d].emplace_back(o, it->second);
        }
    }
    plan.pair_begin.push_back(0);
    for (auto& g : grouped) {
        plan.pairs.insert(plan.pairs.end(), g.begin(), g.end());
        plan.pair_begin.push_back(int(plan.pairs.size()));
    }
    return plan;
}

}  // namespace detail

// s = 1 keeps coordinates; s = 2 downsamples to unique parents. Input
// coordinate probed at out + d * stride_in.
inline ConvPlan make_conv_plan(const std::vector<Coord>& in_coords, int stride_in,
                               int k, int s, bool masked = false) {
    if (k % 2 == 0) throw ContractError("conv: kernel must be odd");
    std::vector<Coord> out =
        s == 2 ? downsample_coords(in_coords, stride_in) : in_coords;
    return detail::plan_from_offsets(out, in_coords,
                                     detail::kernel_offsets(k, masked),
                                     stride_in, +1);
}

// Transpose (upsampling) convolution: output defined exactly on
// target_coords at stride_in / 2; coarse input probed at out - d * (stride_in/2).
inline ConvPlan make_tconv_plan(const std::vector<Coord>& in_coords, int stride_in,
                                int k, const std::vector<Coord>& target_coords) {
    if (k % 2 == 0) throw ContractError("tconv: kernel must be odd");
    if (stride_in % 2 != 0) throw ContractError("tconv: stride must be even");
    return detail::plan_from_offsets(target_coords, in_coords,
                                     detail::kernel_offsets(k, false),
                                     stride_in / 2, -1);
}

// Plain (tape-free) forward used by the element-sequential coding path.
// Accumulation order matches the Graph op bit-for-bit.
inline void conv_forward_plain(const ConvPlan& plan, const double* x, int c_in,
                               const double* w, const double* b, int c_out,
                               double* y) {
    const size_t n_out = plan.out_coords.size();
    for (size_t o = 0; o < n_out; ++o)
        for (int co = 0; co < c_out; ++co) y[o * c_out + co] = b[co];
    for (int d = 0; d < plan.n_offsets; ++d) {
        const double* wd = w + size_t(d) * c_in * c_out;
        for (int p = plan.pair_begin[d]; p < plan.pair_begin[d + 1]; ++p) {
            const auto [oi, ii] = plan.pairs[p];
            const double* xi = x + size_t(ii) * c_in;
            double* yo = y + size_t(oi) * c_out;
            for (int ci = 0; ci < c_in; ++ci) {
                const double v = xi[ci];
                const double* wr = wd + size_t(ci) * c_out;
                for (int co = 0; co < c_out; ++co) yo[co] += v * wr[co];
            }
        }
    }
}

// Shared Graph op for sparse_conv / sparse_transpose_conv / masked_sparse_conv;
// the plan encodes the geometry.
inline int conv_op(Graph& g, int x_id, const ConvPlan& plan, int c_in,
                   Parameter& w, Parameter& b) {
    const int c_out = b.shape.at(0);
    if (int(w.size()) != plan.n_offsets * c_in * c_out)
        throw ContractError("conv: weight shape mismatch");
    if (int(g.val(x_id).size()) != plan.n_in * c_in)
        throw ContractError("conv: input channel mismatch");
    const int w_id = g.use(w);
    const int b_id = g.use(b);
    const int y_id = g.fresh(plan.out_coords.size() * size_t(c_out));
    conv_forward_plain(plan, g.val(x_id).data(), c_in, g.val(w_id).data(),
                       g.val(b_id).data(), c_out, g.val(y_id).data());
    g.node(y_id).back = [&g, &plan, x_id, w_id, b_id, y_id, c_in, c_out]() {
        const auto& gy = g.grad(y_id);
        const auto& x = g.val(x_id);
        const auto& w = g.val(w_id);
        auto& gx = g.grad(x_id);
        auto& gw = g.grad(w_id);
        auto& gb = g.grad(b_id);
        for (size_t o = 0; o < plan.out_coords.size(); ++o)
            for (int co = 0; co < c_out; ++co) gb[co] += gy[o * c_out + co];
        for (int d = 0; d < plan.n_offsets; ++d) {
            const double* wd = w.data() + size_t(d) * c_in * c_out;
            double* gwd = gw.data() + size_t(d) * c_in * c_out;
            for (int p = plan.pair_begin[d]; p < plan.pair_begin[d + 1]; ++p) {
                const auto [oi, ii] = plan.pairs[p];
                const double* gyo = gy.data() + size_t(oi) * c_out;
                const double* xi = x.data() + size_t(ii) * c_in;
                double* gxi = gx.data() + size_t(ii) * c_in;
                for (int ci = 0; ci < c_in; ++ci) {
                    const double* wr = wd + size_t(ci) * c_out;
                    double* gwr = gwd + size_t(ci) * c_out;
                    double acc = 0;
                    const double xv = xi[ci];
                    for (int co = 0; co < c_out; ++co) {
                        acc += wr[co] * gyo[co];
                        gwr[co] += xv * gyo[co];
                    }
                    gxi[ci] += acc;
                }
            }
        }
    };
    return y_id;
}

// ---------------------------------------------------------------------------
// Elementwise / structural ops

inline int relu(Graph& g, int x_id) {
    g.mark_relu(x_id);
    const auto& x = g.val(x_id);
    const int y_id = g.fresh(x.size());
    auto& y = g.val(y_id);
    for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : 0.0;
    g.node(y_id).back = [&g, x_id, y_id]() {
        const auto& x = g.val(x_id);
        const auto& gy = g.grad(y_id);
        auto& gx = g.grad(x_id);
        for (size_t i = 0; i < x.size(); ++i)
            if (x[i] > 0) gx[i] += gy[i];
    };
    return y_id;
}

inline int add(Graph& g, int a_id, int b_id) {
    const auto& a = g.val(a_id);
    const auto& b = g.val(b_id);
    if (a.size() != b.size()) throw ContractError("add: size mismatch");
    const int y_id = g.fresh(a.size());
    auto& y = g.val(y_id);
    for (size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
    g.node(y_id).back = [&g, a_id, b_id, y_id]() {
        const auto& gy = g.grad(y_id);
        auto& ga = g.grad(a_id);
        auto& gb = g.grad(b_id);
        for (size_t i = 0; i < gy.size(); ++i) {
            ga[i] += gy[i];
            gb[i] += gy[i];
        }
    };
    return y_id;
}

// Row-wise channel concatenation of [n x ca] and [n x cb].
inline int concat_channels(Graph& g, int a_id, int ca, int b_id, int cb) {
    const auto& a = g.val(a_id);
    const auto& b = g.val(b_id);
    const size_t n = a.size() / size_t(ca);
    if (b.size() != n * size_t(cb)) throw ContractError("concat: row mismatch");
    const int y_id = g.fresh(n * size_t(ca + cb));
    auto& y = g.val(y_id);
    for (size_t i = 0; i < n; ++i) {
        for (int c = 0; c < ca; ++c) y[i * (ca + cb) + c] = a[i * ca + c];
        for (int c = 0; c < cb; ++c) y[i * (ca + cb) + ca + c] = b[i * cb + c];
    }
    g.node(y_id).back = [&g, a_id, b_id, y_id, ca, cb, n]() {
        const auto& gy = g.grad(y_id);
        auto& ga = g.grad(a_id);
        auto& gb = g.grad(b_id);
        for (size_t i = 0; i < n; ++i) {
            for (int c = 0; c < ca; ++c) ga[i * ca + c] += gy[i * (ca + cb) + c];
            for (int c = 0; c < cb; ++c) gb[i * cb + c] += gy[i * (ca + cb) + ca + c];
        }
    };
    return y_id;
}

inline int slice_channels(Graph& g, int x_id, int c_total, int from, int count) {
    const auto& x = g.val(x_id);
    const size_t n = x.size() / size_t(c_total);
    const int y_id = g.fresh(n * size_t(count));
    auto& y = g.val(y_id);
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < count; ++c) y[i * count + c] = x[i * c_total + from + c];
    g.node(y_id).back = [&g, x_id, y_id, c_total, from, count, n]() {
        const auto& gy = g.grad(y_id);
        auto& gx = g.grad(x_id);
        for (size_t i = 0; i < n; ++i)
            for (int c = 0; c < count; ++c)
                gx[i * c_total + from + c] += gy[i * count + c];
    };
    return y_id;
}

// y = softplus(x) + shift; overflow-safe.
inline int softplus_shift(Graph& g, int x_id, double shift) {
    const auto& x = g.val(x_id);
    const int y_id = g.fresh(x.size());
    auto& y = g.val(y_id);
    for (size_t i = 0; i < x.size(); ++i)
        y[i] = (x[i] > 30.0 ? x[i] : std::log1p(std::exp(x[i]))) + shift;
    g.node(y_id).back = [&g, x_id, y_id]() {
        const auto& x = g.val(x_id);
        const auto& gy = g.grad(y_id);
        auto& gx = g.grad(x_id);
        for (size_t i = 0; i < x.size(); ++i)
            gx[i] += gy[i] / (1.0 + std::exp(-x[i]));
    };
    return y_id;
}

// Additive noise with straight-through gradient.
inline int add_constant(Graph& g, int x_id, std::vector<double> noise) {
    const auto& x = g.val(x_id);
    if (noise.size() != x.size()) throw ContractError("add_constant: size");
    const int y_id = g.fresh(x.size());
    auto& y = g.val(y_id);
    for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] + noise[i];
    g.node(y_id).back = [&g, x_id, y_id]() {
        const auto& gy = g.grad(y_id);
        auto& gx = g.grad(x_id);
        for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    };
    return y_id;
}

inline int sum(Graph& g, int x_id) {
    const auto& x = g.val(x_id);
    const int y_id = g.fresh(1);
    double acc = 0;
    for (double v : x) acc += v;
    g.val(y_id)[0] = acc;
    g.node(y_id).back = [&g, x_id, y_id]() {
        const double gy = g.grad(y_id)[0];
        auto& gx = g.grad(x_id);
        for (auto& v : gx) v += gy;
    };
    return y_id;
}

// Mean squared error against a constant target (joint mean over all entries).
inline int mse_const(Graph& g, int x_id, std::vector<double> target) {
    const auto& x = g.val(x_id);
    if (target.size() != x.size()) throw ContractError("mse: size mismatch");
    const int y_id = g.fresh(1);
    const size_t n = x.size();
    double acc = 0;
    for (size_t i = 0; i < n; ++i) {
        const double d = x[i] - target[i];
        acc += d * d;
    }
    g.val(y_id)[0] = n ? acc / double(n) : 0.0;
    auto t = std::make_shared<std::vector<double>>(std::move(target));
    g.node(y_id).back = [&g, x_id, y_id, t]() {
        const double gy = g.grad(y_id)[0];
        const auto& x = g.val(x_id);
        auto& gx = g.grad(x_id);
        const double s = 2.0 * gy / double(x.size());
        for (size_t i = 0; i < x.size(); ++i) gx[i] += s * (x[i] - (*t)[i]);
    };
    return y_id;
}

// y = sum_i coeff_i * scalar_i
inline int affine_scalars(Graph& g, const std::vector<std::pair<int, double>>& terms) {
    const int y_id = g.fresh(1);
    double acc = 0;
    for (const auto& [id, c] : terms) acc += c * g.val(id)[0];
    g.val(y_id)[0] = acc;
    auto t = std::make_shared<std::vector<std::pair<int, double>>>(terms);
    g.node(y_id).back = [&g, y_id, t]() {
        const double gy = g.grad(y_id)[0];
        for (const auto& [id, c] : *t) g.grad(id)[0] += c * gy;
    };
    return y_id;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline void adam_step(const std::vector<Parameter*>& params, const AdamConfig& cfg,
                      int t) {
    if (t < 1) throw ContractError("adam: step index must be >= 1");
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (Parameter* p : params) {
        if (p->adam_m.size() != p->size()) {
            p->adam_m.assign(p->size(), 0.0);
            p->adam_v.assign(p->size(), 0.0);
        }
        for (size_t i = 0; i < p->size(); ++i) {
            const double gi = p->grad[i];
            p->adam_m[i] = cfg.beta1 * p->adam_m[i] + (1.0 - cfg.beta1) * gi;
            p->adam_v[i] = cfg.beta2 * p->adam_v[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = p->adam_m[i] / c1;
            const double vhat = p->adam_v[i] / c2;
            p->value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Little-endian binary serialization: "PCAC", version, count, then
// per-parameter (name length, name, rank, dims, raw f64).

namespace detail {

template <typename T>
void put(std::ostream& o, T v) {
    o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& i) {
    T v;
    if (!i.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw ParseError("model: truncated file");
    return v;
}

}  // namespace detail

inline void save_params(const std::string& path,
                        const std::vector<const Parameter*>& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write("PCAC", 4);
    detail::put<uint32_t>(out, 1);
    detail::put<uint32_t>(out, uint32_t(params.size()));
    for (const Parameter* p : params) {
        detail::put<uint32_t>(out, uint32_t(p->name.size()));
        out.write(p->name.data(), std::streamsize(p->name.size()));
        detail::put<uint32_t>(out, uint32_t(p->shape.size()));
        for (int d : p->shape) detail::put<uint32_t>(out, uint32_t(d));
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  std::streamsize(p->value.size() * 8));
    }
    if (!out) throw IoError("write failed: " + path);
}

inline void load_params_impl(const std::string& path,
                             const std::vector<Parameter*>& params,
                             bool prefix_only) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "PCAC", 4) != 0)
        throw ParseError("model: bad magic");
    const uint32_t version = detail::get<uint32_t>(in);
    if (version != 1) throw ParseError("model: unsupported version");
    const uint32_t count = detail::get<uint32_t>(in);
    if (prefix_only ? count < params.size() : count != params.size())
        throw ParseError("model: parameter count mismatch");
    for (Parameter* p : params) {
        const uint32_t nlen = detail::get<uint32_t>(in);
        std::string name(nlen, '\0');
        if (!in.read(name.data(), nlen)) throw ParseError("model: truncated name");
        if (name != p->name)
            throw ParseError("model: expected parameter '" + p->name + "', found '" +
                             name + "'");
        const uint32_t rank = detail::get<uint32_t>(in);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = int(detail::get<uint32_t>(in));
        if (shape != p->shape) throw ParseError("model: shape mismatch for " + name);
        if (!in.read(reinterpret_cast<char*>(p->value.data()),
                     std::streamsize(p->value.size() * 8)))
            throw ParseError("model: truncated values");
    }
}

inline void load_params(const std::string& path,
                        const std::vector<Parameter*>& params) {
    load_params_impl(path, params, false);
}

inline void load_params_prefix(const std::string& path,
                               const std::vector<Parameter*>& params) {
    load_params_impl(path, params, true);
}

}  // namespace pcac::ad

#endif  // PCAC_AUTODIFF_HPP
