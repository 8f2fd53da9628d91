#ifndef PCAC_TRAINER_HPP
#define PCAC_TRAINER_HPP

#include <memory>
#include <optional>
#include <random>
#include <sstream>

#include "pcac/context_model.hpp"
#include "pcac/network.hpp"
#include "pcac/pointcloud.hpp"

namespace pcac {

struct TrainConfig {
    ArchSpec arch;
    double lambda = 0.01;
    double lr = 1e-3;
    double lr_decay = 0.95;
    int lr_decay_epochs = 3;
    int batch_size = 4;
    int patience = 20;
    int crop_size = 64;  // voxels per side
    int gof = 8;         // group-of-frames length
    int max_epochs = 500;
    uint64_t seed = 0;

    void validate() const {
        if (lambda <= 0) throw ContractError("config: lambda must be positive");
        if (lr <= 0) throw ContractError("config: lr must be positive");
        if (patience < 1) throw ContractError("config: patience must be >= 1");
        if (batch_size < 1) throw ContractError("config: batch size must be >= 1");
        if (crop_size < 8 || crop_size % 8 != 0)
            throw ContractError("config: crop size must be a positive multiple of 8");
        if (gof < 1) throw ContractError("config: gof must be >= 1");
        if (max_epochs < 0) throw ContractError("config: epoch cap must be >= 0");
    }
};

// Co-located crop pair; previous is absent for group-initial frames and
// empty-window matches are represented as a present-but-empty crop.
struct TrainSample {
    VoxelizedFrame frame;
    std::optional<VoxelizedFrame> previous;
};

// Distortion scale: MSE over normalized [0,1] colors scaled to the 8-bit
// domain so the lambda grid produces non-degenerate tradeoffs.
constexpr double kLambdaScale = 255.0 * 255.0;

// ---------------------------------------------------------------------------
// RD loss forward pass. The conv plans are captured by reference on the tape,
// so graph and plans live together in this bundle.

struct RdLossGraph {
    ScaleCoords sc;
    CodecPlans plans;
    ContextPlans cplans;
    std::vector<double> temporal;  // aligned features on the latent coords
    ad::Graph g;
    int loss_id = -1;

    double loss = 0, rate_bits = 0, mse = 0;
    size_t points = 0, elements = 0;

    double rate_bits_per_element() const {
        return elements ? rate_bits / double(elements) : 0.0;
    }
};

// loss = rate_bits / elements + lambda * kLambdaScale * MSE. The rate term is
// the unit-bin integral at the noisy latent values, identical in form to the
// coding pmf, so training and inference rate estimates agree at integers.
inline std::unique_ptr<RdLossGraph> compute_rd_loss(const VoxelizedFrame& frame,
                                                    const LatentTensor* temporal,
                                                    CodecModel& m, double lambda,
                                                    std::mt19937_64& rng) {
    if (lambda <= 0) throw ContractError("rd_loss: lambda must be positive");
    auto r = std::make_unique<RdLossGraph>();
    r->sc = ScaleCoords::from_frame_coords(frame.coords);
    r->plans = CodecPlans::build(r->sc);
    r->cplans = ContextPlans::build(r->sc.levels[3]);
    const int C = m.arch.latent_channels;
    r->points = frame.size();
    r->elements = r->sc.levels[3].size() * size_t(C);
    r->temporal = temporal_align(temporal, r->sc.levels[3], C);

    ad::Graph& g = r->g;
    const int f = encode_features_node(g, frame, r->sc, r->plans, m);
    const int y = ad::add_constant(g, f, make_uniform_noise(r->elements, rng));
    const int t = g.input(r->temporal);
    auto [mu, sig] = predict_params_node(g, y, t, r->cplans, m);
    const int bits = rate_bits_op(g, y, mu, sig, m.arch.alphabet);
    const int rate = ad::sum(g, bits);
    const int recon = decode_features_node(g, y, r->plans, m);
    const int mse = ad::mse_const(g, recon, normalized_colors(frame));
    r->loss_id = ad::affine_scalars(
        g, {{rate, 1.0 / double(r->elements)}, {mse, lambda * kLambdaScale}});

    r->rate_bits = g.val(rate)[0];
    r->mse = g.val(mse)[0];
    r->loss = g.val(r->loss_id)[0];
    if (!std::isfinite(r->loss)) {
        std::ostringstream msg;
        msg << "rd_loss diverged: loss=" << r->loss << " rate_bits=" << r->rate_bits
            << " mse=" << r->mse << " lambda=" << lambda
            << " points=" << r->points << " elements=" << r->elements;
        throw TrainingDivergenceError(msg.str());
    }
    return r;
}

// Deterministic inference-path RD evaluation (quantized latent, snapped
// grids, clamped reconstruction); used for validation and reporting.
struct InferenceRd {
    double rate_bits = 0, mse = 0, loss = 0;
    size_t points = 0, elements = 0;
    LatentTensor latent;
    std::vector<double> recon;  // normalized colors
};

inline InferenceRd evaluate_frame(const VoxelizedFrame& frame,
                                  const LatentTensor* temporal, CodecModel& m,
                                  double lambda) {
    InferenceRd out;
    out.points = frame.size();
    out.latent = encode_and_quantize(frame, m);
    out.elements = out.latent.element_count();
    const int C = m.arch.latent_channels;
    const auto tmp = temporal_align(temporal, out.latent.coords, C);
    const auto params = predict_params(out.latent, tmp, m);
    for (size_t i = 0; i < out.elements; ++i)
        out.rate_bits += symbol_bits(out.latent.values[i], params.mu[i],
                                     params.sigma[i], m.arch.alphabet);
    const auto sc = ScaleCoords::from_frame_coords(frame.coords);
    out.recon = decode_features(out.latent, sc, m);
    const auto target = normalized_colors(frame);
    double acc = 0;
    for (size_t i = 0; i < target.size(); ++i) {
        const double d = out.recon[i] - target[i];
        acc += d * d;
    }
    out.mse = target.empty() ? 0.0 : acc / double(target.size());
    out.loss = (out.elements ? out.rate_bits / double(out.elements) : 0.0) +
               lambda * kLambdaScale * out.mse;
    return out;
}

// ---------------------------------------------------------------------------
// Crop sampling. The crop window is 8-aligned so the latent hierarchy of the
// rebased crop matches a sub-volume of the full frame's hierarchy.

namespace detail {

inline VoxelizedFrame crop_window(const VoxelizedFrame& f, const Coord& origin,
                                  int size) {
    VoxelizedFrame out;
    out.depth = f.depth;
    for (size_t i = 0; i < f.size(); ++i) {
        bool inside = true;
        for (int a = 0; a < 3; ++a) {
            const int32_t r = f.coords[i][a] - origin[a];
            if (r < 0 || r >= size) inside = false;
        }
        if (!inside) continue;
        out.coords.push_back({f.coords[i][0] - origin[0], f.coords[i][1] - origin[1],
                              f.coords[i][2] - origin[2]});
        out.colors.push_back(f.colors[i]);
    }
    out.canonicalize();
    return out;
}

}  // namespace detail

inline TrainSample sample_crops(const FrameSequence& seq, int crop_size,
                                std::mt19937_64& rng, int gof = 8) {
    if (seq.frames.empty()) throw DataError("sample_crops: empty sequence");
    const int cells = crop_size / 8;
    for (int attempt = 0; attempt < 64; ++attempt) {
        const size_t t = rng() % seq.frames.size();
        const VoxelizedFrame& ft = seq.frames[t];
        if (ft.size() == 0) continue;
        // anchor the window on a random occupied point: never an empty crop
        const Coord& p = ft.coords[rng() % ft.size()];
        Coord origin;
        for (int a = 0; a < 3; ++a) {
            const int32_t cell = (p[a] >> 3) << 3;
            origin[a] = cell - 8 * int32_t(rng() % uint32_t(cells));
        }
        TrainSample s;
        s.frame = detail::crop_window(ft, origin, crop_size);
        if (s.frame.size() == 0) continue;
        if (t % size_t(gof) != 0)
            s.previous = detail::crop_window(seq.frames[t - 1], origin, crop_size);
        return s;
    }
    throw DataError("sample_crops: no nonempty crop found");
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogRow {
    int epoch = 0;
    double lr = 0, train_loss = 0, val_loss = 0;
    double rate_bits_per_elem = 0, mse = 0;
};

inline void write_train_log(const std::string& path,
                            const std::vector<TrainLogRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "epoch,lr,train_loss,val_loss,rate_bits_per_elem,mse\n";
    out.precision(10);
    for (const auto& r : rows)
        out << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.val_loss
            << ',' << r.rate_bits_per_elem << ',' << r.mse << '\n';
}

inline CodecModel fit(const std::vector<FrameSequence>& sequences,
                      const TrainConfig& cfg,
                      std::vector<TrainLogRow>* log = nullptr) {
    cfg.validate();
    size_t total_frames = 0;
    for (const auto& s : sequences) total_frames += s.frames.size();
    if (sequences.empty() || total_frames == 0)
        throw DataError("fit: no training frames");

    CodecModel model = CodecModel::create(cfg.arch, cfg.seed);
    model.lambda = cfg.lambda;
    if (cfg.max_epochs == 0) return model;

    // validation: last 10% of frames of each sequence (when it has >= 2)
    std::vector<FrameSequence> train_view(sequences.size());
    struct ValFrame {
        const FrameSequence* seq;
        size_t index;
    };
    std::vector<ValFrame> val_frames;
    size_t train_frames = 0;
    for (size_t s = 0; s < sequences.size(); ++s) {
        const size_t n = sequences[s].frames.size();
        const size_t n_val = n >= 2 ? std::max<size_t>(1, n / 10) : 0;
        train_view[s].frames.assign(sequences[s].frames.begin(),
                                    sequences[s].frames.end() - long(n_val));
        train_frames += n - n_val;
        for (size_t i = n - n_val; i < n; ++i)
            val_frames.push_back({&sequences[s], i});
    }
    if (train_frames == 0) throw DataError("fit: no training frames after split");

    std::mt19937_64 rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
    const int steps_per_epoch =
        std::max<int>(1, int(train_frames / size_t(cfg.batch_size)));
    auto params = model.trainable();

    auto run_validation = [&]() {
        double loss = 0, rate = 0, mse = 0;
        size_t elems = 0;
        if (val_frames.empty()) return std::tuple<double, double, double>(NAN, 0, 0);
        for (const auto& vf : val_frames) {
            std::optional<LatentTensor> prev;
            if (vf.index % size_t(cfg.gof) != 0 && vf.index > 0)
                prev = encode_and_quantize(vf.seq->frames[vf.index - 1], model);
            auto r = evaluate_frame(vf.seq->frames[vf.index],
                                    prev ? &*prev : nullptr, model, cfg.lambda);
            loss += r.loss;
            rate += r.rate_bits;
            mse += r.mse;
            elems += r.elements;
        }
        const double n = double(val_frames.size());
        return std::tuple<double, double, double>(
            loss / n, elems ? rate / double(elems) : 0.0, mse / n);
    };

    struct Snapshot {
        std::vector<std::vector<double>> values;
    } best;
    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0, adam_t = 0;

    auto snapshot = [&]() {
        best.values.clear();
        for (auto* p : params) best.values.push_back(p->value);
    };
    snapshot();

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr =
            cfg.lr * std::pow(cfg.lr_decay, epoch / cfg.lr_decay_epochs);
        double epoch_loss = 0, epoch_rate = 0, epoch_mse = 0;
        size_t epoch_elems = 0;

        for (int step = 0; step < steps_per_epoch; ++step) {
            model.zero_grad();
            double batch_loss = 0;
            for (int b = 0; b < cfg.batch_size; ++b) {
                const FrameSequence* seq = nullptr;
                do {
                    seq = &train_view[rng() % train_view.size()];
                } while (seq->frames.empty());
                auto sample = sample_crops(*seq, cfg.crop_size, rng, cfg.gof);
                std::optional<LatentTensor> prev;
                if (sample.previous && sample.previous->size() > 0)
                    prev = encode_and_quantize(*sample.previous, model);
                auto rd = compute_rd_loss(sample.frame, prev ? &*prev : nullptr,
                                          model, cfg.lambda, rng);
                rd->g.backward(rd->loss_id);
                batch_loss += rd->loss;
                epoch_rate += rd->rate_bits;
                epoch_mse += rd->mse;
                epoch_elems += rd->elements;
            }
            for (auto* p : params)
                for (auto& gv : p->grad) gv /= double(cfg.batch_size);
            ad::AdamConfig ac;
            ac.lr = lr;
            adam_step(params, ac, ++adam_t);
            epoch_loss += batch_loss / double(cfg.batch_size);
        }
        epoch_loss /= double(steps_per_epoch);

        auto [val_loss, val_rate, val_mse] = run_validation();
        const double stop_metric = val_frames.empty() ? epoch_loss : val_loss;

        TrainLogRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.train_loss = epoch_loss;
        row.val_loss = stop_metric;
        row.rate_bits_per_elem =
            val_frames.empty()
                ? (epoch_elems ? epoch_rate / double(epoch_elems) : 0.0)
                : val_rate;
        row.mse = val_frames.empty()
                      ? epoch_mse / double(steps_per_epoch * cfg.batch_size)
                      : val_mse;
        if (log) log->push_back(row);

        if (stop_metric < best_val) {
            best_val = stop_metric;
            since_best = 0;
            snapshot();
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }

    for (size_t i = 0; i < params.size(); ++i) params[i]->value = best.values[i];
    model.sync_meta();
    return model;
}

}  // namespace pcac

#endif  // PCAC_TRAINER_HPP
