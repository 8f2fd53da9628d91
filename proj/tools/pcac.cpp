#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pcac/eval.hpp"
#include "pcac/trainer.hpp"

namespace fs = std::filesystem;
using namespace pcac;

namespace {

std::vector<std::string> sorted_ply_files(const std::string& dir) {
    std::vector<std::string> out;
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".ply")
            out.push_back(e.path().string());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw DataError("no .ply files in " + dir);
    return out;
}

FrameSequence load_sequence(const std::string& dir) {
    FrameSequence seq;
    for (const auto& p : sorted_ply_files(dir)) seq.frames.push_back(load_ply(p));
    return seq;
}

// training data: either a directory of .ply frames (one sequence) or a
// directory of such directories (one sequence each)
std::vector<FrameSequence> load_training_data(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    bool has_ply = false;
    std::vector<std::string> subdirs;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".ply") has_ply = true;
        if (e.is_directory()) subdirs.push_back(e.path().string());
    }
    if (has_ply) return {load_sequence(dir)};
    std::sort(subdirs.begin(), subdirs.end());
    std::vector<FrameSequence> out;
    for (const auto& d : subdirs) out.push_back(load_sequence(d));
    if (out.empty()) throw DataError("no sequences in " + dir);
    return out;
}

// flat key=value lines; '#' starts a comment
TrainConfig parse_config(const std::string& path) {
    TrainConfig cfg;
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(path + ":" + std::to_string(lineno) +
                             ": expected key=value");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        try {
            if (key == "c1") cfg.arch.c1 = std::stoi(val);
            else if (key == "c2") cfg.arch.c2 = std::stoi(val);
            else if (key == "latent_channels") cfg.arch.latent_channels = std::stoi(val);
            else if (key == "res_blocks") cfg.arch.res_blocks = std::stoi(val);
            else if (key == "alphabet") cfg.arch.alphabet = std::stoi(val);
            else if (key == "lambda") cfg.lambda = std::stod(val);
            else if (key == "lr") cfg.lr = std::stod(val);
            else if (key == "lr_decay") cfg.lr_decay = std::stod(val);
            else if (key == "lr_decay_epochs") cfg.lr_decay_epochs = std::stoi(val);
            else if (key == "batch_size") cfg.batch_size = std::stoi(val);
            else if (key == "patience") cfg.patience = std::stoi(val);
            else if (key == "crop_size") cfg.crop_size = std::stoi(val);
            else if (key == "gof") cfg.gof = std::stoi(val);
            else if (key == "max_epochs") cfg.max_epochs = std::stoi(val);
            else if (key == "seed") cfg.seed = std::stoull(val);
            else
                throw ParseError(path + ":" + std::to_string(lineno) +
                                 ": unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw ParseError(path + ":" + std::to_string(lineno) +
                             ": bad value for '" + key + "'");
        }
    }
    return cfg;
}

int cmd_train(const std::string& config, double lambda, const std::string& data,
              const std::string& out, const std::string& log_path) {
    TrainConfig cfg = config.empty() ? TrainConfig{} : parse_config(config);
    if (lambda > 0) cfg.lambda = lambda;
    cfg.validate();
    auto sequences = load_training_data(data);
    size_t frames = 0;
    for (const auto& s : sequences) frames += s.frames.size();
    std::cout << "training on " << sequences.size() << " sequence(s), " << frames
              << " frames, lambda " << cfg.lambda << "\n";
    std::vector<TrainLogRow> log;
    auto m = fit(sequences, cfg, &log);
    m.save(out);
    if (!log_path.empty()) write_train_log(log_path, log);
    if (!log.empty())
        std::cout << "stopped after " << log.size() << " epoch(s), best val loss "
                  << log.back().val_loss << "\n";
    std::cout << "model written to " << out << "\n";
    return 0;
}

int cmd_encode(const std::string& model_path, const std::string& in_dir,
               const std::string& out, int gof) {
    auto m = CodecModel::load(model_path);
    const uint64_t model_id = file_hash(model_path);
    auto seq = load_sequence(in_dir);
    SequenceEncodeResult r;
    encode_sequence_file(seq, m, model_id, gof, out, &r);
    size_t points = 0, bytes = 0;
    for (const auto& fr : r.container.frames) {
        points += fr.point_count;
        bytes += fr.payload.size();
    }
    std::cout << seq.frames.size() << " frame(s), " << points << " points, "
              << bytes << " payload bytes ("
              << (points ? double(bytes) * 8.0 / double(points) : 0.0)
              << " bpp) -> " << out << "\n";
    return 0;
}

int cmd_decode(const std::string& model_path, const std::string& geom_dir,
               const std::string& in, const std::string& out_dir) {
    auto m = CodecModel::load(model_path);
    const uint64_t model_id = file_hash(model_path);
    auto geometry = load_sequence(geom_dir);
    auto recon = decode_sequence_file(in, geometry, m, model_id);
    fs::create_directories(out_dir);
    for (size_t t = 0; t < recon.frames.size(); ++t) {
        std::ostringstream name;
        name << "frame_" << std::setw(4) << std::setfill('0') << t << ".ply";
        write_ply(recon.frames[t], (fs::path(out_dir) / name.str()).string());
    }
    std::cout << recon.frames.size() << " frame(s) written to " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::vector<std::string>& model_paths, const std::string& seq_dir,
             const std::string& out_dir, int gof) {
    std::vector<CodecModel> models;
    for (const auto& p : model_paths) models.push_back(CodecModel::load(p));
    std::vector<CodecModel*> ptrs;
    for (auto& m : models) ptrs.push_back(&m);
    auto seq = load_sequence(seq_dir);
    auto curve = run_rd_sweep(seq, ptrs, gof);
    const VoxelizedFrame* ref = nullptr;
    std::optional<VoxelizedFrame> rec;
    for (const auto& f : seq.frames)
        if (f.size()) {
            ref = &f;
            break;
        }
    if (ref) {
        // distortion map against the lowest-rate model's reconstruction
        auto enc = encode_frame(*ref, nullptr, *ptrs.front());
        rec = recon_to_frame(ref->coords, enc.recon, ref->depth);
    }
    emit_report({curve}, {}, out_dir, ref, rec ? &*rec : nullptr);
    for (const auto& p : curve.points)
        std::cout << p.label << ": " << format_sig6(p.bpp) << " bpp, "
                  << format_sig6(p.psnr_y) << " dB Y, " << format_sig6(p.psnr_yuv)
                  << " dB YUV\n";
    std::cout << "report written to " << out_dir << "\n";
    return 0;
}

int cmd_bdrate(const std::string& anchor_path, const std::string& test_path) {
    auto anchor = parse_rd_csv(anchor_path);
    auto test = parse_rd_csv(test_path);
    auto y = bd_metrics(anchor, test, PsnrChannel::Y);
    auto yuv = bd_metrics(anchor, test, PsnrChannel::YUV);
    for (const auto& w : y.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "bd-rate (Y):    " << format_sig6(y.bd_rate_percent) << " %\n"
              << "bd-psnr (Y):    " << format_sig6(y.bd_quality_db) << " dB\n"
              << "bd-rate (YUV):  " << format_sig6(yuv.bd_rate_percent) << " %\n"
              << "bd-psnr (YUV):  " << format_sig6(yuv.bd_quality_db) << " dB\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"learned point-cloud attribute codec"};
    app.require_subcommand(1);

    std::string config, data, model, in, out, geometry, log_path;
    std::vector<std::string> models;
    double lambda = 0;
    int gof = 8;

    auto* train = app.add_subcommand("train", "fit a model on .ply sequences");
    train->add_option("--config", config, "key=value training config");
    train->add_option("--lambda", lambda, "rate-distortion tradeoff (overrides config)");
    train->add_option("--data", data, "directory of .ply frames or of sequence directories")
        ->required();
    train->add_option("--out", out, "output model file")->required();
    train->add_option("--log", log_path, "per-epoch CSV log");

    auto* encode = app.add_subcommand("encode", "compress a .ply sequence");
    encode->add_option("--model", model, "model file")->required();
    encode->add_option("--in", in, "directory of .ply frames")->required();
    encode->add_option("--out", out, "output bitstream")->required();
    encode->add_option("--gof", gof, "group-of-frames length");

    auto* decode = app.add_subcommand("decode", "reconstruct colors onto known geometry");
    decode->add_option("--model", model, "model file")->required();
    decode->add_option("--geometry", geometry, "directory of .ply frames with the geometry")
        ->required();
    decode->add_option("--in", in, "input bitstream")->required();
    decode->add_option("--out", out, "output directory for .ply frames")->required();

    auto* eval = app.add_subcommand("eval", "rate-distortion sweep over models");
    eval->add_option("--models", models, "model files, one RD point each")
        ->required()
        ->expected(-1);
    eval->add_option("--seq", in, "directory of .ply frames")->required();
    eval->add_option("--out", out, "report directory")->required();
    eval->add_option("--gof", gof, "group-of-frames length");

    auto* bdrate = app.add_subcommand("bdrate", "BD metrics between two RD CSV files");
    std::string anchor_csv, test_csv;
    bdrate->add_option("--anchor", anchor_csv, "anchor RD CSV")->required();
    bdrate->add_option("--test", test_csv, "test RD CSV")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(config, lambda, data, out, log_path);
        if (*encode) return cmd_encode(model, in, out, gof);
        if (*decode) return cmd_decode(model, geometry, in, out);
        if (*eval) return cmd_eval(models, in, out, gof);
        if (*bdrate) return cmd_bdrate(anchor_csv, test_csv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
