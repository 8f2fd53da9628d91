#ifndef PCAC_EVAL_HPP
#define PCAC_EVAL_HPP

#include <chrono>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "pcac/bitstream.hpp"
#include "pcac/pointcloud.hpp"

namespace pcac {

struct RDPoint {
    std::string label;
    double bpp = 0;
    double psnr_y = 0, psnr_yuv = 0;
    double encode_seconds = 0, decode_seconds = 0;
};

struct RDCurve {
    std::string label;
    std::vector<RDPoint> points;

    void sort_by_bpp() {
        std::stable_sort(points.begin(), points.end(),
                         [](const RDPoint& a, const RDPoint& b) { return a.bpp < b.bpp; });
    }
};

// ---------------------------------------------------------------------------
// RD sweep: one point per model, frame-averaged bpp / PSNR, mean per-frame
// wall time.

inline RDPoint measure_model(const FrameSequence& seq, CodecModel& m, int gof,
                             const std::string& label) {
    using clock = std::chrono::steady_clock;
    RDPoint p;
    p.label = label;

    const auto t0 = clock::now();
    auto enc = encode_sequence_frames(seq, m, 0, gof);
    const auto t1 = clock::now();

    // decode chain from the container records only
    std::optional<LatentTensor> prev;
    std::vector<FrameDecodeResult> dec;
    const auto t2 = clock::now();
    for (size_t t = 0; t < enc.container.frames.size(); ++t) {
        dec.push_back(decode_frame(enc.container.frames[t], seq.frames[t].coords,
                                   prev ? &*prev : nullptr, m));
        prev = dec.back().latent;
    }
    const auto t3 = clock::now();

    double bpp = 0, py = 0, pyuv = 0;
    size_t counted = 0;
    for (size_t t = 0; t < seq.frames.size(); ++t) {
        if (seq.frames[t].size() == 0) continue;
        const auto rec =
            recon_to_frame(seq.frames[t].coords, dec[t].recon, seq.frames[t].depth);
        const auto q = psnr(seq.frames[t], rec);
        bpp += enc.container.frames[t].bpp();
        py += q.psnr_y;
        pyuv += q.psnr_yuv;
        ++counted;
    }
    if (counted == 0) throw DataError("rd sweep: sequence has no nonempty frames");
    p.bpp = bpp / double(counted);
    p.psnr_y = py / double(counted);
    p.psnr_yuv = pyuv / double(counted);
    const double nf = double(seq.frames.size());
    p.encode_seconds = std::chrono::duration<double>(t1 - t0).count() / nf;
    p.decode_seconds = std::chrono::duration<double>(t3 - t2).count() / nf;
    return p;
}

inline RDCurve run_rd_sweep(const FrameSequence& seq,
                            std::vector<CodecModel*> models, int gof,
                            const std::string& label = "pcac") {
    if (models.size() < 2) throw ContractError("rd sweep: need at least 2 models");
    RDCurve curve;
    curve.label = label;
    for (CodecModel* m : models) {
        std::ostringstream name;
        name << label << "_lambda" << m->lambda;
        curve.points.push_back(measure_model(seq, *m, gof, name.str()));
    }
    curve.sort_by_bpp();
    return curve;
}

// ---------------------------------------------------------------------------
// Bjontegaard metrics: cubic least-squares fit on mean-centered abscissa,
// closed-form integration over the overlap.

namespace detail {

struct Poly3 {
    double xc = 0;     // centering offset
    double c[4] = {};  // c0 + c1 u + c2 u^2 + c3 u^3, u = x - xc
};

inline Poly3 polyfit3(const std::vector<double>& xs, const std::vector<double>& ys) {
    const size_t n = xs.size();
    if (n < 4) throw ContractError("bd fit: need at least 4 points");
    Poly3 p;
    for (double x : xs) p.xc += x;
    p.xc /= double(n);

    double sx[7] = {};
    double sy[4] = {};
    for (size_t i = 0; i < n; ++i) {
        const double u = xs[i] - p.xc;
        double uk = 1.0;
        for (int k = 0; k <= 6; ++k) {
            sx[k] += uk;
            if (k <= 3) sy[k] += uk * ys[i];
            uk *= u;
        }
    }
    double a[4][5];
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) a[r][c] = sx[r + c];
        a[r][4] = sy[r];
    }
    for (int col = 0; col < 4; ++col) {  // partial-pivot elimination
        int piv = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        for (int c = 0; c < 5; ++c) std::swap(a[col][c], a[piv][c]);
        if (a[col][col] == 0.0) throw DataError("bd fit: singular system");
        for (int r = 0; r < 4; ++r) {
            if (r == col) continue;
            const double f = a[r][col] / a[col][col];
            for (int c = col; c < 5; ++c) a[r][c] -= f * a[col][c];
        }
    }
    for (int r = 0; r < 4; ++r) p.c[r] = a[r][4] / a[r][r];
    return p;
}

inline double poly_eval(const Poly3& p, double x) {
    const double u = x - p.xc;
    return p.c[0] + u * (p.c[1] + u * (p.c[2] + u * p.c[3]));
}

inline double poly_integral(const Poly3& p, double lo, double hi) {
    auto anti = [&](double x) {
        const double u = x - p.xc;
        return u * (p.c[0] + u * (p.c[1] / 2 + u * (p.c[2] / 3 + u * p.c[3] / 4)));
    };
    return anti(hi) - anti(lo);
}

inline double mean_fit_difference(const std::vector<double>& xa,
                                  const std::vector<double>& ya,
                                  const std::vector<double>& xb,
                                  const std::vector<double>& yb) {
    const double lo = std::max(*std::min_element(xa.begin(), xa.end()),
                               *std::min_element(xb.begin(), xb.end()));
    const double hi = std::min(*std::max_element(xa.begin(), xa.end()),
                               *std::max_element(xb.begin(), xb.end()));
    if (!(hi > lo)) throw DataError("bd: no overlap between curves");
    const Poly3 pa = polyfit3(xa, ya);
    const Poly3 pb = polyfit3(xb, yb);
    return (poly_integral(pb, lo, hi) - poly_integral(pa, lo, hi)) / (hi - lo);
}

}  // namespace detail

struct BdResult {
    double bd_rate_percent = 0;
    double bd_quality_db = 0;
    std::vector<std::string> warnings;
};

enum class PsnrChannel { Y, YUV };

inline BdResult bd_metrics(const RDCurve& anchor_in, const RDCurve& test_in,
                           PsnrChannel ch = PsnrChannel::Y) {
    BdResult out;
    auto extract = [&](const RDCurve& c, const char* name, std::vector<double>& lr,
                       std::vector<double>& q) {
        RDCurve sorted = c;
        sorted.sort_by_bpp();
        bool monotone = true;
        for (size_t i = 0; i < sorted.points.size(); ++i) {
            const auto& p = sorted.points[i];
            if (p.bpp <= 0) throw ContractError("bd: nonpositive rate");
            const double psnr = ch == PsnrChannel::Y ? p.psnr_y : p.psnr_yuv;
            if (!std::isfinite(psnr)) throw ContractError("bd: non-finite PSNR");
            if (i > 0 && psnr < q.back()) monotone = false;
            lr.push_back(std::log10(p.bpp));
            q.push_back(psnr);
        }
        if (!monotone)
            out.warnings.push_back(std::string(name) +
                                   ": non-monotone RD curve, proceeding on sorted data");
    };
    std::vector<double> lr_a, q_a, lr_b, q_b;
    extract(anchor_in, "anchor", lr_a, q_a);
    extract(test_in, "test", lr_b, q_b);

    const double d_lograte = detail::mean_fit_difference(q_a, lr_a, q_b, lr_b);
    out.bd_rate_percent = (std::pow(10.0, d_lograte) - 1.0) * 100.0;
    out.bd_quality_db = detail::mean_fit_difference(lr_a, q_a, lr_b, q_b);
    return out;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string format_sig6(double v) {
    std::ostringstream s;
    s << std::setprecision(6) << v;
    return s.str();
}

inline void write_rd_csv(const std::string& path,
                         const std::vector<RDCurve>& curves) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "label,bpp,psnr_y,psnr_yuv,enc_s,dec_s\n";
    for (const auto& c : curves)
        for (const auto& p : c.points)
            out << p.label << ',' << format_sig6(p.bpp) << ',' << format_sig6(p.psnr_y)
                << ',' << format_sig6(p.psnr_yuv) << ',' << format_sig6(p.encode_seconds)
                << ',' << format_sig6(p.decode_seconds) << '\n';
    if (!out) throw IoError("write failed: " + path);
}

// One CSV file holds one curve (e.g., an externally produced anchor).
inline RDCurve parse_rd_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("label,bpp", 0) != 0)
        throw ParseError("rd csv: bad header");
    RDCurve curve;
    curve.label = std::filesystem::path(path).stem().string();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        RDPoint p;
        std::string field;
        if (!std::getline(row, p.label, ',')) throw ParseError("rd csv: bad row");
        auto num = [&](double& v) {
            if (!std::getline(row, field, ',')) throw ParseError("rd csv: bad row");
            try {
                v = std::stod(field);
            } catch (const std::exception&) {
                throw ParseError("rd csv: bad number '" + field + "'");
            }
        };
        num(p.bpp);
        num(p.psnr_y);
        num(p.psnr_yuv);
        num(p.encode_seconds);
        num(p.decode_seconds);
        curve.points.push_back(p);
    }
    return curve;
}

struct BdSummaryRow {
    std::string anchor, test;
    BdResult y, yuv;
};

inline void write_bd_csv(const std::string& path,
                         const std::vector<BdSummaryRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "anchor,test,bd_rate_y_percent,bd_quality_y_db,"
           "bd_rate_yuv_percent,bd_quality_yuv_db\n";
    for (const auto& r : rows)
        out << r.anchor << ',' << r.test << ',' << format_sig6(r.y.bd_rate_percent)
            << ',' << format_sig6(r.y.bd_quality_db) << ','
            << format_sig6(r.yuv.bd_rate_percent) << ','
            << format_sig6(r.yuv.bd_quality_db) << '\n';
}

inline void write_rd_svg(const std::string& path,
                         const std::vector<RDCurve>& curves) {
    double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
    for (const auto& c : curves)
        for (const auto& p : c.points) {
            min_x = std::min(min_x, p.bpp);
            max_x = std::max(max_x, p.bpp);
            min_y = std::min(min_y, p.psnr_y);
            max_y = std::max(max_y, p.psnr_y);
        }
    if (min_x > max_x) throw ContractError("svg: no points");
    if (max_x == min_x) max_x = min_x + 1;
    if (max_y == min_y) max_y = min_y + 1;

    const int W = 640, H = 480, M = 60;
    auto sx = [&](double x) { return M + (x - min_x) / (max_x - min_x) * (W - 2 * M); };
    auto sy = [&](double y) { return H - M - (y - min_y) / (max_y - min_y) * (H - 2 * M); };
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b"};

    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
        << "\" height=\"" << H << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<rect x=\"" << M << "\" y=\"" << M << "\" width=\"" << W - 2 * M
        << "\" height=\"" << H - 2 * M << "\" fill=\"none\" stroke=\"black\"/>\n"
        << "<text x=\"" << W / 2 << "\" y=\"" << H - 15
        << "\" text-anchor=\"middle\">bpp</text>\n"
        << "<text x=\"18\" y=\"" << H / 2 << "\" transform=\"rotate(-90 18 "
        << H / 2 << ")\" text-anchor=\"middle\">PSNR-Y (dB)</text>\n";
    for (size_t ci = 0; ci < curves.size(); ++ci) {
        RDCurve c = curves[ci];
        c.sort_by_bpp();
        const char* color = palette[ci % 6];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
        for (const auto& p : c.points) out << sx(p.bpp) << ',' << sy(p.psnr_y) << ' ';
        out << "\"/>\n";
        for (const auto& p : c.points)
            out << "<circle cx=\"" << sx(p.bpp) << "\" cy=\"" << sy(p.psnr_y)
                << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        out << "<text x=\"" << W - M + 5 << "\" y=\"" << M + 16 * double(ci + 1)
            << "\" fill=\"" << color << "\" font-size=\"11\">" << c.label
            << "</text>\n";
    }
    out << "</svg>\n";
}

// Per-point distortion scalar: Euclidean norm of the RGB error.
inline double distortion_scalar(const Rgb& ref, const Rgb& rec) {
    double acc = 0;
    for (int c = 0; c < 3; ++c) {
        const double d = double(ref[size_t(c)]) - double(rec[size_t(c)]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

// Grayscale distortion map: darker = better quality.
inline void write_distortion_map(const VoxelizedFrame& ref,
                                 const VoxelizedFrame& rec,
                                 const std::string& path) {
    if (ref.coords != rec.coords)
        throw GeometryMismatchError("distortion map: geometry mismatch");
    VoxelizedFrame map;
    map.depth = ref.depth;
    map.coords = ref.coords;
    map.colors.resize(ref.size());
    for (size_t i = 0; i < ref.size(); ++i) {
        const double s = distortion_scalar(ref.colors[i], rec.colors[i]);
        const uint8_t g = uint8_t(std::clamp(std::nearbyint(s), 0.0, 255.0));
        map.colors[i] = {g, g, g};
    }
    write_ply(map, path);
}

inline void emit_report(const std::vector<RDCurve>& curves,
                        const std::vector<BdSummaryRow>& bd,
                        const std::string& out_dir,
                        const VoxelizedFrame* distortion_ref = nullptr,
                        const VoxelizedFrame* distortion_rec = nullptr) {
    std::filesystem::path dir(out_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (!std::filesystem::is_directory(dir))
        throw IoError("cannot create output directory " + out_dir);
    write_rd_csv((dir / "rd_curve.csv").string(), curves);
    write_bd_csv((dir / "bd_summary.csv").string(), bd);
    write_rd_svg((dir / "rd_plot.svg").string(), curves);
    if (distortion_ref && distortion_rec)
        write_distortion_map(*distortion_ref, *distortion_rec,
                             (dir / "distortion_map.ply").string());
}

}  // namespace pcac

#endif  // PCAC_EVAL_HPP
