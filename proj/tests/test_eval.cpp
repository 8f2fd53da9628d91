#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "pcac/eval.hpp"

using namespace pcac;

namespace {

RDCurve make_curve(const std::string& label,
                   const std::vector<std::pair<double, double>>& pts) {
    RDCurve c;
    c.label = label;
    for (const auto& [bpp, q] : pts) {
        RDPoint p;
        p.label = label;
        p.bpp = bpp;
        p.psnr_y = q;
        p.psnr_yuv = q - 0.5;
        c.points.push_back(p);
    }
    return c;
}

// smooth monotone random curve: psnr roughly affine in log-rate with mild
// curvature
RDCurve random_curve(std::mt19937_64& rng, const std::string& label) {
    const double base = 28.0 + ad::uniform01(rng) * 6.0;
    const double slope = 4.0 + ad::uniform01(rng) * 4.0;
    const double curve = (ad::uniform01(rng) - 0.5) * 0.8;
    const double r0 = 0.5 + ad::uniform01(rng);
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i < 5; ++i) {
        const double rate = r0 * std::pow(2.2, i);
        const double lr = std::log10(rate);
        pts.emplace_back(rate, base + slope * lr + curve * lr * lr);
    }
    return make_curve(label, pts);
}

// trapezoid quadrature on the same fitted cubics
double oracle_mean_diff(const std::vector<double>& xa, const std::vector<double>& ya,
                        const std::vector<double>& xb, const std::vector<double>& yb) {
    const double lo = std::max(*std::min_element(xa.begin(), xa.end()),
                               *std::min_element(xb.begin(), xb.end()));
    const double hi = std::min(*std::max_element(xa.begin(), xa.end()),
                               *std::max_element(xb.begin(), xb.end()));
    const auto pa = pcac::detail::polyfit3(xa, ya);
    const auto pb = pcac::detail::polyfit3(xb, yb);
    const int n = 20000;
    double acc = 0;
    for (int i = 0; i <= n; ++i) {
        const double x = lo + (hi - lo) * double(i) / n;
        const double w = (i == 0 || i == n) ? 0.5 : 1.0;
        acc += w * (pcac::detail::poly_eval(pb, x) - pcac::detail::poly_eval(pa, x));
    }
    return acc / double(n);
}

void curve_axes(const RDCurve& c, std::vector<double>& lr, std::vector<double>& q) {
    RDCurve s = c;
    s.sort_by_bpp();
    for (const auto& p : s.points) {
        lr.push_back(std::log10(p.bpp));
        q.push_back(p.psnr_y);
    }
}

}  // namespace

TEST_CASE("bd_metrics: identical curves give exactly zero") {
    auto a = make_curve("a", {{1, 30}, {2, 33}, {4, 36}, {8, 38}});
    auto r = bd_metrics(a, a);
    CHECK(std::abs(r.bd_rate_percent) < 1e-9);
    CHECK(std::abs(r.bd_quality_db) < 1e-9);
    CHECK(r.warnings.empty());
}

TEST_CASE("bd_metrics: doubled rate costs exactly +100%") {
    auto a = make_curve("a", {{1, 30}, {2, 33}, {4, 36}, {8, 38}});
    auto b = make_curve("b", {{2, 30}, {4, 33}, {8, 36}, {16, 38}});
    auto r = bd_metrics(a, b);
    CHECK(r.bd_rate_percent == doctest::Approx(100.0).epsilon(1e-9));
    // halved rate: the sign convention makes cheaper negative
    auto h = make_curve("h", {{0.5, 30}, {1, 33}, {2, 36}, {4, 38}});
    CHECK(bd_metrics(a, h).bd_rate_percent == doctest::Approx(-50.0).epsilon(1e-9));
}

TEST_CASE("bd_metrics matches the quadrature oracle on 100 random pairs") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        auto a = random_curve(rng, "a");
        auto b = random_curve(rng, "b");
        BdResult r;
        std::vector<double> lr_a, q_a, lr_b, q_b;
        curve_axes(a, lr_a, q_a);
        curve_axes(b, lr_b, q_b);
        try {
            r = bd_metrics(a, b);
        } catch (const DataError&) {
            continue;  // no PSNR overlap for this draw
        }
        const double dq = oracle_mean_diff(lr_a, q_a, lr_b, q_b);
        CHECK(r.bd_quality_db ==
              doctest::Approx(dq).epsilon(1e-3).scale(std::max(1.0, std::abs(dq))));
        const double dr = (std::pow(10.0, oracle_mean_diff(q_a, lr_a, q_b, lr_b)) - 1.0) * 100.0;
        CHECK(r.bd_rate_percent ==
              doctest::Approx(dr).epsilon(1e-3).scale(std::max(1.0, std::abs(dr))));

        // antisymmetry of the quality delta
        auto rev = bd_metrics(b, a);
        CHECK(std::abs(rev.bd_quality_db + r.bd_quality_db) < 1e-6);
    }
}

TEST_CASE("bd_metrics error and warning paths") {
    auto a = make_curve("a", {{1, 30}, {2, 31}, {4, 32}, {8, 33}});
    auto far = make_curve("far", {{1, 50}, {2, 51}, {4, 52}, {8, 53}});
    CHECK_THROWS_AS(bd_metrics(a, far), DataError);

    auto three = make_curve("three", {{1, 30}, {2, 31}, {4, 32}});
    CHECK_THROWS_AS(bd_metrics(a, three), ContractError);

    auto wobble = make_curve("w", {{1, 30}, {2, 33}, {4, 31}, {8, 34}});
    auto r = bd_metrics(a, wobble);
    REQUIRE(r.warnings.size() == 1);
    CHECK(r.warnings[0].find("non-monotone") != std::string::npos);
}

TEST_CASE("rd csv: write/parse/write round-trips byte for byte") {
    std::vector<RDCurve> curves = {
        make_curve("x", {{0.123456789, 30.5555555}, {1.5, 33.1}, {4, 36}, {8, 38}})};
    curves[0].points[0].encode_seconds = 0.001234567;
    curves[0].points[0].decode_seconds = 12345.678;
    auto dir = std::filesystem::temp_directory_path();
    auto p1 = (dir / "rd1.csv").string();
    auto p2 = (dir / "rd2.csv").string();
    write_rd_csv(p1, curves);
    auto parsed = parse_rd_csv(p1);
    write_rd_csv(p2, {parsed});
    std::ifstream f1(p1), f2(p2);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
    CHECK(format_sig6(0.123456789) == "0.123457");
}

TEST_CASE("distortion scalar and map") {
    CHECK(distortion_scalar({10, 20, 30}, {13, 16, 30}) == doctest::Approx(5.0));
    CHECK(distortion_scalar({0, 0, 0}, {0, 0, 0}) == 0.0);

    VoxelizedFrame ref;
    ref.depth = 4;
    ref.coords = {{0, 0, 0}, {1, 0, 0}};
    ref.colors = {{100, 100, 100}, {50, 60, 70}};
    auto rec = ref;
    rec.colors[1] = {53, 64, 70};  // error (3,4,0) -> scalar 5
    auto path = (std::filesystem::temp_directory_path() / "dmap.ply").string();
    write_distortion_map(ref, rec, path);
    auto map = load_ply(path);
    CHECK(map.colors[0] == Rgb{0, 0, 0});  // zero error: darkest value
    CHECK(map.colors[1] == Rgb{5, 5, 5});

    rec.coords[1] = {2, 0, 0};
    rec.canonicalize();
    CHECK_THROWS_AS(write_distortion_map(ref, rec, path), GeometryMismatchError);
}

TEST_CASE("emit_report writes all artifacts, errors on unwritable target") {
    auto dir = std::filesystem::temp_directory_path() / "pcac_report";
    std::filesystem::remove_all(dir);
    auto curves = std::vector<RDCurve>{
        make_curve("a", {{1, 30}, {2, 33}, {4, 36}, {8, 38}})};
    BdSummaryRow row;
    row.anchor = "a";
    row.test = "a";
    row.y = bd_metrics(curves[0], curves[0]);
    row.yuv = bd_metrics(curves[0], curves[0], PsnrChannel::YUV);
    VoxelizedFrame ref;
    ref.depth = 4;
    ref.coords = {{0, 0, 0}};
    ref.colors = {{1, 2, 3}};
    emit_report(curves, {row}, dir.string(), &ref, &ref);
    CHECK(std::filesystem::exists(dir / "rd_curve.csv"));
    CHECK(std::filesystem::exists(dir / "bd_summary.csv"));
    CHECK(std::filesystem::exists(dir / "rd_plot.svg"));
    CHECK(std::filesystem::exists(dir / "distortion_map.ply"));

    auto blocker = std::filesystem::temp_directory_path() / "pcac_blocker";
    std::ofstream(blocker) << "file";
    CHECK_THROWS_AS(emit_report(curves, {row}, (blocker / "sub").string()), IoError);
}

TEST_CASE("run_rd_sweep: deterministic points, timing varies") {
    ArchSpec arch;
    arch.c1 = 2;
    arch.c2 = 3;
    arch.latent_channels = 2;
    arch.res_blocks = 1;
    auto m1 = CodecModel::create(arch, 1);
    auto m2 = CodecModel::create(arch, 2);
    m1.lambda = 0.01;
    m2.lambda = 0.1;

    FrameSequence seq;
    VoxelizedFrame f;
    f.depth = 6;
    std::mt19937_64 rng(9);
    std::unordered_map<Coord, int, CoordHash> seen;
    while (f.coords.size() < 40) {
        Coord c = {int32_t(rng() % 24), int32_t(rng() % 24), int32_t(rng() % 24)};
        if (!seen.emplace(c, 1).second) continue;
        f.coords.push_back(c);
        f.colors.push_back({uint8_t(c[0] * 10), uint8_t(c[1] * 10), uint8_t(c[2] * 10)});
    }
    f.canonicalize();
    seq.frames.push_back(f);

    CHECK_THROWS_AS(run_rd_sweep(seq, {&m1}, 8), ContractError);
    auto curve = run_rd_sweep(seq, {&m1, &m2}, 8);
    REQUIRE(curve.points.size() == 2);
    for (const auto& p : curve.points) {
        CHECK(p.bpp > 0);
        CHECK(p.encode_seconds >= 0);
        CHECK(p.decode_seconds >= 0);
        CHECK(std::isfinite(p.psnr_y));
    }
    auto again = run_rd_sweep(seq, {&m1, &m2}, 8);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(curve.points[i].bpp == again.points[i].bpp);
        CHECK(curve.points[i].psnr_y == again.points[i].psnr_y);
        CHECK(curve.points[i].psnr_yuv == again.points[i].psnr_yuv);
    }
}
