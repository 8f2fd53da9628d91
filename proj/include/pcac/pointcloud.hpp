#ifndef PCAC_POINTCLOUD_HPP
#define PCAC_POINTCLOUD_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pcac {

using Coord = std::array<int32_t, 3>;
using Rgb = std::array<uint8_t, 3>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : Error { using Error::Error; };
struct UnsupportedContentError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct GeometryMismatchError : Error { using Error::Error; };
struct DecodeError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct DataError : Error { using Error::Error; };
struct TrainingDivergenceError : Error { using Error::Error; };

// Packed key for coordinate hashing; components biased so negative
// neighbor probes stay valid.
inline int64_t pack_coord(const Coord& c) {
    constexpr int64_t bias = 1 << 20;
    return ((int64_t(c[0]) + bias) << 42) | ((int64_t(c[1]) + bias) << 21) |
           (int64_t(c[2]) + bias);
}

struct CoordHash {
    size_t operator()(const Coord& c) const {
        uint64_t h = uint64_t(pack_coord(c)) * 0x9E3779B97F4A7C15ull;
        return size_t(h ^ (h >> 29));
    }
};

using CoordMap = std::unordered_map<Coord, int, CoordHash>;

inline CoordMap build_coord_map(const std::vector<Coord>& coords) {
    CoordMap m;
    m.reserve(coords.size() * 2);
    for (size_t i = 0; i < coords.size(); ++i) m.emplace(coords[i], int(i));
    return m;
}

inline bool coord_less(const Coord& a, const Coord& b) {
    return a < b;  // lexicographic (x, y, z)
}

// Permutation sorting coordinates ascending lexicographically.
// Duplicates are an invariant violation.
inline std::vector<int> canonical_order(const std::vector<Coord>& coords) {
    std::vector<int> perm(coords.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) {
        return coords[a] < coords[b];
    });
    for (size_t i = 1; i < perm.size(); ++i)
        if (coords[perm[i - 1]] == coords[perm[i]])
            throw ContractError("canonical_order: duplicate coordinate");
    return perm;
}

// Occupied integer voxels plus per-point 8-bit RGB. Points are kept in
// canonical (lexicographic) order at all times.
struct VoxelizedFrame {
    std::vector<Coord> coords;
    std::vector<Rgb> colors;
    int depth = 0;

    size_t size() const { return coords.size(); }

    void canonicalize() {
        auto perm = canonical_order(coords);
        std::vector<Coord> c(coords.size());
        std::vector<Rgb> k(colors.size());
        for (size_t i = 0; i < perm.size(); ++i) {
            c[i] = coords[perm[i]];
            k[i] = colors[perm[i]];
        }
        coords = std::move(c);
        colors = std::move(k);
    }

    void validate() const {
        if (coords.size() != colors.size())
            throw ContractError("frame: coords/colors length mismatch");
        const int32_t bound = depth >= 31 ? INT32_MAX : (1 << depth);
        for (const auto& c : coords)
            for (int a = 0; a < 3; ++a)
                if (c[a] < 0 || c[a] >= bound)
                    throw ContractError("frame: coordinate outside [0, 2^depth)");
    }
};

struct FrameSequence {
    std::vector<VoxelizedFrame> frames;
    std::string name;
};

struct QualityReport {
    double psnr_y = 0, psnr_u = 0, psnr_v = 0, psnr_yuv = 0;
    double mse_rgb = 0;
};

// BT.709 full range, +128 chroma offset, real-valued output.
inline std::array<double, 3> rgb_to_yuv(double r, double g, double b) {
    const double y = 0.2126 * r + 0.7152 * g + 0.0722 * b;
    const double u = (b - y) / 1.8556 + 128.0;
    const double v = (r - y) / 1.5748 + 128.0;
    return {y, u, v};
}

inline double psnr_from_mse(double mse) {
    if (mse < 255.0 * 255.0 * 1e-10) return 100.0;
    return std::min(100.0, 10.0 * std::log10(255.0 * 255.0 / mse));
}

inline QualityReport psnr(const VoxelizedFrame& ref, const VoxelizedFrame& rec) {
    if (ref.coords != rec.coords)
        throw GeometryMismatchError("psnr: coordinate sets differ");
    const size_t n = ref.size();
    if (n == 0) throw ContractError("psnr: empty frame");
    double se[3] = {0, 0, 0};
    double se_rgb = 0;
    for (size_t i = 0; i < n; ++i) {
        auto a = rgb_to_yuv(ref.colors[i][0], ref.colors[i][1], ref.colors[i][2]);
        auto b = rgb_to_yuv(rec.colors[i][0], rec.colors[i][1], rec.colors[i][2]);
        for (int ch = 0; ch < 3; ++ch) {
            const double d = a[ch] - b[ch];
            se[ch] += d * d;
            const double dr = double(ref.colors[i][ch]) - double(rec.colors[i][ch]);
            se_rgb += dr * dr;
        }
    }
    QualityReport q;
    q.psnr_y = psnr_from_mse(se[0] / n);
    q.psnr_u = psnr_from_mse(se[1] / n);
    q.psnr_v = psnr_from_mse(se[2] / n);
    q.psnr_yuv = (6.0 * q.psnr_y + q.psnr_u + q.psnr_v) / 8.0;
    q.mse_rgb = se_rgb / (3.0 * n);
    return q;
}

// ---------------------------------------------------------------------------
// PLY reader/writer: ASCII + binary little-endian, properties x y z and
// red green blue. Duplicate voxels merge by color averaging.

namespace detail {

enum class PlyType { F32, F64, I8, U8, I16, U16, I32, U32 };

inline PlyType ply_type(const std::string& s) {
    if (s == "float" || s == "float32") return PlyType::F32;
    if (s == "double" || s == "float64") return PlyType::F64;
    if (s == "char" || s == "int8") return PlyType::I8;
    if (s == "uchar" || s == "uint8") return PlyType::U8;
    if (s == "short" || s == "int16") return PlyType::I16;
    if (s == "ushort" || s == "uint16") return PlyType::U16;
    if (s == "int" || s == "int32") return PlyType::I32;
    if (s == "uint" || s == "uint32") return PlyType::U32;
    throw ParseError("ply: unknown property type '" + s + "'");
}

inline size_t ply_type_size(PlyType t) {
    switch (t) {
        case PlyType::I8: case PlyType::U8: return 1;
        case PlyType::I16: case PlyType::U16: return 2;
        case PlyType::F64: return 8;
        default: return 4;
    }
}

inline double read_binary_value(const char* p, PlyType t) {
    switch (t) {
        case PlyType::F32: { float v; std::memcpy(&v, p, 4); return v; }
        case PlyType::F64: { double v; std::memcpy(&v, p, 8); return v; }
        case PlyType::I8: { int8_t v; std::memcpy(&v, p, 1); return v; }
        case PlyType::U8: { uint8_t v; std::memcpy(&v, p, 1); return v; }
        case PlyType::I16: { int16_t v; std::memcpy(&v, p, 2); return v; }
        case PlyType::U16: { uint16_t v; std::memcpy(&v, p, 2); return v; }
        case PlyType::I32: { int32_t v; std::memcpy(&v, p, 4); return v; }
        case PlyType::U32: { uint32_t v; std::memcpy(&v, p, 4); return v; }
    }
    throw ParseError("ply: bad type");
}

}  // namespace detail

inline VoxelizedFrame load_ply(const std::string& path, int forced_depth = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);

    std::string line;
    if (!std::getline(in, line)) throw ParseError("ply: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "ply") throw ParseError("ply: missing magic");

    bool binary = false, format_seen = false;
    int comment_depth = 0;
    size_t vertex_count = 0;
    bool in_vertex_element = false, vertex_seen = false;
    struct Prop { std::string name; detail::PlyType type; };
    std::vector<Prop> vprops;

    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "format") {
            std::string f;
            ls >> f;
            if (f == "ascii") binary = false;
            else if (f == "binary_little_endian") binary = true;
            else throw ParseError("ply: unsupported format " + f);
            format_seen = true;
        } else if (tok == "comment") {
            std::string key;
            ls >> key;
            if (key == "depth") ls >> comment_depth;
        } else if (tok == "element") {
            std::string name;
            size_t count;
            ls >> name >> count;
            if (name == "vertex") {
                in_vertex_element = true;
                vertex_seen = true;
                vertex_count = count;
            } else {
                if (!vertex_seen)
                    throw UnsupportedContentError("ply: non-vertex element before vertices");
                in_vertex_element = false;
            }
        } else if (tok == "property") {
            if (!in_vertex_element) continue;
            std::string t;
            ls >> t;
            if (t == "list")
                throw UnsupportedContentError("ply: list property on vertex element");
            std::string name;
            ls >> name;
            vprops.push_back({name, detail::ply_type(t)});
        } else if (tok == "end_header") {
            break;
        } else if (tok.empty()) {
            continue;
        }
        if (!in) throw ParseError("ply: truncated header");
    }
    if (!format_seen) throw ParseError("ply: missing format line");
    if (!vertex_seen) throw ParseError("ply: missing vertex element");

    int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1;
    for (size_t i = 0; i < vprops.size(); ++i) {
        const auto& n = vprops[i].name;
        if (n == "x") ix = int(i);
        else if (n == "y") iy = int(i);
        else if (n == "z") iz = int(i);
        else if (n == "red") ir = int(i);
        else if (n == "green") ig = int(i);
        else if (n == "blue") ib = int(i);
    }
    if (ix < 0 || iy < 0 || iz < 0)
        throw ParseError("ply: missing x/y/z properties");
    if (ir < 0 || ig < 0 || ib < 0)
        throw UnsupportedContentError("ply: missing red/green/blue properties");

    std::vector<double> row(vprops.size());
    struct Acc { int64_t sum[3] = {0, 0, 0}; int64_t n = 0; };
    std::unordered_map<Coord, Acc, CoordHash> merge;
    merge.reserve(vertex_count * 2);

    size_t rec_size = 0;
    for (const auto& p : vprops) rec_size += detail::ply_type_size(p.type);
    std::vector<char> rec(rec_size);

    for (size_t v = 0; v < vertex_count; ++v) {
        if (binary) {
            if (!in.read(rec.data(), std::streamsize(rec_size)))
                throw ParseError("ply: truncated vertex data");
            size_t off = 0;
            for (size_t i = 0; i < vprops.size(); ++i) {
                row[i] = detail::read_binary_value(rec.data() + off, vprops[i].type);
                off += detail::ply_type_size(vprops[i].type);
            }
        } else {
            for (size_t i = 0; i < vprops.size(); ++i)
                if (!(in >> row[i])) throw ParseError("ply: truncated vertex data");
        }
        Coord c = {int32_t(std::llround(row[ix])), int32_t(std::llround(row[iy])),
                   int32_t(std::llround(row[iz]))};
        auto& a = merge[c];
        a.sum[0] += int64_t(std::llround(row[ir]));
        a.sum[1] += int64_t(std::llround(row[ig]));
        a.sum[2] += int64_t(std::llround(row[ib]));
        a.n += 1;
    }

    VoxelizedFrame f;
    f.coords.reserve(merge.size());
    f.colors.reserve(merge.size());
    for (const auto& [c, a] : merge) {
        f.coords.push_back(c);
        Rgb col;
        for (int ch = 0; ch < 3; ++ch) {
            // average, round half to even
            const double mean = double(a.sum[ch]) / double(a.n);
            col[ch] = uint8_t(std::clamp<long>(std::lround(std::nearbyint(mean)), 0, 255));
        }
        f.colors.push_back(col);
    }
    f.canonicalize();

    int32_t maxc = 0;
    for (const auto& c : f.coords)
        maxc = std::max({maxc, c[0], c[1], c[2]});
    int inferred = 1;
    while ((1 << inferred) <= maxc) ++inferred;
    f.depth = forced_depth > 0 ? forced_depth
             : comment_depth > 0 ? comment_depth
                                 : inferred;
    f.validate();
    return f;
}

inline void write_ply(const VoxelizedFrame& f, const std::string& path,
                      bool binary = false) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "ply\n"
        << (binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n")
        << "comment depth " << f.depth << "\n"
        << "element vertex " << f.size() << "\n"
        << "property float x\nproperty float y\nproperty float z\n"
        << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        << "end_header\n";
    for (size_t i = 0; i < f.size(); ++i) {
        if (binary) {
            float xyz[3] = {float(f.coords[i][0]), float(f.coords[i][1]),
                            float(f.coords[i][2])};
            out.write(reinterpret_cast<const char*>(xyz), 12);
            out.write(reinterpret_cast<const char*>(f.colors[i].data()), 3);
        } else {
            out << f.coords[i][0] << ' ' << f.coords[i][1] << ' ' << f.coords[i][2]
                << ' ' << int(f.colors[i][0]) << ' ' << int(f.colors[i][1]) << ' '
                << int(f.colors[i][2]) << '\n';
        }
    }
    if (!out) throw IoError("write failed: " + path);
}

// Unique parent coordinates one stride level up: floor(c / (2*stride)) * (2*stride).
inline std::vector<Coord> downsample_coords(const std::vector<Coord>& coords,
                                            int stride_in) {
    const int32_t s = 2 * stride_in;
    std::vector<Coord> out;
    out.reserve(coords.size());
    for (const auto& c : coords) {
        Coord p;
        for (int a = 0; a < 3; ++a) {
            int32_t q = c[a] >= 0 ? c[a] / s : -((-c[a] + s - 1) / s);
            p[a] = q * s;
        }
        out.push_back(p);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

}  // namespace pcac

#endif  // PCAC_POINTCLOUD_HPP
