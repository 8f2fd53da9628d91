#ifndef PCAC_RANGE_CODER_HPP
#define PCAC_RANGE_CODER_HPP

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "pcac/context_model.hpp"
#include "pcac/pointcloud.hpp"

namespace pcac {

// Fixed-point cumulative frequency table over [-A, A], total 2^16. Symbols
// outside the explicit band carry frequency exactly 1; band frequencies are
// largest-remainder rounded so the table totals 65536.
struct SymbolModel {
    int A = 255;
    int band_lo = 0, band_hi = -1;
    std::vector<uint32_t> cum;  // size band_hi - band_lo + 2, cum[0] = 0
    static constexpr uint32_t kTotal = 65536;

    int alphabet_size() const { return 2 * A + 1; }

    // cumulative frequency below s, valid for s in [-A, A+1]
    uint32_t start(int s) const {
        if (s <= band_lo) return uint32_t(s + A);
        if (s <= band_hi + 1) return uint32_t(band_lo + A) + cum[size_t(s - band_lo)];
        return uint32_t(band_lo + A) + cum.back() + uint32_t(s - band_hi - 1);
    }

    uint32_t freq(int s) const { return start(s + 1) - start(s); }
};

namespace detail {

// Largest-remainder rounding of positive weights to integer frequencies
// summing exactly to t_in, each at least 1.
inline std::vector<uint32_t> quantize_frequencies(const std::vector<double>& w,
                                                  uint32_t t_in) {
    const int band = int(w.size());
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    std::vector<uint32_t> f(band);
    std::vector<double> rem(band);
    int64_t assigned = 0;
    for (int i = 0; i < band; ++i) {
        const double target = double(t_in) * w[size_t(i)] / wsum;
        const double fl = std::floor(target);
        f[size_t(i)] = uint32_t(std::max(1.0, fl));
        rem[size_t(i)] = target - fl;
        assigned += f[size_t(i)];
    }
    int64_t diff = int64_t(t_in) - assigned;
    std::vector<int> order(band);
    std::iota(order.begin(), order.end(), 0);
    if (diff > 0) {
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return rem[size_t(a)] > rem[size_t(b)]; });
        for (int i = 0; diff > 0; i = (i + 1) % band) {
            ++f[size_t(order[size_t(i)])];
            --diff;
        }
    } else if (diff < 0) {
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return rem[size_t(a)] < rem[size_t(b)]; });
        while (diff < 0) {
            bool moved = false;
            for (int i = 0; i < band && diff < 0; ++i) {
                if (f[size_t(order[size_t(i)])] > 1) {
                    --f[size_t(order[size_t(i)])];
                    ++diff;
                    moved = true;
                }
            }
            if (!moved) throw ContractError("symbol model: cannot balance table");
        }
    }
    return f;
}

}  // namespace detail

inline SymbolModel build_symbol_model(double mu, double sigma, int A) {
    const PmfInfo info = pmf_info(mu, sigma, A);

    int lo = A + 1, hi = -A - 1;
    if (info.has_interior()) {
        lo = info.lo;
        hi = info.hi;
    }
    if (info.tail_lo > kProbFloor) lo = -A;
    if (info.tail_hi > kProbFloor) hi = A;
    if (lo > hi) {  // cannot happen: total raw mass is 1
        lo = std::clamp(int(std::llround(mu)), -A, A);
        hi = lo;
    }

    SymbolModel m;
    m.A = A;
    m.band_lo = lo;
    m.band_hi = hi;

    const int band = hi - lo + 1;
    const uint32_t n_out = uint32_t(m.alphabet_size() - band);
    const uint32_t t_in = SymbolModel::kTotal - n_out;

    std::vector<double> w(band);
    for (int s = lo; s <= hi; ++s) {
        double raw = (s == -A)  ? info.tail_lo
                     : (s == A) ? info.tail_hi
                                : raw_interior_prob(s, mu, sigma);
        w[size_t(s - lo)] = std::max(raw, kProbFloor);
    }
    const std::vector<uint32_t> f = detail::quantize_frequencies(w, t_in);

    m.cum.resize(size_t(band) + 1);
    m.cum[0] = 0;
    for (int i = 0; i < band; ++i) m.cum[size_t(i) + 1] = m.cum[size_t(i)] + f[i];
    return m;
}

// ---------------------------------------------------------------------------
// Carryless 32-bit range coder, byte renormalization, 16-bit probability
// precision. Interval boundaries use exact 64-bit scaling so adjacent
// symbol intervals tile [0, range) with no dead zones. Integer-only state:
// identical payload bytes on any platform.

class RangeEncoder {
public:
    void encode(const SymbolModel& m, int symbol) {
        if (symbol < -m.A || symbol > m.A)
            throw Error("range encoder: symbol outside alphabet");
        const uint32_t lo_off = bound_(m.start(symbol));
        const uint32_t hi_off = bound_(m.start(symbol + 1));
        low_ += lo_off;
        if (low_ >> 32) {
            carry_();
            low_ &= 0xFFFFFFFFull;
        }
        range_ = hi_off - lo_off;
        while (range_ < kBottom) {
            buf_.push_back(uint8_t(low_ >> 24));
            low_ = (low_ << 8) & 0xFFFFFFFFull;
            range_ <<= 8;
        }
    }

    // Picks a value with 24 trailing zero bits inside [low, low+range) so a
    // single byte terminates the stream; the decoder zero-pads its tail reads.
    std::vector<uint8_t> finish() {
        uint64_t v = low_;
        if (v & 0xFFFFFFull) v = (v | 0xFFFFFFull) + 1;
        if (v >> 32) {
            carry_();
            v &= 0xFFFFFFFFull;
        }
        buf_.push_back(uint8_t(v >> 24));
        return std::move(buf_);
    }

    size_t bytes_pending() const { return buf_.size(); }

private:
    static constexpr uint32_t kBottom = 1u << 24;

    uint32_t bound_(uint32_t cum) const {
        return uint32_t((uint64_t(range_) * cum) >> 16);
    }

    void carry_() {
        for (size_t i = buf_.size(); i-- > 0;) {
            if (buf_[i] != 0xFF) {
                ++buf_[i];
                return;
            }
            buf_[i] = 0;
        }
        throw Error("range encoder: carry before first byte");
    }

    std::vector<uint8_t> buf_;
    uint64_t low_ = 0;
    uint32_t range_ = 0xFFFFFFFFu;
};

class RangeDecoder {
public:
    RangeDecoder(const uint8_t* data, size_t size) : data_(data), size_(size) {
        for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_();
    }

    int decode(const SymbolModel& m) {
        if (code_ >= range_) throw DecodeError("range decoder: corrupt stream");
        // last s with bound(start(s)) <= code
        int a = -m.A, b = m.A;
        while (a < b) {
            const int mid = a + (b - a + 1) / 2;
            if (bound_(m.start(mid)) <= code_) a = mid;
            else b = mid - 1;
        }
        const uint32_t lo_off = bound_(m.start(a));
        const uint32_t hi_off = bound_(m.start(a + 1));
        code_ -= lo_off;
        range_ = hi_off - lo_off;
        while (range_ < kBottom) {
            code_ = (code_ << 8) | next_();
            range_ <<= 8;
        }
        return a;
    }

    size_t consumed() const { return pos_; }

private:
    static constexpr uint32_t kBottom = 1u << 24;

    uint32_t bound_(uint32_t cum) const {
        return uint32_t((uint64_t(range_) * cum) >> 16);
    }

    uint8_t next_() {
        if (pos_ < size_) return data_[pos_++];
        if (++pads_ > 3) throw DecodeError("range decoder: truncated payload");
        return 0;
    }

    const uint8_t* data_;
    size_t size_, pos_ = 0;
    int pads_ = 0;
    uint32_t range_ = 0xFFFFFFFFu;
    uint32_t code_ = 0;
};

// ---------------------------------------------------------------------------
// Sequence coding under a causal per-element model provider. The provider
// yields the model for the next element and is fed each symbol only after
// that element has been coded, mirroring the decoder's information set.

class SymbolModelProvider {
public:
    virtual ~SymbolModelProvider() = default;
    virtual SymbolModel next() = 0;
    virtual void feed(int symbol) = 0;
};

inline std::vector<uint8_t> encode_sequence(const std::vector<int>& symbols,
                                            SymbolModelProvider& provider) {
    RangeEncoder enc;
    for (int s : symbols) {
        enc.encode(provider.next(), s);
        provider.feed(s);
    }
    return enc.finish();
}

inline std::vector<int> decode_sequence(const uint8_t* data, size_t size,
                                        size_t count,
                                        SymbolModelProvider& provider) {
    std::vector<int> out;
    out.reserve(count);
    if (count == 0) return out;
    RangeDecoder dec(data, size);
    for (size_t i = 0; i < count; ++i) {
        const int s = dec.decode(provider.next());
        provider.feed(s);
        out.push_back(s);
    }
    return out;
}

}  // namespace pcac

#endif  // PCAC_RANGE_CODER_HPP
