#include "dpnet/netpbm.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

namespace dpnet {

namespace {

class ByteReader {
public:
    explicit ByteReader(const std::string& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open '" + path + "' for reading");
        bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw IoError("parse error in '" + path_ + "' at byte " + std::to_string(pos_) + ": " +
                      what);
    }

    int peek() const { return pos_ < bytes_.size() ? static_cast<unsigned char>(bytes_[pos_]) : -1; }
    int get() {
        int c = peek();
        if (c >= 0) ++pos_;
        return c;
    }

    void skip_space_and_comments() {
        while (true) {
            int c = peek();
            if (c == '#') {
                while (c >= 0 && c != '\n') c = get();
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                get();
            } else {
                return;
            }
        }
    }

    int read_int(const char* what) {
        skip_space_and_comments();
        if (peek() < '0' || peek() > '9') fail(std::string("expected ") + what);
        long v = 0;
        while (peek() >= '0' && peek() <= '9') {
            v = v * 10 + (get() - '0');
            if (v > 1 << 24) fail(std::string(what) + " out of range");
        }
        return static_cast<int>(v);
    }

    const unsigned char* payload(std::size_t count) {
        if (pos_ + count > bytes_.size()) {
            fail("truncated payload, need " + std::to_string(count) + " bytes, have " +
                 std::to_string(bytes_.size() - pos_));
        }
        const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes_.data()) + pos_;
        pos_ += count;
        return p;
    }

private:
    std::string path_;
    std::string bytes_;
    std::size_t pos_ = 0;
};

void write_bytes(const std::string& path, const std::string& header,
                 const std::vector<unsigned char>& payload) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << header;
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

unsigned char quantize(double v) {
    double q = std::lround(std::min(std::max(v, 0.0), 1.0) * 255.0);
    return static_cast<unsigned char>(q);
}

}  // namespace

Tensor4 read_image(const std::string& path) {
    ByteReader r(path);
    int m0 = r.get(), m1 = r.get();
    if (m0 != 'P' || (m1 != '5' && m1 != '6')) r.fail("expected P5 or P6 magic");
    const int channels = m1 == '5' ? 1 : 3;
    const int w = r.read_int("width");
    const int h = r.read_int("height");
    const int maxval = r.read_int("maxval");
    if (w < 1 || h < 1) r.fail("image dims must be >= 1");
    if (maxval != 255) r.fail("only maxval 255 supported, got " + std::to_string(maxval));
    int c = r.get();
    if (c != ' ' && c != '\t' && c != '\r' && c != '\n') r.fail("expected whitespace after maxval");

    const std::size_t count = static_cast<std::size_t>(w) * h * channels;
    const unsigned char* p = r.payload(count);
    Tensor4 t(Dims4{1, channels, h, w});
    // Payload is pixel-interleaved; the tensor is planar.
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < channels; ++ch) {
                t.at(0, ch, y, x) =
                    p[(static_cast<std::size_t>(y) * w + x) * channels + ch] / 255.0;
            }
    return t;
}

void write_pgm(const std::string& path, const Tensor4& t) {
    const Dims4 d = t.dims();
    if (d.n != 1 || d.c != 1) {
        throw ShapeError("write_pgm expects (1,1,h,w), got " + d.str());
    }
    std::vector<unsigned char> payload(static_cast<std::size_t>(d.h) * d.w);
    for (std::int64_t i = 0; i < t.size(); ++i) payload[static_cast<std::size_t>(i)] = quantize(t.flat(i));
    write_bytes(path, "P5\n" + std::to_string(d.w) + " " + std::to_string(d.h) + "\n255\n",
                payload);
}

void write_ppm(const std::string& path, const Tensor4& t) {
    const Dims4 d = t.dims();
    if (d.n != 1 || d.c != 3) {
        throw ShapeError("write_ppm expects (1,3,h,w), got " + d.str());
    }
    std::vector<unsigned char> payload(static_cast<std::size_t>(d.h) * d.w * 3);
    std::size_t i = 0;
    for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x)
            for (int ch = 0; ch < 3; ++ch) payload[i++] = quantize(t.at(0, ch, y, x));
    write_bytes(path, "P6\n" + std::to_string(d.w) + " " + std::to_string(d.h) + "\n255\n",
                payload);
}

}  // namespace dpnet
