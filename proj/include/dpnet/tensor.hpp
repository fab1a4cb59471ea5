#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpnet/errors.hpp"
#include "dpnet/rng.hpp"

namespace dpnet {

struct Dims4 {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    bool operator==(const Dims4&) const = default;

    std::int64_t count() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    std::string str() const;
};

// Dense rank-4 array (batch, channel, rows, cols) of 64-bit floats, row-major.
// The universal value type of the framework. A default-constructed Tensor4 is
// the empty sentinel (used for "no bias"); every real tensor has all dims >= 1.
class Tensor4 {
public:
    Tensor4() = default;
    explicit Tensor4(Dims4 d, double fill = 0.0);
    Tensor4(Dims4 d, std::vector<double> data);

    static Tensor4 zeros(Dims4 d) { return Tensor4(d); }
    static Tensor4 full(Dims4 d, double v) { return Tensor4(d, v); }

    bool empty() const { return data_.empty(); }
    const Dims4& dims() const { return dims_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    std::int64_t offset(int n, int c, int y, int x) const {
        return ((static_cast<std::int64_t>(n) * dims_.c + c) * dims_.h + y) * dims_.w + x;
    }
    double& at(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
    double at(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

    double& flat(std::int64_t i) { return data_[i]; }
    double flat(std::int64_t i) const { return data_[i]; }

    void fill(double v);
    bool all_finite() const;
    double max_abs() const;
    double sum() const;

    // Uniform init in [-bound, bound], drawing in flat index order.
    void init_uniform(Rng& rng, double bound);

    bool operator==(const Tensor4& o) const { return dims_ == o.dims_ && data_ == o.data_; }

private:
    Dims4 dims_{};
    std::vector<double> data_;
};

// Largest elementwise |a - b|; shapes must match.
double max_abs_diff(const Tensor4& a, const Tensor4& b);

void require_same_dims(const Tensor4& a, const Tensor4& b, const char* what);

}  // namespace dpnet
