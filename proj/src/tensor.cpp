#include "dpnet/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dpnet {

std::string Dims4::str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
}

Tensor4::Tensor4(Dims4 d, double fill) : dims_(d) {
    if (d.n < 1 || d.c < 1 || d.h < 1 || d.w < 1) {
        throw ShapeError("Tensor4 dims must all be >= 1, got " + d.str());
    }
    data_.assign(static_cast<std::size_t>(d.count()), fill);
}

Tensor4::Tensor4(Dims4 d, std::vector<double> data) : dims_(d), data_(std::move(data)) {
    if (d.n < 1 || d.c < 1 || d.h < 1 || d.w < 1) {
        throw ShapeError("Tensor4 dims must all be >= 1, got " + d.str());
    }
    if (static_cast<std::int64_t>(data_.size()) != d.count()) {
        throw ShapeError("Tensor4 data length " + std::to_string(data_.size()) +
                         " does not match dims " + d.str());
    }
}

void Tensor4::fill(double v) {
    for (auto& x : data_) x = v;
}

bool Tensor4::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

double Tensor4::max_abs() const {
    double m = 0.0;
    for (double x : data_) m = std::max(m, std::abs(x));
    return m;
}

double Tensor4::sum() const {
    double s = 0.0;
    for (double x : data_) s += x;
    return s;
}

void Tensor4::init_uniform(Rng& rng, double bound) {
    for (auto& x : data_) x = rng.uniform(-bound, bound);
}

double max_abs_diff(const Tensor4& a, const Tensor4& b) {
    require_same_dims(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.flat(i) - b.flat(i)));
    }
    return m;
}

void require_same_dims(const Tensor4& a, const Tensor4& b, const char* what) {
    if (!(a.dims() == b.dims())) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.dims().str() + " vs " +
                         b.dims().str());
    }
}

}  // namespace dpnet
