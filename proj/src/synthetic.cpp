#include "dpnet/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dpnet/netpbm.hpp"
#include "dpnet/ops.hpp"

namespace dpnet {

namespace fs = std::filesystem;

const char* size_class_name(SizeClass c) {
    switch (c) {
        case SizeClass::kSmall: return "small";
        case SizeClass::kMiddle: return "middle";
        case SizeClass::kLarge: return "large";
    }
    return "small";
}

SizeClass size_class_from_name(const std::string& name) {
    if (name == "small") return SizeClass::kSmall;
    if (name == "middle") return SizeClass::kMiddle;
    if (name == "large") return SizeClass::kLarge;
    throw ValidationError("unknown size class '" + name + "'");
}

SizeClassResult object_size_class(const Tensor4& mask) {
    const Dims4 d = mask.dims();
    if (d.n != 1 || d.c != 1) {
        throw ShapeError("object_size_class expects (1,1,h,w), got " + d.str());
    }
    std::int64_t fg = 0;
    for (std::int64_t i = 0; i < mask.size(); ++i) {
        const double v = mask.flat(i);
        if (v != 0.0 && v != 1.0) {
            throw ValidationError("object_size_class: mask must be binary");
        }
        fg += v != 0.0;
    }
    SizeClassResult res;
    res.s = static_cast<double>(fg) / static_cast<double>(mask.size());
    if (res.s < 0.1) {
        res.cls = SizeClass::kSmall;
    } else if (res.s <= 0.25) {
        res.cls = SizeClass::kMiddle;
    } else {
        res.cls = SizeClass::kLarge;
    }
    return res;
}

void DatasetSpec::validate() const {
    if (count < 1) throw ConfigError("DatasetSpec: count must be >= 1");
    if (image_hw < 8) throw ConfigError("DatasetSpec: image_hw must be >= 8");
    double total = size_mix[0] + size_mix[1] + size_mix[2];
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("DatasetSpec: size_mix fractions must sum to 1");
    }
}

std::vector<SizeClass> class_assignment(const DatasetSpec& spec) {
    spec.validate();
    // Largest-remainder apportionment, then contiguous index ranges per class.
    std::array<int, 3> quota{};
    std::array<double, 3> remainder{};
    int assigned = 0;
    for (int c = 0; c < 3; ++c) {
        double exact = spec.size_mix[static_cast<std::size_t>(c)] * spec.count;
        quota[static_cast<std::size_t>(c)] = static_cast<int>(std::floor(exact + 1e-12));
        remainder[static_cast<std::size_t>(c)] = exact - quota[static_cast<std::size_t>(c)];
        assigned += quota[static_cast<std::size_t>(c)];
    }
    while (assigned < spec.count) {
        int best = 0;
        for (int c = 1; c < 3; ++c) {
            if (remainder[static_cast<std::size_t>(c)] > remainder[static_cast<std::size_t>(best)]) {
                best = c;
            }
        }
        ++quota[static_cast<std::size_t>(best)];
        remainder[static_cast<std::size_t>(best)] = -1.0;
        ++assigned;
    }
    std::vector<SizeClass> classes;
    classes.reserve(static_cast<std::size_t>(spec.count));
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < quota[static_cast<std::size_t>(c)]; ++i) {
            classes.push_back(static_cast<SizeClass>(c));
        }
    }
    return classes;
}

namespace {

// Coarse-grid noise bilinearly upsampled to full resolution.
Tensor4 low_freq_noise(Rng& rng, int hw, double amplitude, int grid = 5) {
    Tensor4 coarse(Dims4{1, 1, grid, grid});
    for (std::int64_t i = 0; i < coarse.size(); ++i) {
        coarse.flat(i) = rng.uniform(-amplitude, amplitude);
    }
    return resize_bilinear_forward(coarse, hw, hw);
}

Tensor4 rasterize_shape(Rng& rng, int hw, double target_s, bool ellipse) {
    const double cy = rng.uniform(0.3, 0.7) * hw;
    const double cx = rng.uniform(0.3, 0.7) * hw;
    const double theta = rng.uniform(0.0, 3.14159265358979323846);
    const double aspect = rng.uniform(0.5, 2.0);
    const double area = target_s * hw * hw;
    // Half extents: ellipse area = pi*a*b, rectangle area = 4*a*b.
    double ab = ellipse ? area / 3.14159265358979323846 : area / 4.0;
    double a = std::sqrt(ab * aspect);
    double b = ab / a;
    const double cap = 0.48 * hw;
    a = std::min(a, cap);
    b = std::min(b, cap);

    Tensor4 mask(Dims4{1, 1, hw, hw});
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < hw; ++y) {
        for (int x = 0; x < hw; ++x) {
            const double dy = y + 0.5 - cy;
            const double dx = x + 0.5 - cx;
            const double u = ct * dx + st * dy;
            const double v = -st * dx + ct * dy;
            bool inside;
            if (ellipse) {
                inside = (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
            } else {
                inside = std::abs(u) <= a && std::abs(v) <= b;
            }
            mask.at(0, 0, y, x) = inside ? 1.0 : 0.0;
        }
    }
    return mask;
}

std::pair<double, double> class_range(SizeClass c) {
    switch (c) {
        case SizeClass::kSmall: return {0.02, 0.095};
        case SizeClass::kMiddle: return {0.105, 0.245};
        case SizeClass::kLarge: return {0.26, 0.5};
    }
    return {0.02, 0.095};
}

}  // namespace

Sample generate_sample(const DatasetSpec& spec, int index) {
    spec.validate();
    if (index < 0 || index >= spec.count) {
        throw ConfigError("generate_sample: index out of range");
    }
    const SizeClass target = class_assignment(spec)[static_cast<std::size_t>(index)];
    Rng rng = Rng::keyed(spec.master_seed, static_cast<std::uint64_t>(index));
    const int hw = spec.image_hw;

    Sample sample;
    sample.seed = spec.master_seed;
    const auto [s_lo, s_hi] = class_range(target);
    bool accepted = false;
    for (int attempt = 0; attempt < 200 && !accepted; ++attempt) {
        const double target_s = rng.uniform(s_lo, s_hi);
        const bool ellipse = rng.bernoulli(0.5);
        Tensor4 mask = rasterize_shape(rng, hw, target_s, ellipse);
        SizeClassResult cls = object_size_class(mask);
        if (cls.cls == target && cls.s > 0.0) {
            sample.mask = std::move(mask);
            sample.size_class = cls.cls;
            accepted = true;
        }
    }
    if (!accepted) {
        throw ValidationError("generate_sample: could not hit size class '" +
                              std::string(size_class_name(target)) + "' for " +
                              std::to_string(hw) + "x" + std::to_string(hw) +
                              " canvas after bounded retries");
    }

    // Background and foreground colors with clearly distinct statistics.
    std::array<double, 3> bg{}, fg{};
    for (int c = 0; c < 3; ++c) bg[static_cast<std::size_t>(c)] = rng.uniform(0.1, 0.9);
    while (true) {
        double dist = 0.0;
        for (int c = 0; c < 3; ++c) {
            fg[static_cast<std::size_t>(c)] = rng.uniform(0.1, 0.9);
            dist = std::max(dist, std::abs(fg[static_cast<std::size_t>(c)] -
                                           bg[static_cast<std::size_t>(c)]));
        }
        if (dist >= 0.25) break;
    }

    sample.image = Tensor4(Dims4{1, 3, hw, hw});
    for (int c = 0; c < 3; ++c) {
        Tensor4 bg_noise = low_freq_noise(rng, hw, 0.15);
        Tensor4 fg_noise = low_freq_noise(rng, hw, 0.10);
        for (int y = 0; y < hw; ++y)
            for (int x = 0; x < hw; ++x) {
                const bool inside = sample.mask.at(0, 0, y, x) != 0.0;
                double v = inside ? fg[static_cast<std::size_t>(c)] + fg_noise.at(0, 0, y, x)
                                  : bg[static_cast<std::size_t>(c)] + bg_noise.at(0, 0, y, x);
                sample.image.at(0, c, y, x) = std::clamp(v, 0.0, 1.0);
            }
    }
    return sample;
}

std::vector<Sample> generate_synthetic(const DatasetSpec& spec) {
    spec.validate();
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(spec.count));
    for (int i = 0; i < spec.count; ++i) out.push_back(generate_sample(spec, i));
    return out;
}

AugmentParams draw_augment_params(Rng& rng) {
    AugmentParams p;
    p.flip = rng.bernoulli(0.5);
    const std::array<double, 3> scales{0.75, 1.0, 1.25};
    p.scale = scales[rng.uniform_int(3)];
    p.crop_frac = rng.uniform(0.875, 1.0);
    p.crop_y = rng.uniform();
    p.crop_x = rng.uniform();
    return p;
}

namespace {

Tensor4 flip_horizontal(const Tensor4& t) {
    const Dims4 d = t.dims();
    Tensor4 out(d);
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < d.c; ++c)
            for (int y = 0; y < d.h; ++y)
                for (int x = 0; x < d.w; ++x) {
                    out.at(n, c, y, x) = t.at(n, c, y, d.w - 1 - x);
                }
    return out;
}

Tensor4 crop(const Tensor4& t, int y0, int x0, int ch, int cw) {
    const Dims4 d = t.dims();
    Tensor4 out(Dims4{d.n, d.c, ch, cw});
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < d.c; ++c)
            for (int y = 0; y < ch; ++y)
                for (int x = 0; x < cw; ++x) {
                    out.at(n, c, y, x) = t.at(n, c, y0 + y, x0 + x);
                }
    return out;
}

Tensor4 binarize(const Tensor4& t) {
    Tensor4 out = t;
    for (std::int64_t i = 0; i < out.size(); ++i) out.flat(i) = out.flat(i) >= 0.5 ? 1.0 : 0.0;
    return out;
}

}  // namespace

Sample augment(const Sample& sample, const AugmentParams& params) {
    const Dims4 d = sample.image.dims();
    Tensor4 image = sample.image;
    Tensor4 mask = sample.mask;
    if (params.flip) {
        image = flip_horizontal(image);
        mask = flip_horizontal(mask);
    }
    const int sh = std::max(8, static_cast<int>(std::lround(d.h * params.scale)));
    const int sw = std::max(8, static_cast<int>(std::lround(d.w * params.scale)));
    if (sh != d.h || sw != d.w) {
        image = resize_bilinear_forward(image, sh, sw);
        mask = resize_bilinear_forward(mask, sh, sw);
    }
    const int ch = std::max(8, static_cast<int>(std::lround(sh * params.crop_frac)));
    const int cw = std::max(8, static_cast<int>(std::lround(sw * params.crop_frac)));
    if (ch != sh || cw != sw) {
        const int y0 = static_cast<int>(std::lround(params.crop_y * (sh - ch)));
        const int x0 = static_cast<int>(std::lround(params.crop_x * (sw - cw)));
        image = crop(image, y0, x0, ch, cw);
        mask = crop(mask, y0, x0, ch, cw);
    }
    if (image.dims().h != d.h || image.dims().w != d.w) {
        image = resize_bilinear_forward(image, d.h, d.w);
        mask = resize_bilinear_forward(mask, d.h, d.w);
    }
    Sample out;
    out.image = std::move(image);
    out.mask = binarize(mask);
    out.size_class = object_size_class(out.mask).cls;
    out.seed = sample.seed;
    return out;
}

Sample augment(const Sample& sample, std::uint64_t seed) {
    Rng rng = Rng::keyed(seed, 0x617567ULL);
    return augment(sample, draw_augment_params(rng));
}

std::string image_path(const std::string& root, int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d", index);
    return root + "/img/" + buf + ".ppm";
}

std::string mask_path(const std::string& root, int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d", index);
    return root + "/gt/" + buf + ".pgm";
}

void write_dataset(const std::string& root, const std::vector<Sample>& samples) {
    fs::create_directories(fs::path(root) / "img");
    fs::create_directories(fs::path(root) / "gt");
    std::ofstream manifest(fs::path(root) / "manifest.csv", std::ios::trunc);
    if (!manifest) throw IoError("cannot write manifest under '" + root + "'");
    manifest << "index,size_class,S\n";
    char line[96];
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const int idx = static_cast<int>(i);
        write_ppm(image_path(root, idx), samples[i].image);
        write_pgm(mask_path(root, idx), samples[i].mask);
        SizeClassResult cls = object_size_class(samples[i].mask);
        std::snprintf(line, sizeof(line), "%d,%s,%.9f\n", idx, size_class_name(cls.cls), cls.s);
        manifest << line;
    }
}

std::vector<ManifestEntry> read_manifest(const std::string& root) {
    std::ifstream in(fs::path(root) / "manifest.csv");
    if (!in) throw IoError("cannot open manifest under '" + root + "'");
    std::vector<ManifestEntry> entries;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string idx, cls, s;
        if (!std::getline(is, idx, ',') || !std::getline(is, cls, ',') || !std::getline(is, s)) {
            throw IoError("malformed manifest row '" + line + "' in '" + root + "'");
        }
        ManifestEntry e;
        e.index = std::stoi(idx);
        e.size_class = size_class_from_name(cls);
        e.s = std::stod(s);
        entries.push_back(e);
    }
    return entries;
}

Sample load_sample(const std::string& root, int index) {
    Sample s;
    s.image = read_image(image_path(root, index));
    s.mask = binarize(read_image(mask_path(root, index)));
    s.size_class = object_size_class(s.mask).cls;
    return s;
}

}  // namespace dpnet
