#pragma once

#include <array>
#include <string>
#include <vector>

#include "dpnet/rng.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

enum class SizeClass { kSmall, kMiddle, kLarge };

const char* size_class_name(SizeClass c);
SizeClass size_class_from_name(const std::string& name);

struct SizeClassResult {
    SizeClass cls = SizeClass::kSmall;
    double s = 0.0;  // foreground fraction F/I
};

// S = foreground / total pixels; small S < 0.1, middle 0.1 <= S <= 0.25
// (boundaries inclusive), large S > 0.25. Empty mask -> S = 0, small.
SizeClassResult object_size_class(const Tensor4& mask);

struct Sample {
    Tensor4 image;  // (1,3,h,w) in [0,1]
    Tensor4 mask;   // (1,1,h,w) binary
    SizeClass size_class = SizeClass::kSmall;
    std::uint64_t seed = 0;
};

struct DatasetSpec {
    int count = 0;
    int image_hw = 64;
    std::array<double, 3> size_mix{0.341, 0.434, 0.225};  // small, middle, large
    std::uint64_t master_seed = 1;

    void validate() const;
};

// Deterministic largest-remainder quota assignment of size classes by index.
std::vector<SizeClass> class_assignment(const DatasetSpec& spec);

// One textured-background + one-shape sample, fully reproducible from
// (master_seed, index); the shape is rejection-sampled until its rasterized
// mask lands in the requested size class.
Sample generate_sample(const DatasetSpec& spec, int index);
std::vector<Sample> generate_synthetic(const DatasetSpec& spec);

struct AugmentParams {
    bool flip = false;
    double scale = 1.0;      // from {0.75, 1.0, 1.25}
    double crop_frac = 1.0;  // in [0.875, 1.0]
    double crop_y = 0.0;     // offset fractions of the slack, in [0,1]
    double crop_x = 0.0;
};

AugmentParams draw_augment_params(Rng& rng);

// Horizontal flip, scale jitter, and random crop resized back to the original
// resolution; the mask gets the identical transform and is re-binarized at
// 0.5. The size class is recomputed from the transformed mask.
Sample augment(const Sample& sample, const AugmentParams& params);
Sample augment(const Sample& sample, std::uint64_t seed);

// Dataset directory layout: <root>/img/NNNNN.ppm, <root>/gt/NNNNN.pgm and
// manifest.csv with rows index,size_class,S.
struct ManifestEntry {
    int index = 0;
    SizeClass size_class = SizeClass::kSmall;
    double s = 0.0;
};

void write_dataset(const std::string& root, const std::vector<Sample>& samples);
std::vector<ManifestEntry> read_manifest(const std::string& root);
Sample load_sample(const std::string& root, int index);
std::string image_path(const std::string& root, int index);
std::string mask_path(const std::string& root, int index);

}  // namespace dpnet
