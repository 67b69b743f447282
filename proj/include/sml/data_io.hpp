#pragma once

#include <array>
#include <string>
#include <vector>

#include "sml/tensor.hpp"

namespace sml {

// Binary tensor file: magic "SMT1", u32 version (=1), u32 ndim, u64 dims,
// f32 little-endian row-major payload. Round-trips are bit-exact.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Checkpoint: magic "SMCK", u32 record count, then per record
// (u16 name length, name bytes, tensor file body). Record order follows the
// registry enumeration; loading requires the same names in the same order.
void save_checkpoint(const std::string& path, const ParamRegistry& reg);
void load_checkpoint(const std::string& path, ParamRegistry& reg);

// Image sample: P6 image scaled to [0,1] floats as (1,3,H,W); P5 label map
// with class ids and 255 = ignore.
struct SegSample {
    Tensor image;
    LabelMap label;
};

void write_ppm(const std::string& path, const Tensor& image01);
Tensor read_ppm(const std::string& path);
void write_pgm(const std::string& path, const LabelMap& labels);
LabelMap read_pgm(const std::string& path);

SegSample read_sample(const std::string& image_path, const std::string& label_path);
void write_sample(const std::string& image_path, const std::string& label_path,
                  const SegSample& s);

struct DatasetStats {
    std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
    std::array<float, 3> stddev{0.25f, 0.25f, 0.25f};
};

struct Manifest {
    struct Entry {
        std::string image, label, split;  // split is "train" or "val"
    };
    std::string dir;
    std::vector<Entry> entries;
    DatasetStats stats;

    std::vector<Entry> split(const std::string& name) const;
};

// Synthetic multi-scale shape dataset: rectangles, ellipses and 1-3 px bars
// over a textured background; class = shape kind, background = 0. Sizes are
// log-uniform in [2, h/2]. Deterministic per seed. Writes manifest.tsv
// (image<TAB>label<TAB>split) and stats.txt with per-channel mean/std of the
// train split.
Manifest synth_dataset(int n, int h, int w, int num_classes, uint64_t seed,
                       const std::string& out_dir);

Manifest load_manifest(const std::string& manifest_path);

// (image - mean) / std per channel
Tensor normalize_image(const Tensor& image01, const DatasetStats& stats);

// Loads a manifest split into memory with normalized images.
std::vector<SegSample> load_split(const Manifest& m, const std::string& split);

}  // namespace sml
