#include "sml/data_io.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace sml {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; this build targets LE hosts");

namespace {

namespace fs = std::filesystem;

constexpr char kTensorMagic[4] = {'S', 'M', 'T', '1'};
constexpr char kCheckpointMagic[4] = {'S', 'M', 'C', 'K'};
constexpr uint32_t kTensorVersion = 1;

void write_bytes(std::ostream& out, const void* p, size_t len) {
    out.write(static_cast<const char*>(p), std::streamsize(len));
}

void write_u16(std::ostream& out, uint16_t v) { write_bytes(out, &v, 2); }
void write_u32(std::ostream& out, uint32_t v) { write_bytes(out, &v, 4); }
void write_u64(std::ostream& out, uint64_t v) { write_bytes(out, &v, 8); }

void read_bytes(std::istream& in, void* p, size_t len, const char* what) {
    in.read(static_cast<char*>(p), std::streamsize(len));
    if (size_t(in.gcount()) != len)
        throw DataError(std::string("truncated file: expected ") + std::to_string(len) +
                        " bytes for " + what + ", got " + std::to_string(in.gcount()));
}

uint16_t read_u16(std::istream& in, const char* what) {
    uint16_t v;
    read_bytes(in, &v, 2, what);
    return v;
}
uint32_t read_u32(std::istream& in, const char* what) {
    uint32_t v;
    read_bytes(in, &v, 4, what);
    return v;
}
uint64_t read_u64(std::istream& in, const char* what) {
    uint64_t v;
    read_bytes(in, &v, 8, what);
    return v;
}

void write_tensor_body(std::ostream& out, const Tensor& t) {
    write_bytes(out, kTensorMagic, 4);
    write_u32(out, kTensorVersion);
    write_u32(out, 4);
    const Dims4& d = t.dims();
    write_u64(out, uint64_t(d.n));
    write_u64(out, uint64_t(d.c));
    write_u64(out, uint64_t(d.h));
    write_u64(out, uint64_t(d.w));
    write_bytes(out, t.ptr(), size_t(t.numel()) * 4);
}

Tensor read_tensor_body(std::istream& in) {
    char magic[4];
    read_bytes(in, magic, 4, "magic");
    if (std::memcmp(magic, kTensorMagic, 4) != 0)
        throw DataError("bad tensor magic, not an SMT1 file");
    const uint32_t version = read_u32(in, "version");
    if (version != kTensorVersion)
        throw DataError("unknown tensor file version " + std::to_string(version));
    const uint32_t ndim = read_u32(in, "ndim");
    if (ndim != 4) throw DataError("unsupported tensor rank " + std::to_string(ndim));
    uint64_t dims[4];
    uint64_t count = 1;
    for (auto& dv : dims) {
        dv = read_u64(in, "dims");
        if (dv == 0) throw DataError("tensor file has a zero dim");
        if (dv > (1ull << 30)) throw DataError("tensor dim overflow");
        count *= dv;
        if (count > (1ull << 31)) throw DataError("tensor element count overflow");
    }
    const size_t elems = size_t(count);
    std::vector<float> data(elems);
    read_bytes(in, data.data(), elems * 4, "payload");
    return Tensor::from_data({int(dims[0]), int(dims[1]), int(dims[2]), int(dims[3])},
                             std::move(data));
}

void atomic_write(const std::string& path, const std::function<void(std::ostream&)>& fn) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp);
        fn(out);
        if (!out) throw DataError("write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

// netpbm token reader: whitespace-separated, '#' starts a comment to EOL
std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(char(ch));
    }
    if (tok.empty()) throw DataError("unexpected end of netpbm header");
    return tok;
}

int parse_dim(const std::string& tok) {
    try {
        const int v = std::stoi(tok);
        if (v < 1 || v > (1 << 20)) throw DataError("netpbm dim out of range: " + tok);
        return v;
    } catch (const DataError&) {
        throw;
    } catch (...) {
        throw DataError("malformed netpbm header token '" + tok + "'");
    }
}

uint8_t quantize(float v) {
    const long q = std::lround(double(v) * 255.0);
    return uint8_t(std::min(255l, std::max(0l, q)));
}

// hue in [0,1)
void hsv_to_rgb(float h, float s, float v, float rgb[3]) {
    const float hh = (h - std::floor(h)) * 6.0f;
    const int i = int(hh) % 6;
    const float f = hh - std::floor(hh);
    const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i) {
        case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
        default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
    }
}

std::string index_name(const char* stem, int i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%05d.%s", stem, i, ext);
    return buf;
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
    if (!t.defined()) throw ConfigError("save_tensor: undefined tensor");
    atomic_write(path, [&](std::ostream& out) { write_tensor_body(out, t); });
}

Tensor load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return read_tensor_body(in);
}

void save_checkpoint(const std::string& path, const ParamRegistry& reg) {
    atomic_write(path, [&](std::ostream& out) {
        write_bytes(out, kCheckpointMagic, 4);
        write_u32(out, uint32_t(reg.entries().size()));
        for (const auto& e : reg.entries()) {
            if (e.name.size() > 0xffff) throw ConfigError("checkpoint name too long");
            write_u16(out, uint16_t(e.name.size()));
            write_bytes(out, e.name.data(), e.name.size());
            write_tensor_body(out, e.tensor);
        }
    });
}

void load_checkpoint(const std::string& path, ParamRegistry& reg) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    char magic[4];
    read_bytes(in, magic, 4, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw DataError("bad checkpoint magic, not an SMCK file");
    const uint32_t count = read_u32(in, "record count");
    if (count != reg.entries().size())
        throw DataError("checkpoint holds " + std::to_string(count) + " records, model expects " +
                        std::to_string(reg.entries().size()));
    for (const auto& e : reg.entries()) {
        const uint16_t len = read_u16(in, "name length");
        std::string name(len, '\0');
        read_bytes(in, name.data(), len, "name");
        if (name != e.name)
            throw DataError("checkpoint record '" + name + "' does not match model parameter '" +
                            e.name + "'");
        Tensor t = read_tensor_body(in);
        if (t.dims() != e.tensor.dims())
            throw DataError("checkpoint record '" + name + "' has dims " + t.dims().str() +
                            ", model expects " + e.tensor.dims().str());
        Tensor dst = e.tensor;
        std::copy(t.data().begin(), t.data().end(), dst.data().begin());
    }
}

void write_ppm(const std::string& path, const Tensor& image01) {
    const Dims4 d = image01.dims();
    if (d.n != 1 || d.c != 3)
        throw ConfigError("write_ppm: image must be (1,3,H,W), got " + d.str());
    atomic_write(path, [&](std::ostream& out) {
        out << "P6\n" << d.w << " " << d.h << "\n255\n";
        std::vector<uint8_t> row(size_t(d.w) * 3);
        for (int y = 0; y < d.h; ++y) {
            for (int x = 0; x < d.w; ++x)
                for (int c = 0; c < 3; ++c)
                    row[size_t(x) * 3 + c] = quantize(image01.at(0, c, y, x));
            write_bytes(out, row.data(), row.size());
        }
    });
}

Tensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    if (next_token(in) != "P6") throw DataError(path + ": not a P6 image");
    const int w = parse_dim(next_token(in));
    const int h = parse_dim(next_token(in));
    const int maxval = parse_dim(next_token(in));
    if (maxval != 255) throw DataError(path + ": maxval must be 255");
    std::vector<uint8_t> raw(size_t(w) * h * 3);
    read_bytes(in, raw.data(), raw.size(), "pixel data");
    Tensor img = Tensor::zeros({1, 3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(0, c, y, x) = float(raw[(size_t(y) * w + x) * 3 + c]) / 255.0f;
    return img;
}

void write_pgm(const std::string& path, const LabelMap& labels) {
    if (labels.n != 1) throw ConfigError("write_pgm: label map must have n == 1");
    atomic_write(path, [&](std::ostream& out) {
        out << "P5\n" << labels.w << " " << labels.h << "\n255\n";
        std::vector<uint8_t> row(size_t(labels.w));
        for (int y = 0; y < labels.h; ++y) {
            for (int x = 0; x < labels.w; ++x) {
                const int32_t v = labels.at(0, y, x);
                if (v < 0 || v > 255)
                    throw DataError("write_pgm: label " + std::to_string(v) + " not a byte");
                row[size_t(x)] = uint8_t(v);
            }
            write_bytes(out, row.data(), row.size());
        }
    });
}

LabelMap read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    if (next_token(in) != "P5") throw DataError(path + ": not a P5 image");
    const int w = parse_dim(next_token(in));
    const int h = parse_dim(next_token(in));
    const int maxval = parse_dim(next_token(in));
    if (maxval != 255) throw DataError(path + ": maxval must be 255");
    std::vector<uint8_t> raw(size_t(w) * h);
    read_bytes(in, raw.data(), raw.size(), "pixel data");
    LabelMap labels(1, h, w);
    for (size_t i = 0; i < raw.size(); ++i) labels.data[i] = raw[i];
    return labels;
}

SegSample read_sample(const std::string& image_path, const std::string& label_path) {
    SegSample s;
    s.image = read_ppm(image_path);
    s.label = read_pgm(label_path);
    if (s.image.dims().h != s.label.h || s.image.dims().w != s.label.w)
        throw DataError("sample dims mismatch: image " + s.image.dims().str() + " vs label " +
                        std::to_string(s.label.h) + "x" + std::to_string(s.label.w));
    return s;
}

void write_sample(const std::string& image_path, const std::string& label_path,
                  const SegSample& s) {
    if (s.image.dims().h != s.label.h || s.image.dims().w != s.label.w)
        throw ConfigError("write_sample: image/label dims mismatch");
    write_ppm(image_path, s.image);
    write_pgm(label_path, s.label);
}

std::vector<Manifest::Entry> Manifest::split(const std::string& name) const {
    std::vector<Entry> out;
    for (const auto& e : entries)
        if (e.split == name) out.push_back(e);
    return out;
}

Manifest synth_dataset(int n, int h, int w, int num_classes, uint64_t seed,
                       const std::string& out_dir) {
    if (num_classes < 2 || num_classes > 254)
        throw ConfigError("synth_dataset: classes must be in [2, 254]");
    if (n < 2) throw ConfigError("synth_dataset: need at least 2 samples");
    if (h < 16 || w < 16 || h % 16 != 0 || w % 16 != 0)
        throw ConfigError("synth_dataset: dims must be multiples of 16, got " +
                          std::to_string(h) + "x" + std::to_string(w));

    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "labels");

    Rng rng(seed);
    Manifest m;
    m.dir = out_dir;
    const int val_count = std::max(1, n / 5);
    const int train_count = n - val_count;

    double sum[3] = {0, 0, 0}, sumsq[3] = {0, 0, 0};
    int64_t train_px = 0;

    for (int i = 0; i < n; ++i) {
        Tensor img = Tensor::zeros({1, 3, h, w});
        LabelMap lab(1, h, w, 0);

        // textured background: gray base + linear ramp + pixel noise
        const float base = rng.uniform(0.25f, 0.75f);
        float chan_off[3];
        for (auto& c : chan_off) c = rng.uniform(-0.05f, 0.05f);
        const float gx = rng.uniform(-0.15f, 0.15f), gy = rng.uniform(-0.15f, 0.15f);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const float ramp = gx * float(x) / float(w) + gy * float(y) / float(h);
                const float noise = rng.uniform(-0.08f, 0.08f);
                for (int c = 0; c < 3; ++c)
                    img.at(0, c, y, x) = base + chan_off[c] + ramp + noise +
                                         rng.uniform(-0.03f, 0.03f);
            }

        const int shapes = rng.uniform_int(3, 6);
        for (int s = 0; s < shapes; ++s) {
            const int cls = rng.uniform_int(1, num_classes - 1);
            const int kind = (cls - 1) % 3;
            const float hue = float(cls - 1) / float(num_classes - 1) + rng.uniform(-0.05f, 0.05f);
            float rgb[3];
            hsv_to_rgb(hue, rng.uniform(0.55f, 0.95f), rng.uniform(0.5f, 0.95f), rgb);
            const int cx = rng.uniform_int(0, w - 1), cy = rng.uniform_int(0, h - 1);

            auto paint = [&](int x0, int x1, int y0, int y1, auto&& inside) {
                x0 = std::max(0, x0);
                y0 = std::max(0, y0);
                x1 = std::min(w - 1, x1);
                y1 = std::min(h - 1, y1);
                for (int y = y0; y <= y1; ++y)
                    for (int x = x0; x <= x1; ++x) {
                        if (!inside(x, y)) continue;
                        const float jitter = rng.uniform(-0.03f, 0.03f);
                        for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = rgb[c] + jitter;
                        lab.at(0, y, x) = cls;
                    }
            };

            if (kind == 0) {  // rectangle
                const int sx = int(std::lround(rng.log_uniform(2.0, h / 2.0)));
                const int sy = int(std::lround(rng.log_uniform(2.0, h / 2.0)));
                paint(cx - sx / 2, cx - sx / 2 + sx - 1, cy - sy / 2, cy - sy / 2 + sy - 1,
                      [](int, int) { return true; });
            } else if (kind == 1) {  // ellipse
                const double ax = std::max(1.0, rng.log_uniform(2.0, h / 2.0) / 2.0);
                const double ay = std::max(1.0, rng.log_uniform(2.0, h / 2.0) / 2.0);
                paint(int(cx - ax), int(cx + ax), int(cy - ay), int(cy + ay), [&](int x, int y) {
                    const double dx = (x - cx) / ax, dy = (y - cy) / ay;
                    return dx * dx + dy * dy <= 1.0;
                });
            } else {  // thin bar, 1-3 px wide, to stress narrow-object context
                const int thick = rng.uniform_int(1, 3);
                const int len = std::max(2, int(std::lround(rng.log_uniform(2.0, h / 2.0))));
                if (rng.uniform_int(0, 1) == 0)
                    paint(cx - len / 2, cx - len / 2 + len - 1, cy, cy + thick - 1,
                          [](int, int) { return true; });
                else
                    paint(cx, cx + thick - 1, cy - len / 2, cy - len / 2 + len - 1,
                          [](int, int) { return true; });
            }
        }

        // quantize in place so files and in-memory stats agree exactly
        for (auto& v : img.data()) v = float(quantize(v)) / 255.0f;

        const std::string img_rel = "images/" + index_name("img", i, "ppm");
        const std::string lab_rel = "labels/" + index_name("lab", i, "pgm");
        SegSample sample{img, lab};
        write_sample(out_dir + "/" + img_rel, out_dir + "/" + lab_rel, sample);

        const std::string split = i < train_count ? "train" : "val";
        m.entries.push_back({img_rel, lab_rel, split});
        if (split == "train") {
            for (int c = 0; c < 3; ++c) {
                const float* p = img.ptr() + size_t(c) * h * w;
                for (int64_t j = 0; j < int64_t(h) * w; ++j) {
                    sum[c] += p[j];
                    sumsq[c] += double(p[j]) * p[j];
                }
            }
            train_px += int64_t(h) * w;
        }
    }

    for (int c = 0; c < 3; ++c) {
        const double mean = sum[c] / double(train_px);
        const double var = std::max(0.0, sumsq[c] / double(train_px) - mean * mean);
        m.stats.mean[c] = float(mean);
        m.stats.stddev[c] = std::max(1e-3f, float(std::sqrt(var)));
    }

    atomic_write(out_dir + "/manifest.tsv", [&](std::ostream& out) {
        for (const auto& e : m.entries) out << e.image << '\t' << e.label << '\t' << e.split << '\n';
    });
    atomic_write(out_dir + "/stats.txt", [&](std::ostream& out) {
        out.precision(9);
        out << "mean " << m.stats.mean[0] << ' ' << m.stats.mean[1] << ' ' << m.stats.mean[2]
            << "\nstd " << m.stats.stddev[0] << ' ' << m.stats.stddev[1] << ' '
            << m.stats.stddev[2] << '\n';
    });
    return m;
}

Manifest load_manifest(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open " + manifest_path);
    Manifest m;
    m.dir = fs::path(manifest_path).parent_path().string();
    if (m.dir.empty()) m.dir = ".";
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        Manifest::Entry e;
        if (!std::getline(ls, e.image, '\t') || !std::getline(ls, e.label, '\t') ||
            !std::getline(ls, e.split))
            throw DataError(manifest_path + ":" + std::to_string(lineno) +
                            ": expected image<TAB>label<TAB>split");
        if (e.split != "train" && e.split != "val")
            throw DataError(manifest_path + ":" + std::to_string(lineno) + ": unknown split '" +
                            e.split + "'");
        m.entries.push_back(std::move(e));
    }
    if (m.entries.empty()) throw DataError(manifest_path + ": empty manifest");

    std::ifstream st(m.dir + "/stats.txt");
    if (!st) throw DataError("missing stats.txt next to " + manifest_path);
    std::string tag;
    st >> tag >> m.stats.mean[0] >> m.stats.mean[1] >> m.stats.mean[2];
    if (tag != "mean" || !st) throw DataError("malformed stats.txt (mean line)");
    st >> tag >> m.stats.stddev[0] >> m.stats.stddev[1] >> m.stats.stddev[2];
    if (tag != "std" || !st) throw DataError("malformed stats.txt (std line)");
    return m;
}

Tensor normalize_image(const Tensor& image01, const DatasetStats& stats) {
    const Dims4 d = image01.dims();
    if (d.c != 3) throw ConfigError("normalize_image: expected 3 channels");
    Tensor out = Tensor::zeros(d);
    const size_t plane = size_t(d.h) * d.w;
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < 3; ++c) {
            const float* src = image01.ptr() + (size_t(n) * 3 + c) * plane;
            float* dst = out.ptr() + (size_t(n) * 3 + c) * plane;
            const float m = stats.mean[c], inv = 1.0f / stats.stddev[c];
            for (size_t i = 0; i < plane; ++i) dst[i] = (src[i] - m) * inv;
        }
    return out;
}

std::vector<SegSample> load_split(const Manifest& m, const std::string& split) {
    std::vector<SegSample> out;
    for (const auto& e : m.entries) {
        if (e.split != split) continue;
        SegSample s = read_sample(m.dir + "/" + e.image, m.dir + "/" + e.label);
        s.image = normalize_image(s.image, m.stats);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace sml
