#include "bimamba/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace bimamba::data {

// ---- manifest / dataset lookups ----------------------------------------------------

std::string SplitManifest::split_of(const std::string& subject_id) const {
    auto has = [&](const std::vector<std::string>& v) {
        return std::find(v.begin(), v.end(), subject_id) != v.end();
    };
    if (has(train)) return "train";
    if (has(val)) return "val";
    if (has(test)) return "test";
    return "";
}

std::vector<std::size_t> Dataset::split_indices(const std::string& split) const {
    const std::vector<std::string>* ids = nullptr;
    if (split == "train") ids = &manifest.train;
    else if (split == "val") ids = &manifest.val;
    else if (split == "test") ids = &manifest.test;
    else throw ContractError("unknown split '" + split + "'");
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < samples.size(); ++i) index[samples[i].subject_id] = i;
    std::vector<std::size_t> out;
    out.reserve(ids->size());
    for (const std::string& id : *ids) {
        auto it = index.find(id);
        if (it == index.end())
            throw ContractError("manifest subject '" + id + "' missing from dataset");
        out.push_back(it->second);
    }
    return out;
}

// ---- projection ------------------------------------------------------------------------

Image parallel_project_raw(const Volume& v, ProjectionAxis axis) {
    if (v.dz < 1 || v.dy < 1 || v.dx < 1) throw ShapeError("parallel_project: empty volume");
    Image img;
    if (axis == ProjectionAxis::Frontal) {
        // rays along y: image rows are z, columns are x
        img = Image::filled(v.dz, v.dx, 0.0f);
        for (i64 z = 0; z < v.dz; ++z)
            for (i64 x = 0; x < v.dx; ++x) {
                double acc = 0;
                for (i64 y = 0; y < v.dy; ++y) acc += v.at(z, y, x);
                img.at(z, x) = static_cast<float>(acc / static_cast<double>(v.dy));
            }
    } else {
        // rays along x: image rows are z, columns are y
        img = Image::filled(v.dz, v.dy, 0.0f);
        for (i64 z = 0; z < v.dz; ++z)
            for (i64 y = 0; y < v.dy; ++y) {
                double acc = 0;
                for (i64 x = 0; x < v.dx; ++x) acc += v.at(z, y, x);
                img.at(z, y) = static_cast<float>(acc / static_cast<double>(v.dx));
            }
    }
    return img;
}

Image parallel_project(const Volume& v, ProjectionAxis axis) {
    Image img = parallel_project_raw(v, axis);
    float lo = img.pixels[0], hi = img.pixels[0];
    for (float p : img.pixels) {
        lo = std::min(lo, p);
        hi = std::max(hi, p);
    }
    if (hi == lo) {
        std::fill(img.pixels.begin(), img.pixels.end(), 0.5f);
    } else {
        float inv = 1.0f / (hi - lo);
        for (float& p : img.pixels) p = (p - lo) * inv;
    }
    return img;
}

// ---- synthetic dataset -------------------------------------------------------------------

namespace {

std::string subject_name(i64 i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%05lld", static_cast<long long>(i));
    return buf;
}

void add_noise_and_clamp(Image& img, Rng& rng, double sigma) {
    for (float& p : img.pixels) {
        p = static_cast<float>(p + rng.normal(0.0, sigma));
        p = std::min(1.0f, std::max(0.0f, p));
    }
}

}  // namespace

Dataset synth_dataset(u64 seed, i64 n_subjects, const SynthConfig& cfg) {
    if (n_subjects < 10)
        throw ContractError("synth_dataset: need at least 10 subjects, got " +
                            std::to_string(n_subjects));
    if (cfg.height < 8 || cfg.width < 8)
        throw ContractError("synth_dataset: image extent too small");

    Dataset ds;

    // Deterministic label quota, shuffled per seed.
    i64 n_pos = static_cast<i64>(std::llround(cfg.positive_fraction *
                                              static_cast<double>(n_subjects)));
    std::vector<int> labels(static_cast<std::size_t>(n_subjects), 0);
    for (i64 i = 0; i < n_pos; ++i) labels[static_cast<std::size_t>(i)] = 1;
    {
        Rng shuffle_rng(mix_seed(seed, 0xA1));
        for (i64 i = n_subjects - 1; i > 0; --i)
            std::swap(labels[static_cast<std::size_t>(i)],
                      labels[static_cast<std::size_t>(shuffle_rng.below(i + 1))]);
    }

    for (i64 i = 0; i < n_subjects; ++i) {
        std::string id = subject_name(i);
        int y = labels[static_cast<std::size_t>(i)];
        Rng rng(mix_seed(seed, hash_string(id)));

        double cy = rng.uniform(0.3, 0.7) * static_cast<double>(cfg.height);
        double cx = rng.uniform(0.3, 0.7) * static_cast<double>(cfg.width);
        double sigma_b = rng.uniform(0.10, 0.16) * static_cast<double>(cfg.height);
        int ra = rng.bernoulli(0.5 * (1.0 + cfg.marginal_strength)) ? 1 : -1;
        int rb = rng.bernoulli(0.5 * (1.0 + cfg.interaction_strength)) ? 1 : -1;

        int z1 = 2 * y - 1;
        int blob_sign = z1 * ra;            // weakly tracks the label
        int ramp_sign = z1 * blob_sign * rb;  // alone: independent of the label

        LabeledSample s;
        s.subject_id = id;
        s.label = y;

        s.frontal = Image::filled(cfg.height, cfg.width, 0.5f);
        for (i64 r = 0; r < cfg.height; ++r)
            for (i64 c = 0; c < cfg.width; ++c) {
                double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
                double g = std::exp(-d2 / (2.0 * sigma_b * sigma_b));
                s.frontal.at(r, c) += static_cast<float>(blob_sign * cfg.blob_amplitude * g);
            }
        add_noise_and_clamp(s.frontal, rng, cfg.noise_sigma);

        s.lateral = Image::filled(cfg.height, cfg.width, 0.5f);
        for (i64 r = 0; r < cfg.height; ++r) {
            double t = 2.0 * static_cast<double>(r) / static_cast<double>(cfg.height - 1) - 1.0;
            float v = static_cast<float>(ramp_sign * cfg.ramp_amplitude * t);
            for (i64 c = 0; c < cfg.width; ++c) s.lateral.at(r, c) += v;
        }
        add_noise_and_clamp(s.lateral, rng, cfg.noise_sigma);

        ds.samples.push_back(std::move(s));
    }

    // Subject-level split: 70/10/20 by floor, remainder to test.
    std::vector<i64> order(static_cast<std::size_t>(n_subjects));
    for (i64 i = 0; i < n_subjects; ++i) order[static_cast<std::size_t>(i)] = i;
    {
        Rng split_rng(mix_seed(seed, 0xB2));
        for (i64 i = n_subjects - 1; i > 0; --i)
            std::swap(order[static_cast<std::size_t>(i)],
                      order[static_cast<std::size_t>(split_rng.below(i + 1))]);
    }
    i64 n_train = (n_subjects * 7) / 10;
    i64 n_val = n_subjects / 10;
    for (i64 i = 0; i < n_subjects; ++i) {
        std::string id = subject_name(order[static_cast<std::size_t>(i)]);
        if (i < n_train) ds.manifest.train.push_back(id);
        else if (i < n_train + n_val) ds.manifest.val.push_back(id);
        else ds.manifest.test.push_back(id);
    }
    std::sort(ds.manifest.train.begin(), ds.manifest.train.end());
    std::sort(ds.manifest.val.begin(), ds.manifest.val.end());
    std::sort(ds.manifest.test.begin(), ds.manifest.test.end());
    return ds;
}

// ---- augmentation -----------------------------------------------------------------------

Image crop_resize(const Image& img, const CropSpec& crop, i64 out_h, i64 out_w) {
    if (crop.top < 0 || crop.left < 0 || crop.height < 1 || crop.width < 1 ||
        crop.top + crop.height > img.height || crop.left + crop.width > img.width)
        throw ContractError("crop_resize: crop rectangle out of bounds");
    Image out = Image::filled(out_h, out_w, 0.0f);
    double sy = static_cast<double>(crop.height) / static_cast<double>(out_h);
    double sx = static_cast<double>(crop.width) / static_cast<double>(out_w);
    for (i64 r = 0; r < out_h; ++r) {
        double fy = (static_cast<double>(r) + 0.5) * sy - 0.5;
        i64 y0 = static_cast<i64>(std::floor(fy));
        double wy = fy - static_cast<double>(y0);
        i64 y1 = std::min(y0 + 1, crop.height - 1);
        y0 = std::max<i64>(0, std::min(y0, crop.height - 1));
        for (i64 c = 0; c < out_w; ++c) {
            double fx = (static_cast<double>(c) + 0.5) * sx - 0.5;
            i64 x0 = static_cast<i64>(std::floor(fx));
            double wx = fx - static_cast<double>(x0);
            i64 x1 = std::min(x0 + 1, crop.width - 1);
            x0 = std::max<i64>(0, std::min(x0, crop.width - 1));
            double v00 = img.at(crop.top + y0, crop.left + x0);
            double v01 = img.at(crop.top + y0, crop.left + x1);
            double v10 = img.at(crop.top + y1, crop.left + x0);
            double v11 = img.at(crop.top + y1, crop.left + x1);
            double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                       wy * ((1 - wx) * v10 + wx * v11);
            out.at(r, c) = static_cast<float>(v);
        }
    }
    return out;
}

Image hflip(const Image& img) {
    Image out = img;
    for (i64 r = 0; r < img.height; ++r)
        for (i64 c = 0; c < img.width; ++c) out.at(r, c) = img.at(r, img.width - 1 - c);
    return out;
}

static CropSpec draw_crop(Rng& rng, i64 h, i64 w) {
    double area = rng.uniform(0.7, 1.0);
    double aspect = rng.uniform(0.75, 1.3);
    double target = area * static_cast<double>(h * w);
    i64 ch = static_cast<i64>(std::llround(std::sqrt(target / aspect)));
    i64 cw = static_cast<i64>(std::llround(std::sqrt(target * aspect)));
    ch = std::max<i64>(1, std::min(ch, h));
    cw = std::max<i64>(1, std::min(cw, w));
    i64 top = rng.below(h - ch + 1);
    i64 left = rng.below(w - cw + 1);
    return {top, left, ch, cw};
}

LabeledSample augment_with(const LabeledSample& sample, const CropSpec& crop_u,
                           const CropSpec& crop_v, bool flip) {
    LabeledSample out;
    out.label = sample.label;
    out.subject_id = sample.subject_id;
    out.frontal = crop_resize(sample.frontal, crop_u, sample.frontal.height,
                              sample.frontal.width);
    out.lateral = crop_resize(sample.lateral, crop_v, sample.lateral.height,
                              sample.lateral.width);
    if (flip) {
        out.frontal = hflip(out.frontal);
        out.lateral = hflip(out.lateral);
    }
    return out;
}

LabeledSample augment(const LabeledSample& sample, Rng& rng) {
    CropSpec cu = draw_crop(rng, sample.frontal.height, sample.frontal.width);
    CropSpec cv = draw_crop(rng, sample.lateral.height, sample.lateral.width);
    bool flip = rng.bernoulli(0.5);
    return augment_with(sample, cu, cv, flip);
}

// ---- PGM -----------------------------------------------------------------------------

void write_pgm16(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("pgm: cannot open '" + path + "' for writing");
    f << "P5\n" << img.width << " " << img.height << "\n65535\n";
    std::string payload;
    payload.reserve(img.pixels.size() * 2);
    for (float p : img.pixels) {
        double v = std::min(1.0, std::max(0.0, static_cast<double>(p)));
        unsigned u = static_cast<unsigned>(std::llround(v * 65535.0));
        payload.push_back(static_cast<char>((u >> 8) & 0xff));
        payload.push_back(static_cast<char>(u & 0xff));
    }
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw Error("pgm: write to '" + path + "' failed");
}

namespace {

struct ByteReader {
    std::string buf;
    std::size_t pos = 0;

    void skip_space_and_comments() {
        while (pos < buf.size()) {
            char c = buf[pos];
            if (c == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }

    i64 read_int(const char* what) {
        skip_space_and_comments();
        std::size_t start = pos;
        while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') ++pos;
        if (pos == start)
            throw ParseError(std::string("pgm: expected ") + what, start);
        return std::stoll(buf.substr(start, pos - start));
    }
};

std::string slurp_file(const std::string& path, const char* what) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(std::string(what) + ": cannot open '" + path + "'");
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

}  // namespace

Image read_pgm16(const std::string& path) {
    ByteReader r{slurp_file(path, "pgm"), 0};
    if (r.buf.size() < 2 || r.buf[0] != 'P' || r.buf[1] != '5')
        throw ParseError("pgm: not a binary P5 file", 0);
    r.pos = 2;
    i64 w = r.read_int("width");
    i64 h = r.read_int("height");
    i64 maxval = r.read_int("maxval");
    if (w < 1 || h < 1) throw ParseError("pgm: bad extents", r.pos);
    if (maxval != 65535)
        throw ParseError("pgm: expected 16-bit maxval 65535, got " + std::to_string(maxval),
                         r.pos);
    // exactly one whitespace byte separates the header from the payload
    if (r.pos >= r.buf.size())
        throw ParseError("pgm: truncated after header", r.pos);
    ++r.pos;
    std::size_t need = static_cast<std::size_t>(w * h) * 2;
    if (r.buf.size() - r.pos < need)
        throw ParseError("pgm: truncated pixel payload, need " +
                             std::to_string(need - (r.buf.size() - r.pos)) + " more bytes",
                         r.buf.size());
    Image img = Image::filled(h, w, 0.0f);
    for (std::size_t i = 0; i < static_cast<std::size_t>(w * h); ++i) {
        unsigned hi = static_cast<unsigned char>(r.buf[r.pos + 2 * i]);
        unsigned lo = static_cast<unsigned char>(r.buf[r.pos + 2 * i + 1]);
        img.pixels[i] = static_cast<float>((hi << 8 | lo) / 65535.0);
    }
    return img;
}

// ---- RAWV ----------------------------------------------------------------------------

void write_rawv(const std::string& path, const Volume& v) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("rawv: cannot open '" + path + "' for writing");
    f.write("RAWV", 4);
    auto put_u32 = [&](u64 x) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((x >> (8 * i)) & 0xff);
        f.write(b, 4);
    };
    put_u32(static_cast<u64>(v.dz));
    put_u32(static_cast<u64>(v.dy));
    put_u32(static_cast<u64>(v.dx));
    f.write(reinterpret_cast<const char*>(v.voxels.data()),
            static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
    if (!f) throw Error("rawv: write to '" + path + "' failed");
}

Volume read_rawv(const std::string& path) {
    std::string buf = slurp_file(path, "rawv");
    if (buf.size() < 4 || std::memcmp(buf.data(), "RAWV", 4) != 0)
        throw ParseError("rawv: bad magic", 0);
    if (buf.size() < 16)
        throw ParseError("rawv: truncated header, need " + std::to_string(16 - buf.size()) +
                             " more bytes",
                         buf.size());
    auto get_u32 = [&](std::size_t at) {
        u64 v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<u64>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        return static_cast<i64>(v);
    };
    Volume v;
    v.dz = get_u32(4);
    v.dy = get_u32(8);
    v.dx = get_u32(12);
    if (v.dz < 1 || v.dy < 1 || v.dx < 1) throw ParseError("rawv: bad extents", 4);
    std::size_t need = static_cast<std::size_t>(v.dz * v.dy * v.dx) * sizeof(float);
    if (buf.size() - 16 < need)
        throw ParseError("rawv: truncated voxel payload, need " +
                             std::to_string(need - (buf.size() - 16)) + " more bytes",
                         buf.size());
    v.voxels.resize(static_cast<std::size_t>(v.dz * v.dy * v.dx));
    std::memcpy(v.voxels.data(), buf.data() + 16, need);
    return v;
}

// ---- manifest and dataset directory ------------------------------------------------------

void write_manifest(const std::string& path, const Dataset& ds) {
    std::map<std::string, int> label_of;
    for (const auto& s : ds.samples) label_of[s.subject_id] = s.label;
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("manifest: cannot open '" + path + "' for writing");
    auto emit = [&](const std::vector<std::string>& ids, const char* split) {
        for (const std::string& id : ids) {
            auto it = label_of.find(id);
            if (it == label_of.end())
                throw ContractError("manifest: subject '" + id + "' has no sample");
            f << id << '\t' << split << '\t' << it->second << '\n';
        }
    };
    emit(ds.manifest.train, "train");
    emit(ds.manifest.val, "val");
    emit(ds.manifest.test, "test");
}

void write_dataset_dir(const std::string& dir, const Dataset& ds) {
    fs::create_directories(dir);
    for (const auto& s : ds.samples) {
        write_pgm16((fs::path(dir) / (s.subject_id + "_frontal.pgm")).string(), s.frontal);
        write_pgm16((fs::path(dir) / (s.subject_id + "_lateral.pgm")).string(), s.lateral);
    }
    write_manifest((fs::path(dir) / "manifest.tsv").string(), ds);
}

Dataset load_dataset_dir(const std::string& dir) {
    fs::path manifest = fs::path(dir) / "manifest.tsv";
    std::ifstream f(manifest);
    if (!f) throw Error("dataset: cannot open '" + manifest.string() + "'");
    Dataset ds;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string id, split, label_str;
        if (!std::getline(is, id, '\t') || !std::getline(is, split, '\t') ||
            !std::getline(is, label_str))
            throw ParseError("manifest: malformed line " + std::to_string(lineno), 0);
        LabeledSample s;
        s.subject_id = id;
        s.label = std::stoi(label_str);
        s.frontal = read_pgm16((fs::path(dir) / (id + "_frontal.pgm")).string());
        s.lateral = read_pgm16((fs::path(dir) / (id + "_lateral.pgm")).string());
        ds.samples.push_back(std::move(s));
        if (split == "train") ds.manifest.train.push_back(id);
        else if (split == "val") ds.manifest.val.push_back(id);
        else if (split == "test") ds.manifest.test.push_back(id);
        else throw ParseError("manifest: unknown split '" + split + "' on line " +
                                  std::to_string(lineno),
                              0);
    }
    if (ds.samples.empty()) throw Error("dataset: '" + dir + "' holds no samples");
    return ds;
}

Tensor image_to_tensor(const Image& img, Dtype dt) {
    std::vector<double> v(img.pixels.begin(), img.pixels.end());
    return Tensor::from_values({img.height, img.width}, v, dt);
}

}  // namespace bimamba::data
