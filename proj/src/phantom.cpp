#include "csg/phantom.hpp"

#include "csg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <vector>

#include "json.hpp"

namespace csg {

namespace {

// Mean area fractions the generator is calibrated against (fraction of total
// canvas area, averaged over samples including those without the class).
constexpr float kMuscleFrac = 0.2726f;
constexpr float kTendonFrac = 0.1031f;
constexpr float kBoneFrac = 0.0266f;
constexpr float kDitfFrac = 0.0107f;     // at pathology_rate 0.5
constexpr float kCalcFrac = 0.00043f;
constexpr float kBoneIrrFrac = 0.0119f;
constexpr float kAnisoFrac = 0.0203f;

constexpr float kCalcRate = 0.15f;
constexpr float kBoneIrrRate = 0.30f;
constexpr float kAnisoRate = 0.30f;
constexpr float kDitfCondFrac = kDitfFrac / 0.5f;
constexpr float kCalcCondFrac = kCalcFrac / kCalcRate;
constexpr float kBoneIrrCondFrac = kBoneIrrFrac / kBoneIrrRate;
constexpr float kAnisoCondFrac = kAnisoFrac / kAnisoRate;

constexpr float kBgTopFrac = 0.29f;

// 1 + a*(2u-1): relative jitter with exact unit mean.
float jitter(Rng& rng, float a) { return 1.0f + a * (2.0f * static_cast<float>(rng.uniform()) - 1.0f); }

struct ColumnInterval {
    int start = -1;
    int width = 0;
    bool ok() const { return start >= 0 && width > 0; }
};

// Picks a random start so [start, start+width) covers only free columns,
// shrinking the request when the mask is too crowded.
ColumnInterval place_interval(Rng& rng, std::vector<uint8_t>& free_cols, int width) {
    const int w = static_cast<int>(free_cols.size());
    width = std::min(width, w - 2);
    for (int attempt = 0; attempt < 5 && width >= 3; ++attempt) {
        std::vector<int> starts;
        for (int s = 1; s + width <= w - 1; ++s) {
            bool ok = true;
            for (int x = s; x < s + width && ok; ++x) ok = free_cols[x] != 0;
            if (ok) starts.push_back(s);
        }
        if (!starts.empty()) {
            const int s = starts[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(starts.size()) - 1))];
            for (int x = std::max(0, s - 1); x < std::min(w, s + width + 1); ++x) free_cols[x] = 0;
            return {s, width};
        }
        width = std::max(3, width * 4 / 5);
    }
    return {};
}

// Ellipse in band coordinates: for each column the vertical extent follows the
// band's local bounds, so the blob stays inside the band under any curvature.
void stamp_band_ellipse(LabelMask& mask, const std::vector<int>& band_lo, const std::vector<int>& band_hi,
                        int cx, int hw, float hh, float center_frac, ClassId cls) {
    const int w = mask.width, h = mask.height;
    for (int dx = -hw; dx <= hw; ++dx) {
        const int x = cx + dx;
        if (x < 0 || x >= w) continue;
        const int lo = band_lo[static_cast<size_t>(x)], hi = band_hi[static_cast<size_t>(x)];
        if (hi - lo < 3) continue;
        const float rel = hw > 0 ? static_cast<float>(dx) / static_cast<float>(hw) : 0.0f;
        const float half = hh * std::sqrt(std::max(0.0f, 1.0f - rel * rel));
        const float cy = static_cast<float>(lo) + center_frac * static_cast<float>(hi - lo);
        int y0 = static_cast<int>(std::lround(cy - half));
        int y1 = static_cast<int>(std::lround(cy + half));
        y0 = std::max(y0, lo + 1);
        y1 = std::min(y1, hi - 2);
        for (int y = y0; y <= y1; ++y) {
            if (y < 0 || y >= h) continue;
            mask.at(y, x) = static_cast<uint8_t>(cls);
        }
    }
}

void box_blur(GrayImage& img, int radius) {
    if (radius <= 0) return;
    const int w = img.width, h = img.height;
    std::vector<float> tmp(img.data.size());
    std::vector<double> prefix;
    for (int y = 0; y < h; ++y) {
        const float* row = img.data.data() + static_cast<size_t>(y) * w;
        prefix.assign(static_cast<size_t>(w) + 1, 0.0);
        for (int x = 0; x < w; ++x) prefix[static_cast<size_t>(x) + 1] = prefix[static_cast<size_t>(x)] + row[x];
        for (int x = 0; x < w; ++x) {
            const int a = std::max(0, x - radius), b = std::min(w - 1, x + radius);
            tmp[static_cast<size_t>(y) * w + x] =
                static_cast<float>((prefix[static_cast<size_t>(b) + 1] - prefix[static_cast<size_t>(a)]) / (b - a + 1));
        }
    }
    for (int x = 0; x < w; ++x) {
        prefix.assign(static_cast<size_t>(h) + 1, 0.0);
        for (int y = 0; y < h; ++y)
            prefix[static_cast<size_t>(y) + 1] = prefix[static_cast<size_t>(y)] + tmp[static_cast<size_t>(y) * w + x];
        for (int y = 0; y < h; ++y) {
            const int a = std::max(0, y - radius), b = std::min(h - 1, y + radius);
            img.data[static_cast<size_t>(y) * w + x] =
                static_cast<float>((prefix[static_cast<size_t>(b) + 1] - prefix[static_cast<size_t>(a)]) / (b - a + 1));
        }
    }
}

}  // namespace

void validate_params(const PhantomParams& params) {
    if (params.width < 16 || params.height < 16)
        throw Error("phantom: canvas must be at least 16x16, got " + std::to_string(params.width) + "x" +
                    std::to_string(params.height));
    if (params.layer_count < 4 || params.layer_count > 8)
        throw Error("phantom: layer_count must be in [4,8]");
    if (!(params.pathology_rate >= 0.0f && params.pathology_rate <= 1.0f))
        throw Error("phantom: pathology_rate must be in [0,1]");
    if (params.speckle_scale < 0 || params.speckle_scale > 16)
        throw Error("phantom: speckle_scale must be in [0,16]");
    if (params.echogenicity[static_cast<size_t>(ClassId::Background)] != 0.0f)
        throw Error("phantom: background echogenicity must be 0");
    for (float e : params.echogenicity)
        if (!(e >= 0.0f && e <= 1.0f)) throw Error("phantom: echogenicity values must be in [0,1]");
}

LabelMask sample_mask_geometry(const PhantomParams& params, int index) {
    validate_params(params);
    const int w = params.width, h = params.height;
    Rng rng(derive_seed(params.rng_seed, "mask", static_cast<uint64_t>(index)));

    // Band stack: top background, alternating muscle/tendon, bone ridge,
    // shadow below. Thicknesses are area budgets with mean-preserving jitter;
    // the tendon budget includes the expected pathology carve-outs.
    const int middle = params.layer_count - 2;
    const int n_muscle = (middle + 1) / 2;
    const int n_tendon = middle / 2;
    const float tendon_gross =
        kTendonFrac + params.pathology_rate * kDitfCondFrac + kCalcRate * kCalcCondFrac + kAnisoRate * kAnisoCondFrac;
    const float bone_gross = kBoneFrac + kBoneIrrRate * kBoneIrrCondFrac * 0.45f;

    const float bg_top = kBgTopFrac * static_cast<float>(h) * jitter(rng, 0.12f);
    std::vector<ClassId> band_class;
    std::vector<float> band_th;
    for (int i = 0; i < middle; ++i) {
        const bool is_muscle = (i % 2) == 0;
        band_class.push_back(is_muscle ? ClassId::Muscle : ClassId::Tendon);
        const float base = is_muscle ? kMuscleFrac / static_cast<float>(n_muscle)
                                     : tendon_gross / static_cast<float>(n_tendon);
        band_th.push_back(base * static_cast<float>(h) * jitter(rng, 0.10f));
    }
    band_class.push_back(ClassId::Bone);
    band_th.push_back(bone_gross * static_cast<float>(h) * jitter(rng, 0.12f));
    const int n_bands = static_cast<int>(band_class.size());

    const float amp = static_cast<float>(h) * static_cast<float>(rng.uniform(0.010, 0.045));
    const int waves = static_cast<int>(rng.uniform_int(1, 2));
    const float phase = static_cast<float>(rng.uniform(0.0, 2.0 * std::numbers::pi));

    // Integer band boundaries per column; all bands share the same sinusoidal
    // offset so thicknesses (hence areas) are curvature-invariant.
    std::vector<std::vector<int>> bounds(static_cast<size_t>(n_bands) + 1,
                                         std::vector<int>(static_cast<size_t>(w)));
    for (int x = 0; x < w; ++x) {
        const float off =
            amp * std::sin(2.0f * std::numbers::pi_v<float> * waves * (static_cast<float>(x) + 0.5f) / static_cast<float>(w) +
                           phase);
        float b = bg_top + off;
        bounds[0][static_cast<size_t>(x)] = std::clamp(static_cast<int>(std::lround(b)), 0, h);
        for (int k = 0; k < n_bands; ++k) {
            b += band_th[static_cast<size_t>(k)];
            bounds[static_cast<size_t>(k) + 1][static_cast<size_t>(x)] =
                std::clamp(static_cast<int>(std::lround(b)), 0, h);
        }
    }

    LabelMask mask(w, h);
    for (int x = 0; x < w; ++x) {
        for (int k = 0; k < n_bands; ++k) {
            const int y0 = bounds[static_cast<size_t>(k)][static_cast<size_t>(x)];
            const int y1 = bounds[static_cast<size_t>(k) + 1][static_cast<size_t>(x)];
            for (int y = y0; y < y1; ++y) mask.at(y, x) = static_cast<uint8_t>(band_class[static_cast<size_t>(k)]);
        }
    }

    // Pathologies live in the deepest tendon band.
    int host = -1;
    for (int k = 0; k < n_bands; ++k)
        if (band_class[static_cast<size_t>(k)] == ClassId::Tendon) host = k;
    const std::vector<int>& host_lo = bounds[static_cast<size_t>(host)];
    const std::vector<int>& host_hi = bounds[static_cast<size_t>(host) + 1];
    const float host_th = band_th[static_cast<size_t>(host)];
    const float canvas_area = static_cast<float>(w) * static_cast<float>(h);

    const bool has_aniso = rng.bernoulli(kAnisoRate);
    const bool has_ditf = rng.bernoulli(params.pathology_rate);
    const bool has_calc = rng.bernoulli(kCalcRate);
    const bool has_birr = rng.bernoulli(kBoneIrrRate);

    std::vector<uint8_t> free_cols(static_cast<size_t>(w), 1);
    free_cols[0] = free_cols[static_cast<size_t>(w) - 1] = 0;

    if (has_aniso && host_th >= 3.0f) {
        // Full-thickness hypoechoic stripe across part of the tendon band.
        int want = static_cast<int>(std::lround(kAnisoCondFrac * 1.06f * canvas_area / host_th * jitter(rng, 0.10f)));
        want = std::min(want, w * 55 / 100);  // leave room for lesions in thin bands
        const ColumnInterval iv = place_interval(rng, free_cols, std::max(3, want));
        if (iv.ok()) {
            for (int x = iv.start; x < iv.start + iv.width; ++x) {
                for (int y = host_lo[static_cast<size_t>(x)]; y < host_hi[static_cast<size_t>(x)]; ++y)
                    mask.at(y, x) = static_cast<uint8_t>(ClassId::Anisotropy);
            }
        }
    }
    if (has_ditf) {
        const float hh = std::min(3.0f, (host_th - 2.0f) * 0.45f) * static_cast<float>(rng.uniform(0.85, 1.0));
        const float area = kDitfCondFrac * canvas_area * jitter(rng, 0.10f);
        const float cf = static_cast<float>(rng.uniform(0.38, 0.62));
        if (hh >= 0.5f) {
            // Rasterized column height is 2*half+1, so the extra +1 per column
            // enters the area budget.
            int hw = static_cast<int>(std::lround(area / (std::numbers::pi_v<float> * hh + 2.0f)));
            hw = std::clamp(hw, 2, (w - 6) / 2);
            const ColumnInterval iv = place_interval(rng, free_cols, 2 * hw + 1);
            if (iv.ok())
                stamp_band_ellipse(mask, host_lo, host_hi, iv.start + iv.width / 2, iv.width / 2, hh, cf,
                                   ClassId::Ditf);
        }
    }
    if (has_calc && host_th >= 4.0f) {
        const float hh = 1.3f * static_cast<float>(rng.uniform(0.9, 1.1));
        const float cf = static_cast<float>(rng.uniform(0.40, 0.60));
        const ColumnInterval iv = place_interval(rng, free_cols, 5);
        if (iv.ok())
            stamp_band_ellipse(mask, host_lo, host_hi, iv.start + iv.width / 2, iv.width / 2, hh, cf,
                               ClassId::Calcification);
    }
    if (has_birr) {
        // Cortical bump: replaces the ridge over an interval and bulges into
        // the shadow below it.
        const float tb = band_th[static_cast<size_t>(n_bands) - 1] * static_cast<float>(rng.uniform(1.8, 2.6));
        int wb = static_cast<int>(std::lround(kBoneIrrCondFrac * 1.10f * canvas_area / std::max(1.0f, tb)));
        wb = std::clamp(wb, 3, w - 2);
        const int p0 = static_cast<int>(rng.uniform_int(1, std::max<int64_t>(1, w - 1 - wb)));
        const std::vector<int>& ridge_lo = bounds[static_cast<size_t>(n_bands) - 1];
        for (int x = p0; x < std::min(w, p0 + wb); ++x) {
            const int y0 = ridge_lo[static_cast<size_t>(x)];
            const int y1 = std::min(h, y0 + static_cast<int>(std::lround(tb)));
            for (int y = y0; y < y1; ++y) mask.at(y, x) = static_cast<uint8_t>(ClassId::BoneIrregularity);
        }
    }

    mask.validate();
    return mask;
}

GrayImage render_speckle(const LabelMask& mask, const PhantomParams& params, int index) {
    validate_params(params);
    if (mask.width != params.width || mask.height != params.height)
        throw Error("phantom: mask shape does not match params canvas");
    Rng rng(derive_seed(params.rng_seed, "render", static_cast<uint64_t>(index)));

    float gain = 1.0f;
    int radius = params.speckle_scale;
    if (params.texture_jitter) {
        gain = 0.9f + 0.2f * static_cast<float>(rng.uniform());
        radius = std::max(0, radius + static_cast<int>(rng.uniform_int(-1, 1)));
    }

    const double sigma = std::sqrt(2.0 / std::numbers::pi);  // unit-mean Rayleigh
    GrayImage img(mask.width, mask.height);
    for (size_t i = 0; i < img.data.size(); ++i) {
        const float e = params.echogenicity[mask.data[i]];
        img.data[i] = e * gain * static_cast<float>(rng.rayleigh(sigma));
    }
    box_blur(img, radius);
    for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

DatasetManifest build_dataset(const PhantomParams& params, int n, double train_frac, double test_frac,
                              const std::filesystem::path& out_dir) {
    validate_params(params);
    if (n < 2) throw Error("phantom: dataset needs at least 2 samples");
    if (std::abs(train_frac + test_frac - 1.0) > 1e-9) throw Error("phantom: split fractions must sum to 1");
    if (train_frac < 0.0 || test_frac < 0.0) throw Error("phantom: split fractions must be nonnegative");

    std::filesystem::create_directories(out_dir / "masks");
    std::filesystem::create_directories(out_dir / "images");

    const int train_count = std::clamp<int>(static_cast<int>(std::llround(train_frac * n)), 0, n);

    DatasetManifest manifest;
    manifest.width = params.width;
    manifest.height = params.height;
    manifest.rng_seed = params.rng_seed;
    for (size_t c = 0; c < kNumClasses; ++c) manifest.classes[c] = class_name(static_cast<ClassId>(c));

    for (int i = 0; i < n; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "s%06d", i);
        const std::string id(buf);
        const LabelMask mask = sample_mask_geometry(params, i);
        const GrayImage img = render_speckle(mask, params, i);
        const std::string mask_rel = "masks/" + id + ".pgm";
        const std::string img_rel = "images/" + id + ".pgm";
        write_mask_pgm(out_dir / mask_rel, mask);
        write_image_pgm(out_dir / img_rel, img);
        manifest.entries.push_back({id, mask_rel, img_rel, i < train_count ? "train" : "test",
                                    derive_seed(params.rng_seed, "mask", static_cast<uint64_t>(i))});
    }
    write_manifest(manifest, out_dir / "manifest.jsonl");
    return manifest;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("phantom: cannot open manifest for writing: " + path.string());
    nlohmann::json meta;
    meta["type"] = "meta";
    meta["width"] = manifest.width;
    meta["height"] = manifest.height;
    meta["rng_seed"] = manifest.rng_seed;
    meta["classes"] = manifest.classes;
    out << meta.dump() << "\n";
    for (const ManifestEntry& e : manifest.entries) {
        nlohmann::json rec;
        rec["type"] = "sample";
        rec["id"] = e.id;
        rec["mask"] = e.mask_path;
        rec["image"] = e.image_path;
        rec["split"] = e.split;
        rec["seed"] = e.seed;
        out << rec.dump() << "\n";
    }
    if (!out) throw Error("phantom: manifest write failed: " + path.string());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("phantom: cannot open manifest: " + path.string());
    DatasetManifest manifest;
    bool have_meta = false;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
        if (rec.is_discarded()) throw Error("phantom: malformed manifest line: " + line);
        const std::string type = rec.value("type", "");
        if (type == "meta") {
            manifest.width = rec.at("width").get<int>();
            manifest.height = rec.at("height").get<int>();
            manifest.rng_seed = rec.at("rng_seed").get<uint64_t>();
            const auto classes = rec.at("classes").get<std::vector<std::string>>();
            if (classes.size() != kNumClasses) throw Error("phantom: manifest class list has wrong size");
            for (size_t c = 0; c < kNumClasses; ++c) {
                if (classes[c] != class_name(static_cast<ClassId>(c))) throw Error("phantom: manifest class mapping mismatch: " + classes[c]);
                manifest.classes[c] = classes[c];
            }
            have_meta = true;
        } else if (type == "sample") {
            manifest.entries.push_back({rec.at("id").get<std::string>(), rec.at("mask").get<std::string>(),
                                        rec.at("image").get<std::string>(), rec.at("split").get<std::string>(),
                                        rec.at("seed").get<uint64_t>()});
        } else {
            throw Error("phantom: unknown manifest record type: " + type);
        }
    }
    if (!have_meta) throw Error("phantom: manifest missing meta record: " + path.string());
    return manifest;
}

}  // namespace csg
