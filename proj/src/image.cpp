#include "csg/image.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace csg {

namespace {

constexpr std::array<const char*, kNumClasses> kClassNames = {
    "background", "muscle", "tendon", "bone", "ditf", "calcification", "bone_irregularity", "anisotropy",
};

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

}  // namespace

const char* class_name(ClassId id) { return kClassNames[static_cast<size_t>(id)]; }

std::optional<ClassId> class_from_name(std::string_view name) {
    const std::string n = lower(name);
    for (int i = 0; i < kNumClasses; ++i) {
        if (n == kClassNames[i]) return static_cast<ClassId>(i);
    }
    // Accept a couple of spelling variants seen in configs.
    if (n == "boneirregularity" || n == "bone-irregularity") return ClassId::BoneIrregularity;
    return std::nullopt;
}

void LabelMask::validate() const {
    if (width < 16 || height < 16) throw Error("mask canvas too small: minimum 16x16");
    if (data.size() != static_cast<size_t>(width) * height) throw Error("mask data size mismatch");
    for (uint8_t v : data) {
        if (v >= kNumClasses) throw Error("mask contains invalid class id " + std::to_string(int(v)));
    }
}

namespace {

void skip_pgm_space(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

struct PgmHeader {
    int width, height, maxval;
};

PgmHeader read_pgm_header(std::istream& in, const std::filesystem::path& path) {
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '5') throw Error("not a P5 PGM file: " + path.string());
    PgmHeader h{};
    skip_pgm_space(in);
    in >> h.width;
    skip_pgm_space(in);
    in >> h.height;
    skip_pgm_space(in);
    in >> h.maxval;
    in.get();  // single whitespace before raster
    if (!in || h.width <= 0 || h.height <= 0) throw Error("bad PGM header: " + path.string());
    return h;
}

}  // namespace

void write_mask_pgm(const std::filesystem::path& path, const LabelMask& mask) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path.string());
    out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(mask.data.data()), static_cast<std::streamsize>(mask.data.size()));
    if (!out) throw Error("write failed: " + path.string());
}

LabelMask read_mask_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open mask file: " + path.string());
    const PgmHeader h = read_pgm_header(in, path);
    if (h.maxval != 255) throw Error("mask PGM must be 8-bit: " + path.string());
    LabelMask mask(h.width, h.height);
    in.read(reinterpret_cast<char*>(mask.data.data()), static_cast<std::streamsize>(mask.data.size()));
    if (!in) throw Error("truncated mask file: " + path.string());
    for (uint8_t v : mask.data) {
        if (v >= kNumClasses) throw Error("mask pixel out of class range in " + path.string());
    }
    return mask;
}

void write_image_pgm(const std::filesystem::path& path, const GrayImage& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path.string());
    out << "P5\n" << img.width << " " << img.height << "\n65535\n";
    std::vector<unsigned char> buf(img.size() * 2);
    for (size_t i = 0; i < img.size(); ++i) {
        float v = img.data[i];
        v = std::min(1.0f, std::max(0.0f, v));
        const auto q = static_cast<uint16_t>(std::lround(v * 65535.0));
        buf[2 * i] = static_cast<unsigned char>(q >> 8);  // big-endian per PGM
        buf[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error("write failed: " + path.string());
}

GrayImage read_image_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open image file: " + path.string());
    const PgmHeader h = read_pgm_header(in, path);
    GrayImage img(h.width, h.height);
    if (h.maxval == 65535) {
        std::vector<unsigned char> buf(img.size() * 2);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!in) throw Error("truncated image file: " + path.string());
        for (size_t i = 0; i < img.size(); ++i) {
            const uint16_t q = static_cast<uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]);
            img.data[i] = static_cast<float>(q) / 65535.0f;
        }
    } else if (h.maxval == 255) {
        std::vector<unsigned char> buf(img.size());
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!in) throw Error("truncated image file: " + path.string());
        for (size_t i = 0; i < img.size(); ++i) img.data[i] = static_cast<float>(buf[i]) / 255.0f;
    } else {
        throw Error("unsupported PGM maxval in " + path.string());
    }
    return img;
}

std::vector<int64_t> class_histogram(const LabelMask& mask) {
    std::vector<int64_t> h(kNumClasses, 0);
    for (uint8_t v : mask.data) {
        if (v < kNumClasses) ++h[v];
    }
    return h;
}

}  // namespace csg
