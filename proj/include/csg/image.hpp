#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace csg {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// The eight semantic classes. The numeric mapping is fixed and is what
// gets serialized into mask files and manifests.
enum class ClassId : uint8_t {
    Background = 0,
    Muscle = 1,
    Tendon = 2,
    Bone = 3,
    Ditf = 4,
    Calcification = 5,
    BoneIrregularity = 6,
    Anisotropy = 7,
};

inline constexpr int kNumClasses = 8;

const char* class_name(ClassId id);
std::optional<ClassId> class_from_name(std::string_view name);  // case-insensitive

// Integer-class raster. data is row-major, one class id per pixel.
struct LabelMask {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> data;

    LabelMask() = default;
    LabelMask(int w, int h, uint8_t fill = 0) : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

    uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
    size_t size() const { return data.size(); }
    bool same_shape(const LabelMask& o) const { return width == o.width && height == o.height; }

    void validate() const;  // shape >= 16, all pixels valid class ids
};

// Single-channel float raster; rendered images live in [0,1].
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<float> data;

    GrayImage() = default;
    GrayImage(int w, int h, float fill = 0.f) : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

    float& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
    float at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
    size_t size() const { return data.size(); }
    bool same_shape(const GrayImage& o) const { return width == o.width && height == o.height; }
};

// PGM (P5) I/O. Masks are 8-bit with pixel value == class id; images are
// 16-bit big-endian, quantized from [0,1].
void write_mask_pgm(const std::filesystem::path& path, const LabelMask& mask);
LabelMask read_mask_pgm(const std::filesystem::path& path);
void write_image_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_image_pgm(const std::filesystem::path& path);

// Pixel count per class.
std::vector<int64_t> class_histogram(const LabelMask& mask);

}  // namespace csg
