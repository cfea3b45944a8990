#pragma once

#include "csg/image.hpp"

#include <string>
#include <variant>
#include <vector>

namespace csg {

struct ScaleCmd {
    ClassId cls = ClassId::Background;
    double sx = 1.0;
    double sy = 1.0;
    bool operator==(const ScaleCmd&) const = default;
};

struct TranslateCmd {
    ClassId cls = ClassId::Background;
    int dx = 0;
    int dy = 0;
    bool operator==(const TranslateCmd&) const = default;
};

struct RotateCmd {
    ClassId cls = ClassId::Background;
    double degrees = 0.0;
    bool operator==(const RotateCmd&) const = default;
};

using EditCommand = std::variant<ScaleCmd, TranslateCmd, RotateCmd>;

struct EditProgram {
    std::vector<EditCommand> commands;
    bool operator==(const EditProgram&) const = default;
    void validate() const;  // nonempty, scales in (0,8], |degrees| <= 180
};

// Grammar, commands joined by ';':
//   scale <class> [x <float>] [y <float>]
//   translate <class> dx <int> dy <int>
//   rotate <class> <float> deg
// Class names are case-insensitive. Errors carry 1-based character positions.
EditProgram parse_edit(const std::string& text);

// Canonical text form; parse_edit(print_edit(p)) == p.
std::string print_edit(const EditProgram& program);

struct BBox {
    int top = 0, left = 0, bottom = 0, right = 0;  // inclusive
    bool operator==(const BBox&) const = default;
    int width() const { return right - left + 1; }
    int height() const { return bottom - top + 1; }
};

// Minimal box enclosing the class pixels; throws if the class is absent.
BBox bounding_box(const LabelMask& mask, ClassId cls);

// Transform the class object about its box center (nearest-neighbor
// resampling), fill vacated pixels with the nearest other label, then
// overwrite destination pixels with the moved object.
LabelMask apply_command(const LabelMask& mask, const EditCommand& cmd);
LabelMask apply_program(const LabelMask& mask, const EditProgram& program);

// Binary pixel set on a canvas.
struct PixelRegion {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> inside;

    PixelRegion() = default;
    PixelRegion(int w, int h) : width(w), height(h), inside(static_cast<size_t>(w) * h, 0) {}

    static PixelRegion from_class(const LabelMask& mask, ClassId cls);
    static PixelRegion rectangle(int w, int h, int x0, int y0, int x1, int y1);  // inclusive corners

    size_t count() const;
};

// Discrete membrane problem: for every interior pixel p,
//   4 f_p - sum_{q in N_p ∩ Ω} f_q = sum_{q in N_p ∩ ∂Ω} f*_q + sum_q v_pq.
// Interior pixels keep all four neighbors on the canvas, so Ω may not touch
// the border. guide holds 4 planes (up, down, left, right) of v_pq.
struct BlendProblem {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> omega;
    std::vector<float> boundary;  // f*, read on pixels adjacent to Ω
    std::vector<float> guide;     // 4 * width * height

    void validate() const;
};

// Conjugate-gradient solution; non-Ω pixels of the result carry the boundary
// plane. Residual stops at tol * (1 + |rhs|); iterations cap at 10 |Ω|.
GrayImage solve_poisson(const BlendProblem& problem, double tol = 1e-8);

// Seamless cloning: destination values outside the region, membrane
// interpolation of source gradients inside, clamped to [0,1]. Region pixels
// on the canvas border stay destination-valued and act as boundary.
GrayImage blend_texture(const GrayImage& src, const GrayImage& dst, const PixelRegion& region,
                        double tol = 1e-8);

}  // namespace csg
