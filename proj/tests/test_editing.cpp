#include "doctest.h"

#include "csg/editing.hpp"
#include "csg/phantom.hpp"
#include "csg/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

using namespace csg;

namespace {

// Dense reference for the membrane system, assembled row by row from the
// same equation the iterative solver discretizes, then solved by pivoted LU.
std::vector<double> dense_poisson_reference(const BlendProblem& p) {
    const int w = p.width;
    const size_t area = p.omega.size();
    std::vector<int> index(area, -1);
    std::vector<int> pixels;
    for (size_t q = 0; q < area; ++q)
        if (p.omega[q]) {
            index[q] = static_cast<int>(pixels.size());
            pixels.push_back(static_cast<int>(q));
        }
    const int n = static_cast<int>(pixels.size());
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
    const int doff[4] = {-w, w, -1, 1};
    for (int i = 0; i < n; ++i) {
        const int px = pixels[i];
        A(i, i) = 4.0;
        for (int k = 0; k < 4; ++k) {
            const int q = px + doff[k];
            if (index[q] >= 0)
                A(i, index[q]) -= 1.0;
            else
                b(i) += p.boundary[q];
            b(i) += p.guide[static_cast<size_t>(k) * area + px];
        }
    }
    const Eigen::VectorXd x = A.partialPivLu().solve(b);
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) out[i] = x(i);
    return out;
}

LabelMask square_object(int canvas, int top, int left, int size, ClassId cls, ClassId bg) {
    LabelMask m(canvas, canvas, static_cast<uint8_t>(bg));
    for (int y = top; y < top + size; ++y)
        for (int x = left; x < left + size; ++x) m.at(y, x) = static_cast<uint8_t>(cls);
    return m;
}

// Mean absolute intensity jump across the region boundary.
double seam_statistic(const GrayImage& img, const PixelRegion& region) {
    double total = 0;
    int edges = 0;
    const int dx[4] = {0, 0, -1, 1}, dy[4] = {-1, 1, 0, 0};
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            if (!region.inside[static_cast<size_t>(y) * img.width + x]) continue;
            for (int k = 0; k < 4; ++k) {
                const int ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= img.height || nx < 0 || nx >= img.width) continue;
                if (region.inside[static_cast<size_t>(ny) * img.width + nx]) continue;
                total += std::fabs(img.at(y, x) - img.at(ny, nx));
                ++edges;
            }
        }
    return edges ? total / edges : 0.0;
}

GrayImage speckle(uint64_t seed, int size) {
    PhantomParams p;
    p.rng_seed = seed;
    p.width = size;
    p.height = size;
    const LabelMask m = sample_mask_geometry(p, 0);
    return render_speckle(m, p);
}

}  // namespace

TEST_CASE("the grammar parses the documented command forms") {
    const EditProgram a = parse_edit("scale tendon x 1.2");
    REQUIRE(a.commands.size() == 1);
    CHECK(a.commands[0] == EditCommand(ScaleCmd{ClassId::Tendon, 1.2, 1.0}));

    const EditProgram b = parse_edit("translate ditf dx 10 dy -5; rotate bone 15 deg");
    REQUIRE(b.commands.size() == 2);
    CHECK(b.commands[0] == EditCommand(TranslateCmd{ClassId::Ditf, 10, -5}));
    CHECK(b.commands[1] == EditCommand(RotateCmd{ClassId::Bone, 15.0}));

    // Case-insensitive classes, y-only scale, both axes.
    CHECK(parse_edit("scale TENDON y 0.5").commands[0] == EditCommand(ScaleCmd{ClassId::Tendon, 1.0, 0.5}));
    CHECK(parse_edit("scale Muscle x 2 y 3").commands[0] == EditCommand(ScaleCmd{ClassId::Muscle, 2.0, 3.0}));
    CHECK(parse_edit("rotate anisotropy -180 deg").commands[0] ==
          EditCommand(RotateCmd{ClassId::Anisotropy, -180.0}));
}

TEST_CASE("parse errors carry the offending token and its position") {
    auto message_of = [](const std::string& text) {
        try {
            parse_edit(text);
        } catch (const Error& e) {
            return std::string(e.what());
        }
        return std::string();
    };

    const std::string unknown = message_of("scale femur x 2");
    CHECK(unknown.find("femur") != std::string::npos);
    CHECK(unknown.find("position 7") != std::string::npos);

    const std::string bad_number = message_of("translate ditf dx ten dy 0");
    CHECK(bad_number.find("malformed number") != std::string::npos);
    CHECK(bad_number.find("'ten'") != std::string::npos);
    CHECK(bad_number.find("position 19") != std::string::npos);

    CHECK(message_of("").find("empty program") != std::string::npos);
    CHECK(message_of(" ; ;").find("empty program") != std::string::npos);
    CHECK(message_of("scale tendon x 9").find("outside (0, 8]") != std::string::npos);
    CHECK(message_of("scale tendon x 0").find("outside (0, 8]") != std::string::npos);
    CHECK(message_of("rotate bone 181 deg").find("outside [-180, 180]") != std::string::npos);
    CHECK(message_of("rotate bone 15").find("expected") != std::string::npos);  // missing deg
    CHECK(message_of("shrink tendon").find("unknown command") != std::string::npos);
    CHECK(message_of("scale tendon x 1 translate bone dx 1 dy 1").find("expected ';'") != std::string::npos);
}

TEST_CASE("programs survive a parse-print-parse cycle unchanged") {
    const char* samples[] = {
        "scale tendon x 1.2",
        "scale muscle y 0.25",
        "translate ditf dx 10 dy -5; rotate bone 15 deg",
        "rotate calcification -90.5 deg; scale bone_irregularity x 8 y 0.125",
        "translate background dx 0 dy 0",
    };
    for (const char* text : samples) {
        const EditProgram once = parse_edit(text);
        const std::string printed = print_edit(once);
        const EditProgram twice = parse_edit(printed);
        CHECK(once == twice);
        CHECK(print_edit(twice) == printed);
    }
}

TEST_CASE("bounding box is the minimal enclosing box") {
    LabelMask m(16, 16, static_cast<uint8_t>(ClassId::Background));
    for (int y = 2; y <= 5; ++y)
        for (int x = 3; x <= 7; ++x) m.at(y, x) = static_cast<uint8_t>(ClassId::Bone);
    const BBox box = bounding_box(m, ClassId::Bone);
    CHECK(box == BBox{2, 3, 5, 7});
    CHECK(box.width() == 5);
    CHECK(box.height() == 4);
    CHECK_THROWS_WITH_AS(bounding_box(m, ClassId::Ditf), doctest::Contains("not present"), Error);
}

TEST_CASE("identity scale reproduces the input mask exactly") {
    PhantomParams p;
    p.rng_seed = 21;
    const LabelMask m = sample_mask_geometry(p, 0);
    const LabelMask out = apply_command(m, ScaleCmd{ClassId::Tendon, 1.0, 1.0});
    CHECK(out.data == m.data);
}

TEST_CASE("x-scaling doubles then halves the object width") {
    const LabelMask m = square_object(40, 15, 15, 10, ClassId::Bone, ClassId::Muscle);

    const LabelMask wide = apply_command(m, ScaleCmd{ClassId::Bone, 2.0, 1.0});
    const BBox wbox = bounding_box(wide, ClassId::Bone);
    CHECK(std::abs(wbox.width() - 20) <= 1);
    CHECK(std::abs(wbox.height() - 10) <= 1);

    const LabelMask back = apply_command(wide, ScaleCmd{ClassId::Bone, 0.5, 1.0});
    const BBox bbox = bounding_box(back, ClassId::Bone);
    CHECK(std::abs(bbox.width() - 10) <= 1);
    CHECK(std::abs(bbox.height() - 10) <= 1);

    // Pixel-count oracle: areas scale with the commanded factors.
    const auto count = [](const LabelMask& mask) {
        return class_histogram(mask)[static_cast<int>(ClassId::Bone)];
    };
    CHECK(std::abs(count(wide) - 200) <= 20);
    CHECK(std::abs(count(back) - 100) <= 10);
}

TEST_CASE("translation moves the box and refills the vacated area") {
    const LabelMask m = square_object(32, 4, 4, 6, ClassId::Ditf, ClassId::Tendon);
    const LabelMask out = apply_command(m, TranslateCmd{ClassId::Ditf, 12, 9});

    const BBox before = bounding_box(m, ClassId::Ditf);
    const BBox after = bounding_box(out, ClassId::Ditf);
    CHECK(after.left == before.left + 12);
    CHECK(after.top == before.top + 9);
    CHECK(after.width() == before.width());
    CHECK(after.height() == before.height());

    // Vacated pixels reassigned to the surrounding class.
    for (int y = 4; y < 10; ++y)
        for (int x = 4; x < 10; ++x) CHECK(out.at(y, x) == static_cast<uint8_t>(ClassId::Tendon));
    // Object pixel count preserved for a pure translation.
    CHECK(class_histogram(out)[static_cast<int>(ClassId::Ditf)] ==
          class_histogram(m)[static_cast<int>(ClassId::Ditf)]);
}

TEST_CASE("rotation by ninety degrees swaps the box dimensions") {
    LabelMask m(40, 40, static_cast<uint8_t>(ClassId::Muscle));
    for (int y = 18; y < 22; ++y)
        for (int x = 10; x < 30; ++x) m.at(y, x) = static_cast<uint8_t>(ClassId::Bone);

    const LabelMask out = apply_command(m, RotateCmd{ClassId::Bone, 90.0});
    const BBox box = bounding_box(out, ClassId::Bone);
    CHECK(std::abs(box.width() - 4) <= 1);
    CHECK(std::abs(box.height() - 20) <= 1);
}

TEST_CASE("edits only touch vacated and overwritten pixels") {
    const LabelMask m = square_object(32, 4, 4, 6, ClassId::Bone, ClassId::Muscle);
    const LabelMask out = apply_command(m, TranslateCmd{ClassId::Bone, 10, 0});
    CHECK(out.data.size() == m.data.size());
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            const bool was_object = m.at(y, x) == static_cast<uint8_t>(ClassId::Bone);
            const bool is_object = out.at(y, x) == static_cast<uint8_t>(ClassId::Bone);
            if (!was_object && !is_object) CHECK(out.at(y, x) == m.at(y, x));
        }
}

TEST_CASE("commands are applied strictly left to right") {
    const LabelMask m = square_object(32, 8, 8, 6, ClassId::Bone, ClassId::Muscle);
    const EditProgram program = parse_edit("translate bone dx 6 dy 0; translate bone dx 0 dy 6");
    const LabelMask out = apply_program(m, program);
    const BBox box = bounding_box(out, ClassId::Bone);
    CHECK(box.left == 14);
    CHECK(box.top == 14);
}

TEST_CASE("moving an object fully off the canvas is an error") {
    const LabelMask m = square_object(32, 4, 4, 6, ClassId::Bone, ClassId::Muscle);
    CHECK_THROWS_WITH_AS(apply_command(m, TranslateCmd{ClassId::Bone, 100, 0}),
                         doctest::Contains("outside the canvas"), Error);
    CHECK_THROWS_WITH_AS(apply_command(m, TranslateCmd{ClassId::Calcification, 1, 0}),
                         doctest::Contains("not present"), Error);
}

TEST_CASE("constant boundary with no guidance extends as a constant") {
    BlendProblem p;
    p.width = 8;
    p.height = 8;
    p.omega.assign(64, 0);
    for (int y = 2; y <= 5; ++y)
        for (int x = 2; x <= 5; ++x) p.omega[static_cast<size_t>(y) * 8 + x] = 1;
    p.boundary.assign(64, 0.37f);
    p.guide.assign(4 * 64, 0.f);
    const GrayImage f = solve_poisson(p);
    for (int y = 2; y <= 5; ++y)
        for (int x = 2; x <= 5; ++x) CHECK(f.at(y, x) == doctest::Approx(0.37).epsilon(1e-7));
}

TEST_CASE("a single-pixel region solves its one equation exactly") {
    BlendProblem p;
    p.width = 3;
    p.height = 3;
    p.omega.assign(9, 0);
    p.omega[4] = 1;  // center
    p.boundary.assign(9, 0.f);
    p.boundary[1] = 0.1f;  // up
    p.boundary[7] = 0.2f;  // down
    p.boundary[3] = 0.3f;  // left
    p.boundary[5] = 0.4f;  // right
    p.guide.assign(36, 0.f);
    p.guide[0 * 9 + 4] = 0.01f;
    p.guide[1 * 9 + 4] = 0.02f;
    p.guide[2 * 9 + 4] = 0.03f;
    p.guide[3 * 9 + 4] = 0.04f;
    const GrayImage f = solve_poisson(p);
    CHECK(f.at(1, 1) == doctest::Approx((0.1 + 0.2 + 0.3 + 0.4 + 0.01 + 0.02 + 0.03 + 0.04) / 4.0).epsilon(1e-6));
}

TEST_CASE("conjugate gradients match a dense direct solve") {
    Rng rng(derive_seed(61, "poisson-oracle"));
    for (int trial = 0; trial < 3; ++trial) {
        BlendProblem p;
        p.width = 14;
        p.height = 14;
        const size_t area = 14 * 14;
        p.omega.assign(area, 0);
        // Random 12x12 interior patch with random holes.
        for (int y = 1; y <= 12; ++y)
            for (int x = 1; x <= 12; ++x)
                if (rng.uniform() < 0.8) p.omega[static_cast<size_t>(y) * 14 + x] = 1;
        p.omega[static_cast<size_t>(6) * 14 + 6] = 1;  // keep nonempty
        p.boundary.resize(area);
        for (auto& v : p.boundary) v = static_cast<float>(rng.uniform());
        p.guide.resize(4 * area);
        for (auto& v : p.guide) v = static_cast<float>(rng.normal() * 0.1);

        const std::vector<double> reference = dense_poisson_reference(p);
        const GrayImage fast = solve_poisson(p, 1e-10);

        size_t i = 0;
        double max_diff = 0;
        for (size_t q = 0; q < area; ++q)
            if (p.omega[q]) max_diff = std::max(max_diff, std::fabs(fast.data[q] - reference[i++]));
        CHECK(max_diff <= 1e-6);
    }
}

TEST_CASE("the solver rejects malformed problems and impossible tolerances") {
    BlendProblem p;
    p.width = 6;
    p.height = 6;
    p.omega.assign(36, 0);
    p.omega[0] = 1;  // touches the border
    p.boundary.assign(36, 0.f);
    p.guide.assign(144, 0.f);
    CHECK_THROWS_WITH_AS(solve_poisson(p), doctest::Contains("border"), Error);

    p.omega.assign(36, 0);
    CHECK_THROWS_WITH_AS(solve_poisson(p), doctest::Contains("empty"), Error);

    p.omega[static_cast<size_t>(2) * 6 + 2] = 1;
    CHECK_THROWS_AS(solve_poisson(p, 0.0), Error);

    // An unreachable residual target exhausts the iteration cap.
    for (int y = 1; y <= 4; ++y)
        for (int x = 1; x <= 4; ++x) p.omega[static_cast<size_t>(y) * 6 + x] = 1;
    for (size_t i = 0; i < p.boundary.size(); ++i) p.boundary[i] = 0.1f + 0.013f * static_cast<float>(i % 7);
    for (size_t i = 0; i < p.guide.size(); ++i) p.guide[i] = 0.001f * static_cast<float>(i % 5);
    CHECK_THROWS_WITH_AS(solve_poisson(p, 1e-300), doctest::Contains("no convergence"), Error);
}

TEST_CASE("blending a constant source into a constant destination is a no-op") {
    const GrayImage src(16, 16, 0.8f), dst(16, 16, 0.3f);
    const PixelRegion region = PixelRegion::rectangle(16, 16, 4, 4, 11, 11);
    const GrayImage out = blend_texture(src, dst, region);
    for (float v : out.data) CHECK(v == doctest::Approx(0.3).epsilon(1e-7));
}

TEST_CASE("blending an image into itself reproduces the image") {
    const GrayImage img = speckle(99, 32);
    const PixelRegion region = PixelRegion::rectangle(32, 32, 6, 6, 25, 25);
    const GrayImage out = blend_texture(img, img, region);
    for (size_t i = 0; i < img.data.size(); ++i) CHECK(out.data[i] == doctest::Approx(img.data[i]).epsilon(1e-5));
}

TEST_CASE("the membrane blend beats copy-paste on seam smoothness") {
    int blend_wins = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const GrayImage src = speckle(1000 + trial, 32);
        const GrayImage dst = speckle(2000 + trial, 32);
        const PixelRegion region = PixelRegion::rectangle(32, 32, 8, 8, 23, 23);

        GrayImage pasted = dst;
        for (int y = 8; y <= 23; ++y)
            for (int x = 8; x <= 23; ++x) pasted.at(y, x) = src.at(y, x);

        const GrayImage blended = blend_texture(src, dst, region);
        if (seam_statistic(blended, region) < seam_statistic(pasted, region)) ++blend_wins;
    }
    CHECK(blend_wins >= 19);
}

TEST_CASE("region helpers build the advertised pixel sets") {
    LabelMask m(16, 16, static_cast<uint8_t>(ClassId::Muscle));
    m.at(5, 5) = m.at(5, 6) = static_cast<uint8_t>(ClassId::Ditf);
    const PixelRegion from = PixelRegion::from_class(m, ClassId::Ditf);
    CHECK(from.count() == 2);
    CHECK(from.inside[static_cast<size_t>(5) * 16 + 5] == 1);
    CHECK(from.inside[0] == 0);

    const PixelRegion rect = PixelRegion::rectangle(16, 16, 2, 3, 4, 5);
    CHECK(rect.count() == 9);
    CHECK_THROWS_AS(PixelRegion::rectangle(16, 16, 5, 5, 2, 2), Error);
    CHECK_THROWS_AS(PixelRegion::rectangle(16, 16, 0, 0, 16, 16), Error);
}
