#include "csg/editing.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <deque>
#include <optional>
#include <sstream>

namespace csg {

namespace {

struct Token {
    std::string text;  // lowercased
    size_t pos = 0;    // 1-based character position in the input
};

std::vector<Token> tokenize(const std::string& text) {
    std::vector<Token> tokens;
    size_t i = 0;
    while (i < text.size()) {
        if (std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
            continue;
        }
        if (text[i] == ';') {
            tokens.push_back({";", i + 1});
            ++i;
            continue;
        }
        size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) && text[j] != ';') ++j;
        std::string word = text.substr(i, j - i);
        std::transform(word.begin(), word.end(), word.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        tokens.push_back({std::move(word), i + 1});
        i = j;
    }
    return tokens;
}

[[noreturn]] void fail(const std::string& what, size_t pos) {
    std::ostringstream msg;
    msg << "edit program: " << what << " at position " << pos;
    throw Error(msg.str());
}

class Parser {
public:
    explicit Parser(const std::string& text) : tokens_(tokenize(text)), end_pos_(text.size() + 1) {}

    EditProgram parse() {
        EditProgram program;
        // Leading/trailing/repeated separators are tolerated; what matters
        // is that at least one command is present.
        while (!done()) {
            if (peek().text == ";") {
                ++cursor_;
                continue;
            }
            program.commands.push_back(parse_command());
            if (!done() && peek().text != ";") fail("expected ';' before '" + peek().text + "'", peek().pos);
        }
        if (program.commands.empty()) fail("empty program", 1);
        program.validate();
        return program;
    }

private:
    bool done() const { return cursor_ >= tokens_.size(); }
    const Token& peek() const { return tokens_[cursor_]; }

    Token take(const char* expected) {
        if (done()) fail(std::string("unexpected end of input, expected ") + expected, end_pos_);
        last_pos_ = tokens_[cursor_].pos;
        return tokens_[cursor_++];
    }

    ClassId take_class() {
        const Token t = take("a class name");
        const std::optional<ClassId> cls = class_from_name(t.text);
        if (!cls) fail("unknown class '" + t.text + "'", t.pos);
        return *cls;
    }

    double take_float() {
        const Token t = take("a number");
        double v = 0;
        const auto [ptr, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), v);
        if (ec != std::errc() || ptr != t.text.data() + t.text.size())
            fail("malformed number '" + t.text + "'", t.pos);
        return v;
    }

    int take_int() {
        const Token t = take("an integer");
        int v = 0;
        const auto [ptr, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), v);
        if (ec != std::errc() || ptr != t.text.data() + t.text.size())
            fail("malformed number '" + t.text + "'", t.pos);
        return v;
    }

    void take_keyword(const char* kw) {
        const Token t = take(kw);
        if (t.text != kw) fail("expected '" + std::string(kw) + "', got '" + t.text + "'", t.pos);
    }

    EditCommand parse_command() {
        const Token head = take("a command");
        if (head.text == "scale") {
            ScaleCmd cmd;
            cmd.cls = take_class();
            if (!done() && peek().text == "x") {
                ++cursor_;
                cmd.sx = take_float();
                if (!(cmd.sx > 0.0 && cmd.sx <= 8.0)) fail("scale factor outside (0, 8]", last_pos_);
            }
            if (!done() && peek().text == "y") {
                ++cursor_;
                cmd.sy = take_float();
                if (!(cmd.sy > 0.0 && cmd.sy <= 8.0)) fail("scale factor outside (0, 8]", last_pos_);
            }
            return cmd;
        }
        if (head.text == "translate") {
            TranslateCmd cmd;
            cmd.cls = take_class();
            take_keyword("dx");
            cmd.dx = take_int();
            take_keyword("dy");
            cmd.dy = take_int();
            return cmd;
        }
        if (head.text == "rotate") {
            RotateCmd cmd;
            cmd.cls = take_class();
            cmd.degrees = take_float();
            if (!(std::fabs(cmd.degrees) <= 180.0)) fail("rotation outside [-180, 180] degrees", last_pos_);
            take_keyword("deg");
            return cmd;
        }
        fail("unknown command '" + head.text + "'", head.pos);
    }

    std::vector<Token> tokens_;
    size_t cursor_ = 0;
    size_t end_pos_;
    size_t last_pos_ = 1;
};

std::string format_number(double v) {
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace

void EditProgram::validate() const {
    if (commands.empty()) throw Error("edit program: empty program at position 1");
    for (const EditCommand& cmd : commands) {
        if (const auto* s = std::get_if<ScaleCmd>(&cmd)) {
            if (!(s->sx > 0.0 && s->sx <= 8.0) || !(s->sy > 0.0 && s->sy <= 8.0))
                throw Error("edit program: scale factors must lie in (0, 8]");
        } else if (const auto* r = std::get_if<RotateCmd>(&cmd)) {
            if (!(std::fabs(r->degrees) <= 180.0))
                throw Error("edit program: rotation must lie in [-180, 180] degrees");
        }
    }
}

EditProgram parse_edit(const std::string& text) { return Parser(text).parse(); }

std::string print_edit(const EditProgram& program) {
    std::string out;
    for (size_t i = 0; i < program.commands.size(); ++i) {
        if (i) out += "; ";
        const EditCommand& cmd = program.commands[i];
        if (const auto* s = std::get_if<ScaleCmd>(&cmd)) {
            out += "scale ";
            out += class_name(s->cls);
            out += " x " + format_number(s->sx) + " y " + format_number(s->sy);
        } else if (const auto* t = std::get_if<TranslateCmd>(&cmd)) {
            out += "translate ";
            out += class_name(t->cls);
            out += " dx " + std::to_string(t->dx) + " dy " + std::to_string(t->dy);
        } else if (const auto* r = std::get_if<RotateCmd>(&cmd)) {
            out += "rotate ";
            out += class_name(r->cls);
            out += " " + format_number(r->degrees) + " deg";
        }
    }
    return out;
}

BBox bounding_box(const LabelMask& mask, ClassId cls) {
    const uint8_t target = static_cast<uint8_t>(cls);
    BBox box{mask.height, mask.width, -1, -1};
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(y, x) == target) {
                box.top = std::min(box.top, y);
                box.left = std::min(box.left, x);
                box.bottom = std::max(box.bottom, y);
                box.right = std::max(box.right, x);
            }
    if (box.bottom < 0) throw Error(std::string("edit: class '") + class_name(cls) + "' not present in mask");
    return box;
}

namespace {

// Fills all pixels of the target class with the label of the nearest
// other-class pixel (multi-source BFS, 4-connected). A single-class mask has
// no sources; those pixels become background.
void fill_vacated(LabelMask& mask, uint8_t target) {
    std::deque<int> queue;
    const int w = mask.width, h = mask.height;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask.at(y, x) != target) queue.push_back(y * w + x);
    if (queue.empty()) {
        std::fill(mask.data.begin(), mask.data.end(), static_cast<uint8_t>(ClassId::Background));
        return;
    }
    std::vector<uint8_t> visited(mask.data.size(), 0);
    for (int p : queue) visited[p] = 1;
    const int dx[4] = {0, 0, -1, 1}, dy[4] = {-1, 1, 0, 0};
    while (!queue.empty()) {
        const int p = queue.front();
        queue.pop_front();
        const int y = p / w, x = p % w;
        for (int k = 0; k < 4; ++k) {
            const int ny = y + dy[k], nx = x + dx[k];
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const int q = ny * w + nx;
            if (visited[q]) continue;
            visited[q] = 1;
            mask.data[q] = mask.data[p];
            queue.push_back(q);
        }
    }
}

struct InverseMap {
    // dst -> src about the center (cx, cy): affine with 2x2 linear part.
    double cx = 0, cy = 0;
    double m00 = 1, m01 = 0, m10 = 0, m11 = 1;
    double tx = 0, ty = 0;  // extra translation applied to dst before mapping

    void map(double x, double y, double& sx, double& sy) const {
        const double rx = x - tx - cx, ry = y - ty - cy;
        sx = cx + m00 * rx + m01 * ry;
        sy = cy + m10 * rx + m11 * ry;
    }
};

}  // namespace

LabelMask apply_command(const LabelMask& mask, const EditCommand& cmd) {
    mask.validate();
    const ClassId cls = std::visit([](const auto& c) { return c.cls; }, cmd);
    const uint8_t target = static_cast<uint8_t>(cls);
    const BBox box = bounding_box(mask, cls);

    InverseMap inv;
    inv.cx = 0.5 * (box.left + box.right);
    inv.cy = 0.5 * (box.top + box.bottom);
    if (const auto* s = std::get_if<ScaleCmd>(&cmd)) {
        if (!(s->sx > 0.0 && s->sx <= 8.0) || !(s->sy > 0.0 && s->sy <= 8.0))
            throw Error("edit: scale factors must lie in (0, 8]");
        inv.m00 = 1.0 / s->sx;
        inv.m11 = 1.0 / s->sy;
    } else if (const auto* t = std::get_if<TranslateCmd>(&cmd)) {
        inv.tx = t->dx;
        inv.ty = t->dy;
    } else if (const auto* r = std::get_if<RotateCmd>(&cmd)) {
        if (!(std::fabs(r->degrees) <= 180.0)) throw Error("edit: rotation must lie in [-180, 180] degrees");
        const double a = -r->degrees * M_PI / 180.0;
        inv.m00 = std::cos(a);
        inv.m01 = -std::sin(a);
        inv.m10 = std::sin(a);
        inv.m11 = std::cos(a);
    }

    LabelMask out = mask;
    fill_vacated(out, target);

    bool any = false;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            double sx, sy;
            inv.map(x, y, sx, sy);
            const int ix = static_cast<int>(std::lround(sx));
            const int iy = static_cast<int>(std::lround(sy));
            if (ix < 0 || ix >= mask.width || iy < 0 || iy >= mask.height) continue;
            if (mask.at(iy, ix) == target) {
                out.at(y, x) = target;
                any = true;
            }
        }
    if (!any) throw Error(std::string("edit: transformed '") + class_name(cls) + "' lies fully outside the canvas");
    return out;
}

LabelMask apply_program(const LabelMask& mask, const EditProgram& program) {
    program.validate();
    LabelMask out = mask;
    for (const EditCommand& cmd : program.commands) out = apply_command(out, cmd);
    return out;
}

PixelRegion PixelRegion::from_class(const LabelMask& mask, ClassId cls) {
    PixelRegion region(mask.width, mask.height);
    const uint8_t target = static_cast<uint8_t>(cls);
    for (size_t i = 0; i < mask.data.size(); ++i) region.inside[i] = mask.data[i] == target ? 1 : 0;
    return region;
}

PixelRegion PixelRegion::rectangle(int w, int h, int x0, int y0, int x1, int y1) {
    if (x0 > x1 || y0 > y1 || x0 < 0 || y0 < 0 || x1 >= w || y1 >= h)
        throw Error("pixel region: rectangle corners out of order or out of canvas");
    PixelRegion region(w, h);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) region.inside[static_cast<size_t>(y) * w + x] = 1;
    return region;
}

size_t PixelRegion::count() const {
    size_t n = 0;
    for (uint8_t v : inside) n += v;
    return n;
}

void BlendProblem::validate() const {
    if (width < 3 || height < 3) throw Error("blend problem: canvas too small");
    const size_t area = static_cast<size_t>(width) * height;
    if (omega.size() != area || boundary.size() != area || guide.size() != 4 * area)
        throw Error("blend problem: plane sizes do not match the canvas");
    size_t interior = 0;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            if (!omega[static_cast<size_t>(y) * width + x]) continue;
            ++interior;
            if (y == 0 || y == height - 1 || x == 0 || x == width - 1)
                throw Error("blend problem: interior region touches the canvas border");
        }
    if (interior == 0) throw Error("blend problem: empty interior region");
    for (float v : boundary)
        if (!std::isfinite(v)) throw Error("blend problem: non-finite boundary value");
    for (float v : guide)
        if (!std::isfinite(v)) throw Error("blend problem: non-finite guidance value");
}

GrayImage solve_poisson(const BlendProblem& problem, double tol) {
    problem.validate();
    if (!(tol > 0.0)) throw Error("poisson: tolerance must be positive");
    const int w = problem.width, h = problem.height;
    const size_t area = static_cast<size_t>(w) * h;

    std::vector<int> index(area, -1);
    std::vector<int> pixels;
    for (size_t p = 0; p < area; ++p)
        if (problem.omega[p]) {
            index[p] = static_cast<int>(pixels.size());
            pixels.push_back(static_cast<int>(p));
        }
    const size_t n = pixels.size();

    // dir planes: up, down, left, right
    const int doff[4] = {-w, w, -1, 1};

    std::vector<double> rhs(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        const int p = pixels[i];
        double b = 0.0;
        for (int k = 0; k < 4; ++k) {
            const int q = p + doff[k];
            if (index[q] < 0) b += problem.boundary[q];
            b += problem.guide[static_cast<size_t>(k) * area + p];
        }
        rhs[i] = b;
    }

    auto apply = [&](const std::vector<double>& x, std::vector<double>& out) {
        for (size_t i = 0; i < n; ++i) {
            const int p = pixels[i];
            double s = 4.0 * x[i];
            for (int k = 0; k < 4; ++k) {
                const int j = index[p + doff[k]];
                if (j >= 0) s -= x[j];
            }
            out[i] = s;
        }
    };

    std::vector<double> x(n, 0.0), r = rhs, d = rhs, ad(n);
    double rr = 0.0, bnorm = 0.0;
    for (size_t i = 0; i < n; ++i) {
        rr += r[i] * r[i];
        bnorm += rhs[i] * rhs[i];
    }
    bnorm = std::sqrt(bnorm);
    const double stop = tol * (1.0 + bnorm);
    const size_t max_iters = 10 * n;
    size_t iter = 0;
    while (true) {
        if (std::sqrt(rr) <= stop) {
            // The recurrence residual drifts below the attainable accuracy;
            // only the recomputed one decides convergence.
            apply(x, ad);
            double true_rr = 0.0;
            for (size_t i = 0; i < n; ++i) {
                r[i] = rhs[i] - ad[i];
                true_rr += r[i] * r[i];
            }
            if (std::sqrt(true_rr) <= stop) break;
            d = r;
            rr = true_rr;
        }
        if (iter++ >= max_iters) {
            std::ostringstream msg;
            msg << "poisson: no convergence within " << max_iters << " iterations (residual " << std::sqrt(rr)
                << ", target " << stop << ")";
            throw Error(msg.str());
        }
        apply(d, ad);
        double dad = 0.0;
        for (size_t i = 0; i < n; ++i) dad += d[i] * ad[i];
        if (!(dad > 0.0)) throw Error("poisson: curvature term not positive, system is not positive definite");
        const double alpha = rr / dad;
        double rr_next = 0.0;
        for (size_t i = 0; i < n; ++i) {
            x[i] += alpha * d[i];
            r[i] -= alpha * ad[i];
            rr_next += r[i] * r[i];
        }
        const double beta = rr_next / rr;
        for (size_t i = 0; i < n; ++i) d[i] = r[i] + beta * d[i];
        rr = rr_next;
    }

    GrayImage out(w, h);
    for (size_t p = 0; p < area; ++p) out.data[p] = problem.boundary[p];
    for (size_t i = 0; i < n; ++i) out.data[pixels[i]] = static_cast<float>(x[i]);
    return out;
}

GrayImage blend_texture(const GrayImage& src, const GrayImage& dst, const PixelRegion& region, double tol) {
    if (!src.same_shape(dst)) throw Error("blend: source and destination shapes differ");
    if (region.width != src.width || region.height != src.height)
        throw Error("blend: region canvas does not match the images");
    const int w = src.width, h = src.height;
    const size_t area = static_cast<size_t>(w) * h;

    BlendProblem problem;
    problem.width = w;
    problem.height = h;
    problem.omega.assign(area, 0);
    size_t interior = 0;
    for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
            const size_t p = static_cast<size_t>(y) * w + x;
            if (region.inside[p]) {
                problem.omega[p] = 1;
                ++interior;
            }
        }
    GrayImage out = dst;
    if (interior == 0) return out;

    problem.boundary.assign(dst.data.begin(), dst.data.end());
    problem.guide.assign(4 * area, 0.f);
    const int doff[4] = {-w, w, -1, 1};
    for (size_t p = 0; p < area; ++p) {
        if (!problem.omega[p]) continue;
        for (int k = 0; k < 4; ++k)
            problem.guide[static_cast<size_t>(k) * area + p] = src.data[p] - src.data[p + doff[k]];
    }

    const GrayImage solved = solve_poisson(problem, tol);
    for (size_t p = 0; p < area; ++p)
        if (problem.omega[p]) out.data[p] = std::clamp(solved.data[p], 0.f, 1.f);
    return out;
}

}  // namespace csg
