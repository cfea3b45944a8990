#include "csg/metrics.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace csg {

namespace {

constexpr int kRasterSize = 512;

void check_embedding_set(const std::vector<Embedding>& set, const char* label) {
    if (set.empty()) throw Error(std::string("metrics: empty ") + label + " embedding set");
    const size_t dim = set.front().size();
    if (dim == 0) throw Error(std::string("metrics: zero-length ") + label + " embedding");
    for (const Embedding& e : set) {
        if (e.size() != dim) throw Error(std::string("metrics: ragged ") + label + " embedding set");
        for (float v : e)
            if (!std::isfinite(v)) throw Error(std::string("metrics: non-finite value in ") + label + " embedding");
    }
}

std::vector<double> column(const std::vector<Embedding>& set, size_t d) {
    std::vector<double> out;
    out.reserve(set.size());
    for (const Embedding& e : set) out.push_back(static_cast<double>(e[d]));
    return out;
}

Eigen::MatrixXd cov_matrix(const MomentStats& m) {
    Eigen::MatrixXd c(m.dim, m.dim);
    for (int i = 0; i < m.dim; ++i)
        for (int j = 0; j < m.dim; ++j) c(i, j) = m.cov[static_cast<size_t>(i) * m.dim + j];
    return 0.5 * (c + c.transpose());
}

// Eigenvalues of a covariance-like matrix, clamped at zero. Negative values
// beyond roundoff scale mean the input was not a covariance at all.
Eigen::VectorXd psd_eigenvalues(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es, const char* what) {
    Eigen::VectorXd ev = es.eigenvalues();
    const double floor = -1e-6 * std::max(1.0, std::abs(ev.maxCoeff()));
    for (int i = 0; i < ev.size(); ++i) {
        if (ev[i] < floor)
            throw Error(std::string("metrics: ") + what + " has negative eigenvalue " + std::to_string(ev[i]));
        if (ev[i] < 0.0) ev[i] = 0.0;
    }
    return ev;
}

double cross(const Point2& o, const Point2& a, const Point2& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

bool inside_convex(const std::vector<Point2>& hull, double x, double y) {
    const Point2 p{x, y};
    for (size_t i = 0; i < hull.size(); ++i) {
        const Point2& a = hull[i];
        const Point2& b = hull[(i + 1) % hull.size()];
        if (cross(a, b, p) < 0.0) return false;
    }
    return true;
}

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(12);
    os << v;
    return os.str();
}

}  // namespace

size_t embedding_length(const ConvStack& stack) {
    size_t channels = 0;
    for (const ConvStackLayer& layer : stack.layers) channels += static_cast<size_t>(layer.out_c);
    return 2 * channels;
}

Embedding embed_image(const GrayImage& img, const ConvStack& stack) {
    const ActivationStats stats = extract_activation_stats(img, stack);
    Embedding out;
    out.reserve(stats.mean.size() * 2);
    for (float s2 : stats.second_moment) out.push_back(std::sqrt(std::max(0.0f, s2)));
    out.insert(out.end(), stats.mean.begin(), stats.mean.end());
    for (float v : out)
        if (!std::isfinite(v)) throw Error("metrics: non-finite embedding");
    return out;
}

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt, ClassId cls) {
    if (!pred.same_shape(gt)) throw Error("confusion: shape mismatch between prediction and ground truth");
    const uint8_t c = static_cast<uint8_t>(cls);
    ConfusionCounts out;
    for (size_t i = 0; i < gt.data.size(); ++i) {
        const bool p = pred.data[i] == c;
        const bool g = gt.data[i] == c;
        if (p && g)
            ++out.tp;
        else if (p)
            ++out.fp;
        else if (g)
            ++out.fn;
        else
            ++out.tn;
    }
    return out;
}

SegScores seg_scores(const ConfusionCounts& c) {
    if (c.tp < 0 || c.fp < 0 || c.fn < 0 || c.tn < 0) throw Error("seg_scores: negative count");
    SegScores s;
    if (c.tp + c.fp + c.fn == 0) {
        s.dsc = s.iou = s.ppv = s.tpr = s.f1 = 1.0;
        s.empty_union = true;
        return s;
    }
    const double tp = static_cast<double>(c.tp);
    s.dsc = 2.0 * tp / static_cast<double>(2 * c.tp + c.fp + c.fn);
    s.iou = tp / static_cast<double>(c.tp + c.fp + c.fn);
    if (c.tp + c.fp == 0) {
        s.ppv = 0.0;
        s.zero_denominator = true;
    } else {
        s.ppv = tp / static_cast<double>(c.tp + c.fp);
    }
    if (c.tp + c.fn == 0) {
        s.tpr = 0.0;
        s.zero_denominator = true;
    } else {
        s.tpr = tp / static_cast<double>(c.tp + c.fn);
    }
    if (s.ppv + s.tpr == 0.0) {
        s.f1 = 0.0;
        s.zero_denominator = true;
    } else {
        s.f1 = 2.0 * s.ppv * s.tpr / (s.ppv + s.tpr);
    }
    return s;
}

double ks_statistic(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw Error("ks_statistic: empty sample set");
    std::vector<double> sa(a), sb(b);
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    const double na = static_cast<double>(sa.size());
    const double nb = static_cast<double>(sb.size());
    size_t i = 0, j = 0;
    double d = 0.0;
    while (i < sa.size() || j < sb.size()) {
        double v;
        if (j >= sb.size() || (i < sa.size() && sa[i] <= sb[j]))
            v = sa[i];
        else
            v = sb[j];
        while (i < sa.size() && sa[i] == v) ++i;
        while (j < sb.size() && sb[j] == v) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    return d;
}

double kl_between_histograms(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size() || p.empty()) throw Error("kl_between_histograms: bin count mismatch");
    double psum = 0.0, qsum = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0 || !std::isfinite(p[i]) || !std::isfinite(q[i]))
            throw Error("kl_between_histograms: invalid bin mass");
        psum += p[i];
        qsum += q[i];
    }
    if (psum <= 0.0 || qsum <= 0.0) throw Error("kl_between_histograms: empty histogram");

    const double eps = 1e-9;
    const double pnorm = 1.0 + eps * static_cast<double>(p.size());
    double kl = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double pi = (p[i] / psum + eps) / pnorm;
        const double qi = (q[i] / qsum + eps) / pnorm;
        kl += pi * std::log(pi / qi);
    }
    return kl;
}

double kl_divergence(const std::vector<double>& p_samples, const std::vector<double>& q_samples, int bins) {
    if (bins < 2) throw Error("kl_divergence: need at least 2 bins");
    if (p_samples.empty() || q_samples.empty()) throw Error("kl_divergence: empty sample set");

    double lo = p_samples.front(), hi = p_samples.front();
    for (double v : p_samples) {
        if (!std::isfinite(v)) throw Error("kl_divergence: non-finite sample");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : q_samples) {
        if (!std::isfinite(v)) throw Error("kl_divergence: non-finite sample");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }

    std::vector<double> p(static_cast<size_t>(bins), 0.0), q(static_cast<size_t>(bins), 0.0);
    const double span = hi - lo;
    auto bin_of = [&](double v) {
        if (span <= 0.0) return 0;
        int b = static_cast<int>((v - lo) / span * bins);
        return std::clamp(b, 0, bins - 1);
    };
    for (double v : p_samples) p[static_cast<size_t>(bin_of(v))] += 1.0;
    for (double v : q_samples) q[static_cast<size_t>(bin_of(v))] += 1.0;
    return kl_between_histograms(p, q);
}

MomentStats embedding_moments(const std::vector<Embedding>& set) {
    check_embedding_set(set, "moment");
    const size_t n = set.size();
    if (n < 2) throw Error("embedding_moments: need at least 2 samples");
    const size_t dim = set.front().size();

    MomentStats m;
    m.dim = static_cast<int>(dim);
    m.mean.assign(dim, 0.0);
    m.cov.assign(dim * dim, 0.0);
    for (const Embedding& e : set)
        for (size_t d = 0; d < dim; ++d) m.mean[d] += static_cast<double>(e[d]);
    for (size_t d = 0; d < dim; ++d) m.mean[d] /= static_cast<double>(n);

    std::vector<double> centered(dim);
    for (const Embedding& e : set) {
        for (size_t d = 0; d < dim; ++d) centered[d] = static_cast<double>(e[d]) - m.mean[d];
        for (size_t i = 0; i < dim; ++i)
            for (size_t j = i; j < dim; ++j) m.cov[i * dim + j] += centered[i] * centered[j];
    }
    for (size_t i = 0; i < dim; ++i)
        for (size_t j = i; j < dim; ++j) {
            m.cov[i * dim + j] /= static_cast<double>(n - 1);
            m.cov[j * dim + i] = m.cov[i * dim + j];
        }
    return m;
}

double frechet_from_moments(const MomentStats& a, const MomentStats& b) {
    if (a.dim <= 0 || a.dim != b.dim) throw Error("frechet: moment dimension mismatch");
    if (a.mean.size() != static_cast<size_t>(a.dim) || b.mean.size() != static_cast<size_t>(b.dim) ||
        a.cov.size() != static_cast<size_t>(a.dim) * a.dim || b.cov.size() != static_cast<size_t>(b.dim) * b.dim)
        throw Error("frechet: malformed moments");

    const Eigen::MatrixXd ca = cov_matrix(a);
    const Eigen::MatrixXd cb = cov_matrix(b);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(ca);
    if (es_a.info() != Eigen::Success) throw Error("frechet: eigendecomposition failed");
    const Eigen::VectorXd eva = psd_eigenvalues(es_a, "covariance");
    const Eigen::MatrixXd sqrt_a =
        es_a.eigenvectors() * eva.cwiseSqrt().asDiagonal() * es_a.eigenvectors().transpose();

    Eigen::MatrixXd mid = sqrt_a * cb * sqrt_a;
    mid = 0.5 * (mid + mid.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m(mid);
    if (es_m.info() != Eigen::Success) throw Error("frechet: eigendecomposition failed");
    const Eigen::VectorXd evm = psd_eigenvalues(es_m, "covariance product");

    double mean_term = 0.0;
    for (int d = 0; d < a.dim; ++d) {
        const double diff = a.mean[static_cast<size_t>(d)] - b.mean[static_cast<size_t>(d)];
        mean_term += diff * diff;
    }
    const double d2 = mean_term + ca.trace() + cb.trace() - 2.0 * evm.cwiseSqrt().sum();
    if (d2 < 0.0) {
        const double scale = std::max(1.0, ca.trace() + cb.trace());
        if (d2 < -1e-6 * scale) throw Error("frechet: negative squared distance " + std::to_string(d2));
        return 0.0;
    }
    return d2;
}

double frechet_distance(const std::vector<Embedding>& real_set, const std::vector<Embedding>& synth_set,
                        int guard_divisor) {
    check_embedding_set(real_set, "real");
    check_embedding_set(synth_set, "synthetic");
    if (guard_divisor < 1) throw Error("frechet: guard divisor must be positive");
    if (real_set.front().size() != synth_set.front().size())
        throw Error("frechet: embedding dimension mismatch between sets");
    const size_t dim = real_set.front().size();
    const size_t needed = dim / static_cast<size_t>(guard_divisor);
    if (real_set.size() <= needed || synth_set.size() <= needed)
        throw Error("frechet: set too small for a stable covariance (need more than " + std::to_string(needed) +
                    " samples for dimension " + std::to_string(dim) + ")");
    return frechet_from_moments(embedding_moments(real_set), embedding_moments(synth_set));
}

void project_union_2d(const std::vector<Embedding>& real_set, const std::vector<Embedding>& synth_set,
                      std::vector<Point2>& real_out, std::vector<Point2>& synth_out) {
    check_embedding_set(real_set, "real");
    check_embedding_set(synth_set, "synthetic");
    const size_t dim = real_set.front().size();
    if (synth_set.front().size() != dim) throw Error("projection: embedding dimension mismatch between sets");
    if (dim < 2) throw Error("projection: embedding dimension must be at least 2");

    const size_t n = real_set.size() + synth_set.size();
    Eigen::MatrixXd x(n, dim);
    size_t row = 0;
    for (const Embedding& e : real_set) {
        for (size_t d = 0; d < dim; ++d) x(row, d) = static_cast<double>(e[d]);
        ++row;
    }
    for (const Embedding& e : synth_set) {
        for (size_t d = 0; d < dim; ++d) x(row, d) = static_cast<double>(e[d]);
        ++row;
    }
    const Eigen::RowVectorXd mean = x.colwise().mean();
    x.rowwise() -= mean;
    const Eigen::MatrixXd cov = x.transpose() * x / std::max<double>(1.0, static_cast<double>(n - 1));

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw Error("projection: eigendecomposition failed");
    // Eigen orders ascending; the last two columns span the top-variance plane.
    Eigen::VectorXd pc1 = es.eigenvectors().col(static_cast<int>(dim) - 1);
    Eigen::VectorXd pc2 = es.eigenvectors().col(static_cast<int>(dim) - 2);
    // Fix the sign so a common rotation of the inputs cannot flip the plot.
    auto orient = [](Eigen::VectorXd& v) {
        int arg = 0;
        for (int i = 1; i < v.size(); ++i)
            if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
        if (v[arg] < 0.0) v = -v;
    };
    orient(pc1);
    orient(pc2);

    real_out.clear();
    synth_out.clear();
    for (size_t i = 0; i < n; ++i) {
        const Point2 p{x.row(i).dot(pc1), x.row(i).dot(pc2)};
        if (i < real_set.size())
            real_out.push_back(p);
        else
            synth_out.push_back(p);
    }
}

std::vector<Point2> convex_hull(std::vector<Point2> pts) {
    std::sort(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) {
        return a.x < b.x || (a.x == b.x && a.y < b.y);
    });
    pts.erase(std::unique(pts.begin(), pts.end(),
                          [](const Point2& a, const Point2& b) { return a.x == b.x && a.y == b.y; }),
              pts.end());
    const size_t n = pts.size();
    if (n < 3) return pts;

    std::vector<Point2> hull(2 * n);
    size_t k = 0;
    for (size_t i = 0; i < n; ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
        hull[k++] = pts[i];
    }
    for (size_t i = n - 1, lower = k + 1; i-- > 0;) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

double polygon_area(const std::vector<Point2>& poly) {
    if (poly.size() < 3) return 0.0;
    double s = 0.0;
    for (size_t i = 0; i < poly.size(); ++i) {
        const Point2& a = poly[i];
        const Point2& b = poly[(i + 1) % poly.size()];
        s += a.x * b.y - b.x * a.y;
    }
    return 0.5 * std::abs(s);
}

SegScores contour_overlap(const std::vector<Embedding>& real_set, const std::vector<Embedding>& synth_set) {
    if (real_set.size() < 3 || synth_set.size() < 3)
        throw Error("contour_overlap: need at least 3 points per set");

    std::vector<Point2> rp, sp;
    project_union_2d(real_set, synth_set, rp, sp);

    const std::vector<Point2> rh = convex_hull(rp);
    const std::vector<Point2> sh = convex_hull(sp);
    // A collinear set keeps a sliver of roundoff area after projection, so
    // degeneracy is area relative to the hull's own extent.
    auto degenerate = [](const std::vector<Point2>& hull) {
        if (hull.size() < 3) return true;
        double xmin = hull.front().x, xmax = xmin, ymin = hull.front().y, ymax = ymin;
        for (const Point2& p : hull) {
            xmin = std::min(xmin, p.x);
            xmax = std::max(xmax, p.x);
            ymin = std::min(ymin, p.y);
            ymax = std::max(ymax, p.y);
        }
        const double scale = std::max({xmax - xmin, ymax - ymin, 1e-300});
        return polygon_area(hull) <= 1e-9 * scale * scale;
    };
    if (degenerate(rh)) throw Error("contour_overlap: real set is degenerate (collinear after projection)");
    if (degenerate(sh)) throw Error("contour_overlap: synthetic set is degenerate (collinear after projection)");

    double xmin = rh.front().x, xmax = xmin, ymin = rh.front().y, ymax = ymin;
    for (const std::vector<Point2>* hull : {&rh, &sh})
        for (const Point2& p : *hull) {
            xmin = std::min(xmin, p.x);
            xmax = std::max(xmax, p.x);
            ymin = std::min(ymin, p.y);
            ymax = std::max(ymax, p.y);
        }
    const double dx = (xmax - xmin) / kRasterSize;
    const double dy = (ymax - ymin) / kRasterSize;

    ConfusionCounts c;
    for (int iy = 0; iy < kRasterSize; ++iy) {
        const double y = ymin + (iy + 0.5) * dy;
        for (int ix = 0; ix < kRasterSize; ++ix) {
            const double x = xmin + (ix + 0.5) * dx;
            const bool g = inside_convex(rh, x, y);
            const bool p = inside_convex(sh, x, y);
            if (p && g)
                ++c.tp;
            else if (p)
                ++c.fp;
            else if (g)
                ++c.fn;
            else
                ++c.tn;
        }
    }
    return seg_scores(c);
}

QualityReport quality_report(const std::vector<Embedding>& real_set, const std::vector<Embedding>& synth_set,
                             int bins, int guard_divisor) {
    check_embedding_set(real_set, "real");
    check_embedding_set(synth_set, "synthetic");
    const size_t dim = real_set.front().size();
    if (synth_set.front().size() != dim) throw Error("quality_report: embedding dimension mismatch between sets");

    QualityReport rep;
    double kst_sum = 0.0, kld_sum = 0.0;
    for (size_t d = 0; d < dim; ++d) {
        const std::vector<double> rc = column(real_set, d);
        const std::vector<double> sc = column(synth_set, d);
        kst_sum += ks_statistic(rc, sc);
        kld_sum += kl_divergence(rc, sc, bins);
    }
    rep.kst = kst_sum / static_cast<double>(dim);
    rep.kld = kld_sum / static_cast<double>(dim);
    rep.frechet = frechet_distance(real_set, synth_set, guard_divisor);
    rep.contour = contour_overlap(real_set, synth_set);
    return rep;
}

void write_quality_report_json(const QualityReport& report, const std::filesystem::path& path) {
    nlohmann::json j;
    j["kst"] = report.kst;
    j["kld"] = report.kld;
    j["frechet"] = report.frechet;
    j["contour"] = {{"iou", report.contour.iou},
                    {"ppv", report.contour.ppv},
                    {"tpr", report.contour.tpr},
                    {"f1", report.contour.f1}};
    std::ofstream out(path);
    if (!out) throw Error("cannot write quality report: " + path.string());
    out << j.dump(2) << '\n';
}

void write_quality_report_csv(const QualityReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write quality report: " + path.string());
    out << "metric,value\n";
    out << "kst," << format_double(report.kst) << '\n';
    out << "kld," << format_double(report.kld) << '\n';
    out << "frechet," << format_double(report.frechet) << '\n';
    out << "contour_iou," << format_double(report.contour.iou) << '\n';
    out << "contour_ppv," << format_double(report.contour.ppv) << '\n';
    out << "contour_tpr," << format_double(report.contour.tpr) << '\n';
    out << "contour_f1," << format_double(report.contour.f1) << '\n';
}

void write_projection_svg(const std::vector<Embedding>& real_set, const std::vector<Embedding>& synth_set,
                          const std::filesystem::path& path) {
    std::vector<Point2> rp, sp;
    project_union_2d(real_set, synth_set, rp, sp);
    const std::vector<Point2> rh = convex_hull(rp);
    const std::vector<Point2> sh = convex_hull(sp);

    double xmin = rp.front().x, xmax = xmin, ymin = rp.front().y, ymax = ymin;
    for (const std::vector<Point2>* pts : {&rp, &sp})
        for (const Point2& p : *pts) {
            xmin = std::min(xmin, p.x);
            xmax = std::max(xmax, p.x);
            ymin = std::min(ymin, p.y);
            ymax = std::max(ymax, p.y);
        }
    const double span_x = std::max(xmax - xmin, 1e-12);
    const double span_y = std::max(ymax - ymin, 1e-12);
    const double view = 640.0, margin = 40.0;
    auto px = [&](double x) { return margin + (x - xmin) / span_x * (view - 2 * margin); };
    auto py = [&](double y) { return view - margin - (y - ymin) / span_y * (view - 2 * margin); };

    std::ofstream out(path);
    if (!out) throw Error("cannot write projection figure: " + path.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << view << "\" height=\"" << view
        << "\" viewBox=\"0 0 " << view << " " << view << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    auto polygon = [&](const std::vector<Point2>& hull, const char* color) {
        if (hull.size() < 3) return;
        out << "<polygon points=\"";
        for (const Point2& p : hull) out << format_double(px(p.x)) << ',' << format_double(py(p.y)) << ' ';
        out << "\" fill=\"" << color << "\" fill-opacity=\"0.15\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    };
    polygon(rh, "#1f6fb2");
    polygon(sh, "#c0392b");
    for (const Point2& p : rp)
        out << "<circle cx=\"" << format_double(px(p.x)) << "\" cy=\"" << format_double(py(p.y))
            << "\" r=\"3\" fill=\"#1f6fb2\"/>\n";
    for (const Point2& p : sp)
        out << "<circle cx=\"" << format_double(px(p.x)) << "\" cy=\"" << format_double(py(p.y))
            << "\" r=\"3\" fill=\"#c0392b\"/>\n";
    out << "<text x=\"" << margin << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" fill=\"#1f6fb2\">"
        << "real (" << rp.size() << ")</text>\n";
    out << "<text x=\"" << margin << "\" y=\"42\" font-family=\"sans-serif\" font-size=\"14\" fill=\"#c0392b\">"
        << "synthetic (" << sp.size() << ")</text>\n";
    out << "</svg>\n";
}

}  // namespace csg
