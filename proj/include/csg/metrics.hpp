#pragma once

#include "csg/image.hpp"
#include "csg/style.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace csg {

// Fixed-length per-image feature vector: per-channel RMS activation (the
// square root of the Gram diagonal) concatenated with per-channel activation
// means, for every layer of the frozen conv stack.
using Embedding = std::vector<float>;

size_t embedding_length(const ConvStack& stack);
Embedding embed_image(const GrayImage& img, const ConvStack& stack);

struct ConfusionCounts {
    int64_t tp = 0;
    int64_t fp = 0;
    int64_t fn = 0;
    int64_t tn = 0;

    int64_t total() const { return tp + fp + fn + tn; }
};

// One-vs-rest pixel counts for a single class.
ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt, ClassId cls);

// Overlap scores from confusion counts. Degenerate counts resolve by
// convention and are flagged: a class absent from both rasters scores 1.0
// (empty_union), and a ratio with an empty denominator scores 0.0
// (zero_denominator).
struct SegScores {
    double dsc = 0.0;
    double iou = 0.0;
    double ppv = 0.0;
    double tpr = 0.0;
    double f1 = 0.0;
    bool empty_union = false;
    bool zero_denominator = false;
};

SegScores seg_scores(const ConfusionCounts& c);

// Two-sample Kolmogorov-Smirnov statistic: sup over thresholds of the
// absolute ECDF gap.
double ks_statistic(const std::vector<double>& a, const std::vector<double>& b);

// KL divergence between two histograms over the same bins. Each bin gets an
// extra 1e-9 of mass and the histograms are renormalized, so empty bins never
// produce infinities.
double kl_between_histograms(const std::vector<double>& p, const std::vector<double>& q);

// Histogram both sample sets over their joint range, then compare.
double kl_divergence(const std::vector<double>& p_samples, const std::vector<double>& q_samples, int bins);

struct MomentStats {
    int dim = 0;
    std::vector<double> mean;  // dim
    std::vector<double> cov;   // dim*dim, row-major, unbiased estimate
};

MomentStats embedding_moments(const std::vector<Embedding>& set);

// Squared 2-Wasserstein distance between Gaussians with the given moments:
// |mu_a - mu_b|^2 + tr(Ca + Cb - 2*(Ca^1/2 Cb Ca^1/2)^1/2).
double frechet_from_moments(const MomentStats& a, const MomentStats& b);

// Fits moments to both embedding sets first. Each set must hold more than
// dim/guard_divisor points or the covariance estimate is refused.
double frechet_distance(const std::vector<Embedding>& real_set, const std::vector<Embedding>& synth_set,
                        int guard_divisor = 4);

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

// Project both sets to 2D along the top two principal axes of their union.
void project_union_2d(const std::vector<Embedding>& real_set, const std::vector<Embedding>& synth_set,
                      std::vector<Point2>& real_out, std::vector<Point2>& synth_out);

// Counterclockwise convex hull without a repeated closing vertex.
std::vector<Point2> convex_hull(std::vector<Point2> pts);

double polygon_area(const std::vector<Point2>& poly);

// Rasterize the convex hulls of both projected sets on a 512x512 grid over
// their joint bounding box and score the synthetic hull against the real one.
SegScores contour_overlap(const std::vector<Embedding>& real_set, const std::vector<Embedding>& synth_set);

struct QualityReport {
    double kst = 0.0;     // per-dimension KS statistics, averaged
    double kld = 0.0;     // per-dimension KL divergences, averaged
    double frechet = 0.0;
    SegScores contour;
};

QualityReport quality_report(const std::vector<Embedding>& real_set, const std::vector<Embedding>& synth_set,
                             int bins = 32, int guard_divisor = 4);

void write_quality_report_json(const QualityReport& report, const std::filesystem::path& path);
void write_quality_report_csv(const QualityReport& report, const std::filesystem::path& path);

// Scatter plot of the 2D projection with both hull polygons, for reports.
void write_projection_svg(const std::vector<Embedding>& real_set, const std::vector<Embedding>& synth_set,
                          const std::filesystem::path& path);

}  // namespace csg
