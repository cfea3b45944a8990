#include "csg/segval.hpp"

#include "csg/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

namespace csg {

namespace {

constexpr char kSegMagic[4] = {'C', 'S', 'G', 'S'};
constexpr uint32_t kSegVersion = 1;

void mean_sd(const std::vector<double>& xs, double& mean, double& sd) {
    const double n = static_cast<double>(xs.size());
    mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    sd = xs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
}

double validation_loss(const UNet<float>& net, const SegDataset& pool, const std::vector<size_t>& idx) {
    typename UNet<float>::Workspace ws;
    double total = 0.0;
    for (size_t i : idx) {
        const std::vector<const SegExample*> one = {&pool[i]};
        total += seg_loss_grad<float>(net, ws, one, nullptr);
    }
    return total / static_cast<double>(idx.size());
}

ArmSummary summarize(std::string name, std::vector<double> all, std::vector<double> ditf) {
    ArmSummary s;
    s.name = std::move(name);
    s.dsc_all = std::move(all);
    s.dsc_ditf = std::move(ditf);
    mean_sd(s.dsc_all, s.mean_all, s.sd_all);
    mean_sd(s.dsc_ditf, s.mean_ditf, s.sd_ditf);
    return s;
}

nlohmann::json arm_json(const ArmSummary& arm) {
    return {{"name", arm.name},       {"dsc_all", arm.dsc_all},   {"dsc_ditf", arm.dsc_ditf},
            {"mean_all", arm.mean_all}, {"sd_all", arm.sd_all},   {"mean_ditf", arm.mean_ditf},
            {"sd_ditf", arm.sd_ditf}};
}

ArmSummary arm_from_json(const nlohmann::json& j) {
    ArmSummary arm;
    arm.name = j.at("name").get<std::string>();
    arm.dsc_all = j.at("dsc_all").get<std::vector<double>>();
    arm.dsc_ditf = j.at("dsc_ditf").get<std::vector<double>>();
    arm.mean_all = j.at("mean_all").get<double>();
    arm.sd_all = j.at("sd_all").get<double>();
    arm.mean_ditf = j.at("mean_ditf").get<double>();
    arm.sd_ditf = j.at("sd_ditf").get<double>();
    return arm;
}

}  // namespace

Tensor<float> SegModel::scores(const GrayImage& img) const {
    Tensor<float> x(1, img.height, img.width);
    std::copy(img.data.begin(), img.data.end(), x.v.begin());
    return net.forward(x);
}

LabelMask SegModel::predict(const GrayImage& img) const {
    const Tensor<float> s = scores(img);
    LabelMask out(img.width, img.height);
    const size_t pixels = s.plane_size();
    for (size_t p = 0; p < pixels; ++p) {
        int best = 0;
        float best_score = s.v[p];
        for (int c = 1; c < s.c; ++c) {
            const float v = s.v[static_cast<size_t>(c) * pixels + p];
            if (v > best_score) {
                best_score = v;
                best = c;
            }
        }
        out.data[p] = static_cast<uint8_t>(best);
    }
    return out;
}

SegModel make_seg_model(const SegTrainOptions& opts) {
    if (opts.net_width < 1 || opts.net_levels < 1) throw Error("segval: bad net shape");
    NetConfig cfg;
    cfg.in_channels = 1;
    cfg.out_channels = kNumClasses;
    cfg.width = opts.net_width;
    cfg.levels = opts.net_levels;
    return SegModel{UNet<float>(cfg, derive_seed(opts.seed, "segval-init"))};
}

void save_seg_model(const SegModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("segval: cannot write checkpoint: " + path.string());
    out.write(kSegMagic, 4);
    auto w32 = [&](uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    w32(kSegVersion);
    w32(static_cast<uint32_t>(model.net.config().width));
    w32(static_cast<uint32_t>(model.net.config().levels));
    const uint64_t count = model.net.param_count();
    out.write(reinterpret_cast<const char*>(&count), 8);
    model.net.save_params(out);
    if (!out) throw Error("segval: checkpoint write failed: " + path.string());
}

SegModel load_seg_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("segval: cannot read checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kSegMagic, 4) != 0)
        throw Error("segval: not a segmentation checkpoint: " + path.string());
    auto r32 = [&]() {
        uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    if (r32() != kSegVersion) throw Error("segval: unsupported checkpoint version");
    SegTrainOptions opts;
    opts.net_width = static_cast<int>(r32());
    opts.net_levels = static_cast<int>(r32());
    uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), 8);
    SegModel model = make_seg_model(opts);
    if (count != model.net.param_count()) throw Error("segval: checkpoint parameter count mismatch");
    model.net.load_params(in);
    return model;
}

SegDataset load_split(const std::filesystem::path& manifest_path, const std::string& split) {
    const DatasetManifest manifest = read_manifest(manifest_path);
    const std::filesystem::path base = manifest_path.parent_path();
    SegDataset out;
    for (const ManifestEntry& e : manifest.entries) {
        if (!split.empty() && e.split != split) continue;
        SegExample ex;
        ex.id = e.id;
        ex.image = read_image_pgm(base / e.image_path);
        ex.mask = read_mask_pgm(base / e.mask_path);
        out.push_back(std::move(ex));
    }
    return out;
}

SegModel train_segmenter(const SegDataset& pool, const SegTrainOptions& opts, std::vector<double>* step_losses) {
    if (pool.empty()) throw Error("train_segmenter: empty training pool");
    if (opts.epochs < 0) throw Error("train_segmenter: negative epoch count");
    if (opts.batch_size < 1) throw Error("train_segmenter: batch size must be positive");
    if (opts.validation_fraction < 0.0 || opts.validation_fraction >= 1.0)
        throw Error("train_segmenter: validation fraction must lie in [0, 1)");

    SegModel model = make_seg_model(opts);
    if (opts.epochs == 0) return model;

    Rng rng(derive_seed(opts.seed, "segval-train"));
    std::vector<size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

    size_t val_count = static_cast<size_t>(std::llround(opts.validation_fraction * static_cast<double>(pool.size())));
    val_count = std::min(val_count, pool.size() - 1);  // at least one training image
    const std::vector<size_t> val_idx(order.begin(), order.begin() + static_cast<long>(val_count));
    std::vector<size_t> train_idx(order.begin() + static_cast<long>(val_count), order.end());

    UNet<float>& net = model.net;
    typename UNet<float>::Workspace ws;
    Adam<float> adam(net.param_count(), opts.lr);
    std::vector<float> grad(net.param_count());

    double best_val = val_idx.empty() ? 0.0 : validation_loss(net, pool, val_idx);
    std::vector<float> best_params = net.params();

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        for (size_t i = train_idx.size(); i > 1; --i)
            std::swap(train_idx[i - 1], train_idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
        for (size_t start = 0; start < train_idx.size(); start += static_cast<size_t>(opts.batch_size)) {
            std::vector<const SegExample*> batch;
            for (size_t i = start; i < std::min(train_idx.size(), start + static_cast<size_t>(opts.batch_size)); ++i)
                batch.push_back(&pool[train_idx[i]]);
            std::fill(grad.begin(), grad.end(), 0.0f);
            const double loss = seg_loss_grad(net, ws, batch, &grad);
            if (!std::isfinite(loss))
                throw Error("train_segmenter: non-finite loss at epoch " + std::to_string(epoch));
            adam.step(net.params(), grad);
            if (step_losses) step_losses->push_back(loss);
        }
        if (!val_idx.empty()) {
            const double val = validation_loss(net, pool, val_idx);
            if (!std::isfinite(val)) throw Error("train_segmenter: non-finite validation loss");
            if (val < best_val) {
                best_val = val;
                best_params = net.params();
            }
        } else {
            best_params = net.params();
        }
    }
    net.params() = best_params;
    return model;
}

std::vector<ClassId> default_eval_classes() {
    std::vector<ClassId> out;
    for (int c = 1; c < kNumClasses; ++c) out.push_back(static_cast<ClassId>(c));
    return out;
}

EvalResult evaluate_predictions(const std::vector<LabelMask>& preds, const SegDataset& test,
                                const std::vector<ClassId>& classes) {
    if (test.empty()) throw Error("evaluate: empty test set");
    if (preds.size() != test.size()) throw Error("evaluate: prediction count does not match test set");
    if (classes.empty()) throw Error("evaluate: no classes selected");

    EvalResult r;
    r.images = static_cast<int>(test.size());
    double sum_all = 0.0, sum_ditf = 0.0;
    for (size_t i = 0; i < test.size(); ++i) {
        for (ClassId cls : classes) {
            const SegScores s = seg_scores(confusion(preds[i], test[i].mask, cls));
            if (s.empty_union) continue;  // class absent on both sides carries no signal
            sum_all += s.dsc;
            ++r.scored_all;
            if (cls == ClassId::Ditf) {
                sum_ditf += s.dsc;
                ++r.scored_ditf;
            }
        }
    }
    r.mean_dsc_all = r.scored_all > 0 ? sum_all / r.scored_all : 0.0;
    r.mean_dsc_ditf = r.scored_ditf > 0 ? sum_ditf / r.scored_ditf : 0.0;
    return r;
}

EvalResult evaluate_segmenter(const SegModel& model, const SegDataset& test, const std::vector<ClassId>& classes) {
    std::vector<LabelMask> preds;
    preds.reserve(test.size());
    for (const SegExample& ex : test) preds.push_back(model.predict(ex.image));
    return evaluate_predictions(preds, test, classes);
}

ComparisonReport compare_arms(const ExperimentSpec& spec) {
    if (spec.seeds.size() < 3) throw Error("compare_arms: need at least 3 seeds");
    if (spec.eval_classes.empty()) throw Error("compare_arms: no evaluation classes");

    SegDataset real_train = load_split(spec.real_manifest, "train");
    const SegDataset test = load_split(spec.real_manifest, "test");
    if (test.empty()) throw Error("compare_arms: empty test set");
    if (real_train.empty()) throw Error("compare_arms: empty real training split");
    if (spec.max_real_train > 0 && real_train.size() > static_cast<size_t>(spec.max_real_train))
        real_train.resize(static_cast<size_t>(spec.max_real_train));

    SegDataset augmented_pool = real_train;
    if (spec.synthetic_manifest) {
        SegDataset synth = load_split(*spec.synthetic_manifest, "");
        if (synth.empty()) throw Error("compare_arms: synthetic manifest holds no examples");
        for (SegExample& ex : synth) augmented_pool.push_back(std::move(ex));
    }

    std::set<std::string> test_ids;
    for (const SegExample& ex : test) test_ids.insert(ex.id);
    for (const SegExample& ex : augmented_pool)
        if (test_ids.count(ex.id))
            throw Error("compare_arms: test image leaks into a training arm: " + ex.id);

    auto run_arm = [&](const SegDataset& pool, const char* name, std::vector<double>& all,
                       std::vector<double>& ditf) {
        for (uint64_t seed : spec.seeds) {
            SegTrainOptions opts;
            opts.epochs = spec.epochs;
            opts.batch_size = spec.batch_size;
            opts.lr = spec.lr;
            opts.net_width = spec.net_width;
            opts.net_levels = spec.net_levels;
            opts.seed = derive_seed(seed, name);
            const SegModel model = train_segmenter(pool, opts);
            const EvalResult r = evaluate_segmenter(model, test, spec.eval_classes);
            all.push_back(r.mean_dsc_all);
            ditf.push_back(r.mean_dsc_ditf);
        }
    };

    std::vector<double> control_all, control_ditf, aug_all, aug_ditf;
    run_arm(real_train, "segval-control", control_all, control_ditf);
    run_arm(augmented_pool, "segval-augmented", aug_all, aug_ditf);

    ComparisonReport rep;
    rep.control = summarize("control", std::move(control_all), std::move(control_ditf));
    rep.augmented = summarize("synthetic", std::move(aug_all), std::move(aug_ditf));
    rep.delta_all = rep.augmented.mean_all - rep.control.mean_all;
    rep.delta_ditf = rep.augmented.mean_ditf - rep.control.mean_ditf;
    rep.synthetic_improves = rep.delta_all > 0.0;
    rep.test_images = static_cast<int>(test.size());
    rep.seeds = static_cast<int>(spec.seeds.size());
    return rep;
}

void write_comparison_json(const ComparisonReport& report, const std::filesystem::path& path) {
    nlohmann::json j;
    j["seeds"] = report.seeds;
    j["test_images"] = report.test_images;
    j["control"] = arm_json(report.control);
    j["augmented"] = arm_json(report.augmented);
    j["delta_all"] = report.delta_all;
    j["delta_ditf"] = report.delta_ditf;
    j["synthetic_improves"] = report.synthetic_improves;
    std::ofstream out(path);
    if (!out) throw Error("segval: cannot write comparison report: " + path.string());
    out << j.dump(2) << '\n';
}

ComparisonReport read_comparison_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("segval: cannot read comparison report: " + path.string());
    nlohmann::json j;
    in >> j;
    ComparisonReport rep;
    rep.seeds = j.at("seeds").get<int>();
    rep.test_images = j.at("test_images").get<int>();
    rep.control = arm_from_json(j.at("control"));
    rep.augmented = arm_from_json(j.at("augmented"));
    rep.delta_all = j.at("delta_all").get<double>();
    rep.delta_ditf = j.at("delta_ditf").get<double>();
    rep.synthetic_improves = j.at("synthetic_improves").get<bool>();
    return rep;
}

void write_comparison_csv(const ComparisonReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("segval: cannot write comparison table: " + path.string());
    out << "arm,mean_dsc_all,sd_dsc_all,mean_dsc_ditf,sd_dsc_ditf,seeds\n";
    auto row = [&](const ArmSummary& arm) {
        out << arm.name << ',' << arm.mean_all << ',' << arm.sd_all << ',' << arm.mean_ditf << ','
            << arm.sd_ditf << ',' << report.seeds << '\n';
    };
    row(report.control);
    row(report.augmented);
}

}  // namespace csg
