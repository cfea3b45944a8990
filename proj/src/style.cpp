#include "csg/style.hpp"

#include "csg/rng.hpp"
#include "csg/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

#include "json.hpp"

namespace csg {

namespace {

constexpr int kStackChannels[] = {1, 8, 16, 32};
constexpr int kStackLayers = 3;
constexpr char kDescriptorMagic[4] = {'C', 'S', 'G', 'D'};
constexpr uint32_t kDescriptorVersion = 1;

// Same-padding conv followed by a 1-pixel crop equals a valid conv; the crop
// keeps border zeros out of the texture statistics.
Tensor<float> conv_valid(const Tensor<float>& in, const ConvStackLayer& layer) {
    Tensor<float> full(layer.out_c, in.h, in.w);
    const std::vector<float> zero_bias(static_cast<size_t>(layer.out_c), 0.0f);
    conv3x3_forward(in, layer.weights.data(), zero_bias.data(), full);
    Tensor<float> out(layer.out_c, in.h - 2, in.w - 2);
    for (int c = 0; c < out.c; ++c) {
        for (int y = 0; y < out.h; ++y) {
            const float* src = full.plane(c) + static_cast<size_t>(y + 1) * in.w + 1;
            std::copy(src, src + out.w, out.plane(c) + static_cast<size_t>(y) * out.w);
        }
    }
    return out;
}

Tensor<float> pool_floor(const Tensor<float>& in) {
    const int h = in.h - (in.h % 2), w = in.w - (in.w % 2);
    Tensor<float> trimmed(in.c, h, w);
    for (int c = 0; c < in.c; ++c)
        for (int y = 0; y < h; ++y)
            std::copy(in.plane(c) + static_cast<size_t>(y) * in.w, in.plane(c) + static_cast<size_t>(y) * in.w + w,
                      trimmed.plane(c) + static_cast<size_t>(y) * w);
    Tensor<float> out(in.c, h / 2, w / 2);
    avgpool2_forward(trimmed, out);
    return out;
}

void append_gram(const Tensor<float>& feat, StyleDescriptor& out) {
    const int c = feat.c;
    const size_t m = feat.plane_size();
    const double norm = static_cast<double>(c) * static_cast<double>(m);
    for (int i = 0; i < c; ++i) {
        for (int j = i; j < c; ++j) {
            const float* a = feat.plane(i);
            const float* b = feat.plane(j);
            double s = 0.0;
            for (size_t k = 0; k < m; ++k) s += static_cast<double>(a[k]) * static_cast<double>(b[k]);
            out.push_back(static_cast<float>(s / norm));
        }
    }
}

void validate_layer_ids(const std::vector<int>& layer_ids) {
    if (layer_ids.empty()) throw Error("style: no layers selected");
    for (int id : layer_ids)
        if (id < 0 || id >= kStackLayers) throw Error("style: layer id out of range: " + std::to_string(id));
}

}  // namespace

ConvStack make_conv_stack(uint64_t seed) {
    Rng rng(derive_seed(seed, "style_stack"));
    ConvStack stack;
    stack.seed = seed;
    for (int l = 0; l < kStackLayers; ++l) {
        ConvStackLayer layer;
        layer.in_c = kStackChannels[l];
        layer.out_c = kStackChannels[l + 1];
        layer.weights.resize(static_cast<size_t>(layer.out_c) * layer.in_c * 9);
        for (float& w : layer.weights) w = static_cast<float>(rng.normal());
        stack.layers.push_back(std::move(layer));
    }
    return stack;
}

size_t descriptor_length(const ConvStack& stack, const std::vector<int>& layer_ids) {
    validate_layer_ids(layer_ids);
    size_t len = 0;
    for (int id : layer_ids) {
        const size_t c = static_cast<size_t>(stack.layers[static_cast<size_t>(id)].out_c);
        len += c * (c + 1) / 2;
    }
    return len;
}

StyleDescriptor extract_descriptor(const GrayImage& img, const ConvStack& stack,
                                   const std::vector<int>& layer_ids) {
    validate_layer_ids(layer_ids);
    const int deepest = *std::max_element(layer_ids.begin(), layer_ids.end());

    Tensor<float> x(1, img.height, img.width);
    std::copy(img.data.begin(), img.data.end(), x.v.begin());

    StyleDescriptor out;
    for (int l = 0; l <= deepest; ++l) {
        if (x.h < 3 || x.w < 3)
            throw Error("style: image too small for layer " + std::to_string(l) + " (" + std::to_string(img.width) +
                        "x" + std::to_string(img.height) + ")");
        Tensor<float> feat = conv_valid(x, stack.layers[static_cast<size_t>(l)]);
        relu_inplace(feat);
        if (std::find(layer_ids.begin(), layer_ids.end(), l) != layer_ids.end()) append_gram(feat, out);
        if (l < deepest) {
            if (feat.h < 2 || feat.w < 2) throw Error("style: image too small for layer " + std::to_string(l + 1));
            x = pool_floor(feat);
        }
    }

    // Reorder to match layer_ids order (grams were appended in depth order).
    std::vector<int> sorted(layer_ids);
    std::sort(sorted.begin(), sorted.end());
    if (sorted != layer_ids) {
        StyleDescriptor reordered;
        reordered.reserve(out.size());
        for (int want : layer_ids) {
            size_t off = 0;
            for (int id : sorted) {
                const size_t c = static_cast<size_t>(stack.layers[static_cast<size_t>(id)].out_c);
                const size_t len = c * (c + 1) / 2;
                if (id == want) {
                    reordered.insert(reordered.end(), out.begin() + static_cast<long>(off),
                                     out.begin() + static_cast<long>(off + len));
                    break;
                }
                off += len;
            }
        }
        return reordered;
    }
    return out;
}

ActivationStats extract_activation_stats(const GrayImage& img, const ConvStack& stack) {
    Tensor<float> x(1, img.height, img.width);
    std::copy(img.data.begin(), img.data.end(), x.v.begin());

    ActivationStats stats;
    const int depth = static_cast<int>(stack.layers.size());
    for (int l = 0; l < depth; ++l) {
        if (x.h < 3 || x.w < 3)
            throw Error("style: image too small for layer " + std::to_string(l) + " (" + std::to_string(img.width) +
                        "x" + std::to_string(img.height) + ")");
        Tensor<float> feat = conv_valid(x, stack.layers[static_cast<size_t>(l)]);
        relu_inplace(feat);
        const double m = static_cast<double>(feat.plane_size());
        for (int c = 0; c < feat.c; ++c) {
            const float* p = feat.plane(c);
            double s1 = 0.0, s2 = 0.0;
            for (size_t k = 0; k < feat.plane_size(); ++k) {
                s1 += static_cast<double>(p[k]);
                s2 += static_cast<double>(p[k]) * static_cast<double>(p[k]);
            }
            stats.mean.push_back(static_cast<float>(s1 / m));
            stats.second_moment.push_back(static_cast<float>(s2 / m));
        }
        if (l < depth - 1) {
            if (feat.h < 2 || feat.w < 2) throw Error("style: image too small for layer " + std::to_string(l + 1));
            x = pool_floor(feat);
        }
    }
    return stats;
}

double descriptor_mse(const StyleDescriptor& a, const StyleDescriptor& b) {
    if (a.size() != b.size() || a.empty()) throw Error("style: descriptor length mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

void ContextIndex::add(std::string id, StyleDescriptor descriptor) {
    for (const std::string& existing : ids)
        if (existing == id) throw Error("style: duplicate sample id in index: " + id);
    ids.push_back(std::move(id));
    descriptors.push_back(std::move(descriptor));
}

std::string select_context(const std::string& query_id, const ContextIndex& index) {
    if (index.size() < 2) throw Error("style: context index needs at least 2 entries");
    size_t query = index.size();
    for (size_t i = 0; i < index.size(); ++i)
        if (index.ids[i] == query_id) query = i;
    if (query == index.size()) throw Error("style: query id not in index: " + query_id);

    double best = std::numeric_limits<double>::infinity();
    std::string best_id;
    for (size_t i = 0; i < index.size(); ++i) {
        if (i == query) continue;
        const double mse = descriptor_mse(index.descriptors[query], index.descriptors[i]);
        if (mse < best || (mse == best && index.ids[i] < best_id)) {
            best = mse;
            best_id = index.ids[i];
        }
    }
    return best_id;
}

PairedManifest build_pairs(const DatasetManifest& manifest, const ConvStack& stack,
                           const std::filesystem::path& base_dir, const std::vector<int>& layer_ids) {
    PairedManifest out;
    out.width = manifest.width;
    out.height = manifest.height;
    out.rng_seed = manifest.rng_seed;

    std::map<std::string, ContextIndex> by_split;
    for (const ManifestEntry& e : manifest.entries) {
        const GrayImage img = read_image_pgm(base_dir / e.image_path);
        by_split[e.split].add(e.id, extract_descriptor(img, stack, layer_ids));
    }
    for (const auto& [split, index] : by_split)
        if (index.size() == 1) throw Error("style: split '" + split + "' has a single record, cannot pair");

    for (const ManifestEntry& e : manifest.entries) {
        PairedEntry p{e.id, e.mask_path, e.image_path, e.split, e.seed, ""};
        p.context_id = select_context(e.id, by_split[e.split]);
        out.entries.push_back(std::move(p));
    }
    return out;
}

void write_paired_manifest(const PairedManifest& manifest, const std::filesystem::path& path) {
    std::ofstream file(path);
    if (!file) throw Error("style: cannot open paired manifest for writing: " + path.string());
    nlohmann::json meta;
    meta["type"] = "meta";
    meta["width"] = manifest.width;
    meta["height"] = manifest.height;
    meta["rng_seed"] = manifest.rng_seed;
    std::vector<std::string> classes;
    for (size_t c = 0; c < kNumClasses; ++c) classes.push_back(class_name(static_cast<ClassId>(c)));
    meta["classes"] = classes;
    file << meta.dump() << "\n";
    for (const PairedEntry& e : manifest.entries) {
        nlohmann::json rec;
        rec["type"] = "sample";
        rec["id"] = e.id;
        rec["mask"] = e.mask_path;
        rec["image"] = e.image_path;
        rec["split"] = e.split;
        rec["seed"] = e.seed;
        rec["context"] = e.context_id;
        file << rec.dump() << "\n";
    }
    if (!file) throw Error("style: paired manifest write failed: " + path.string());
}

PairedManifest read_paired_manifest(const std::filesystem::path& path) {
    std::ifstream file(path);
    if (!file) throw Error("style: cannot open paired manifest: " + path.string());
    PairedManifest manifest;
    bool have_meta = false;
    std::string line;
    while (std::getline(file, line)) {
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
        if (rec.is_discarded()) throw Error("style: malformed paired manifest line: " + line);
        const std::string type = rec.value("type", "");
        if (type == "meta") {
            manifest.width = rec.at("width").get<int>();
            manifest.height = rec.at("height").get<int>();
            manifest.rng_seed = rec.at("rng_seed").get<uint64_t>();
            have_meta = true;
        } else if (type == "sample") {
            manifest.entries.push_back({rec.at("id").get<std::string>(), rec.at("mask").get<std::string>(),
                                        rec.at("image").get<std::string>(), rec.at("split").get<std::string>(),
                                        rec.at("seed").get<uint64_t>(), rec.at("context").get<std::string>()});
        } else {
            throw Error("style: unknown paired manifest record type: " + type);
        }
    }
    if (!have_meta) throw Error("style: paired manifest missing meta record");
    return manifest;
}

void save_descriptors(const std::vector<StyleDescriptor>& descriptors, const std::filesystem::path& path) {
    std::ofstream file(path, std::ios::binary);
    if (!file) throw Error("style: cannot open descriptor file for writing: " + path.string());
    const uint32_t length = descriptors.empty() ? 0 : static_cast<uint32_t>(descriptors.front().size());
    for (const StyleDescriptor& d : descriptors)
        if (d.size() != length) throw Error("style: inconsistent descriptor lengths");
    const uint32_t count = static_cast<uint32_t>(descriptors.size());
    file.write(kDescriptorMagic, 4);
    file.write(reinterpret_cast<const char*>(&kDescriptorVersion), 4);
    file.write(reinterpret_cast<const char*>(&length), 4);
    file.write(reinterpret_cast<const char*>(&count), 4);
    for (const StyleDescriptor& d : descriptors)
        file.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(float)));
    if (!file) throw Error("style: descriptor write failed: " + path.string());
}

std::vector<StyleDescriptor> load_descriptors(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw Error("style: cannot open descriptor file: " + path.string());
    char magic[4];
    uint32_t version = 0, length = 0, count = 0;
    file.read(magic, 4);
    file.read(reinterpret_cast<char*>(&version), 4);
    file.read(reinterpret_cast<char*>(&length), 4);
    file.read(reinterpret_cast<char*>(&count), 4);
    if (!file || std::memcmp(magic, kDescriptorMagic, 4) != 0)
        throw Error("style: bad descriptor file header: " + path.string());
    if (version != kDescriptorVersion)
        throw Error("style: unsupported descriptor version " + std::to_string(version));
    std::vector<StyleDescriptor> descriptors(count, StyleDescriptor(length));
    for (StyleDescriptor& d : descriptors) {
        file.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(length * sizeof(float)));
        if (!file) throw Error("style: truncated descriptor file: " + path.string());
    }
    return descriptors;
}

}  // namespace csg
