#include "kdx/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <json.hpp>

#include "kdx/image_io.hpp"

namespace kdx {

namespace fs = std::filesystem;
using nlohmann::json;

void SplitPolicy::validate() const {
    if (train_pct < 0 || val_pct < 0 || test_pct < 0) {
        throw ConfigError("split percentages must be non-negative");
    }
    if (std::abs(train_pct + val_pct + test_pct - 100.0) > 1e-9) {
        throw ConfigError("split percentages must sum to 100, got " +
                          std::to_string(train_pct + val_pct + test_pct));
    }
}

const char* to_string(SplitRole r) {
    switch (r) {
        case SplitRole::Train: return "train";
        case SplitRole::Val: return "val";
        default: return "test";
    }
}

SplitRole split_role_from_string(const std::string& s) {
    if (s == "train") return SplitRole::Train;
    if (s == "val") return SplitRole::Val;
    if (s == "test") return SplitRole::Test;
    throw ConfigError("unknown split role '" + s + "'");
}

int DatasetManifest::count(SplitRole role) const {
    int n = 0;
    for (const auto& it : items) n += it.role == role ? 1 : 0;
    return n;
}

std::vector<int> DatasetManifest::item_indices(SplitRole role) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].role == role) out.push_back(static_cast<int>(i));
    }
    return out;
}

void DatasetManifest::recompute_hash() {
    std::uint64_t h = fnv1a64("kdx-manifest");
    for (const auto& c : class_names) h = fnv1a64(c, h);
    for (const auto& it : items) {
        h = fnv1a64(it.path, h);
        h = fnv1a64(&it.class_index, sizeof(it.class_index), h);
        const int r = static_cast<int>(it.role);
        h = fnv1a64(&r, sizeof(r), h);
    }
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.17g|%.17g|%.17g", policy.train_pct, policy.val_pct,
                  policy.test_pct);
    h = fnv1a64(std::string_view(buf), h);
    h = fnv1a64(&split_seed, sizeof(split_seed), h);
    content_hash = hash_hex(h);
}

void DatasetManifest::save(const fs::path& path) const {
    json j;
    j["root"] = root;
    j["class_names"] = class_names;
    j["policy"] = {policy.train_pct, policy.val_pct, policy.test_pct};
    j["split_seed"] = split_seed;
    j["content_hash"] = content_hash;
    j["warnings"] = warnings;
    json arr = json::array();
    for (const auto& it : items) {
        json e;
        e["path"] = it.path;
        e["class"] = it.class_index;
        e["role"] = to_string(it.role);
        if (it.has_box) e["box"] = it.box;
        arr.push_back(std::move(e));
    }
    j["items"] = std::move(arr);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
    out << j.dump(2) << "\n";
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
    json j = json::parse(in);
    DatasetManifest m;
    m.root = j.at("root").get<std::string>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    const auto pol = j.at("policy");
    m.policy = {pol.at(0).get<double>(), pol.at(1).get<double>(), pol.at(2).get<double>()};
    m.split_seed = j.at("split_seed").get<std::uint64_t>();
    m.warnings = j.at("warnings").get<std::vector<std::string>>();
    for (const auto& e : j.at("items")) {
        ManifestItem it;
        it.path = e.at("path").get<std::string>();
        it.class_index = e.at("class").get<int>();
        it.role = split_role_from_string(e.at("role").get<std::string>());
        if (e.contains("box")) {
            it.has_box = true;
            it.box = e.at("box").get<std::array<int, 4>>();
        }
        m.items.push_back(std::move(it));
    }
    m.recompute_hash();
    const std::string stored = j.at("content_hash").get<std::string>();
    if (stored != m.content_hash) {
        throw std::runtime_error("manifest content hash mismatch in " + path.string());
    }
    return m;
}

namespace {

bool has_image_extension(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

// floor() with a small guard against x being 14.999999999999998 when the
// exact value is 15.
int floor_count(double x) { return static_cast<int>(std::floor(x + 1e-9)); }

}  // namespace

DatasetManifest scan_folder(const std::string& root, const SplitPolicy& policy,
                            std::uint64_t seed) {
    policy.validate();
    if (!fs::is_directory(root)) throw ConfigError("dataset root is not a directory: " + root);

    DatasetManifest m;
    m.root = root;
    m.policy = policy;
    m.split_seed = seed;

    std::vector<std::string> class_dirs;
    for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw ConfigError("no class directories under " + root);

    for (std::size_t ci = 0; ci < class_dirs.size(); ++ci) {
        const std::string& cname = class_dirs[ci];
        m.class_names.push_back(cname);
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(fs::path(root) / cname)) {
            if (!e.is_regular_file()) continue;
            const std::string rel = cname + "/" + e.path().filename().string();
            if (!has_image_extension(e.path())) {
                m.warnings.push_back("skipped unsupported file: " + rel);
                continue;
            }
            try {
                decode_image(e.path().string(), 1);
            } catch (const std::exception&) {
                m.warnings.push_back("excluded undecodable image: " + rel);
                continue;
            }
            files.push_back(rel);
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) throw ConfigError("class directory has no decodable images: " + cname);

        auto rng = make_rng(seed, fnv1a64(cname), fnv1a64("stratified-split"));
        std::shuffle(files.begin(), files.end(), rng);

        const int n = static_cast<int>(files.size());
        const int n_val = floor_count(n * policy.val_pct / 100.0);
        const int n_test = floor_count(n * policy.test_pct / 100.0);
        const int n_train = n - n_val - n_test;
        for (int i = 0; i < n; ++i) {
            ManifestItem it;
            it.path = files[static_cast<std::size_t>(i)];
            it.class_index = static_cast<int>(ci);
            it.role = i < n_train             ? SplitRole::Train
                      : i < n_train + n_val   ? SplitRole::Val
                                              : SplitRole::Test;
            m.items.push_back(std::move(it));
        }
    }
    std::sort(m.warnings.begin(), m.warnings.end());
    m.recompute_hash();
    return m;
}

void SyntheticSpec::validate() const {
    if (image_size < 8) throw ConfigError("synthetic.image_size must be >= 8");
    if (num_classes < 2) throw ConfigError("synthetic.classes must be >= 2");
    if (blob_radius <= 0) throw ConfigError("synthetic.blob_radius must be > 0");
    if (noise < 0) throw ConfigError("synthetic.noise must be >= 0");
    if (train_per_class < 1 || val_per_class < 0 || test_per_class < 0) {
        throw ConfigError("synthetic per-class sample counts invalid");
    }
    const int margin = static_cast<int>(std::ceil(blob_radius));
    const int strip = image_size / num_classes;
    if (strip - 2 * margin < 1 || image_size - 2 * margin < 1) {
        throw ConfigError("synthetic.blob_radius too large for image_size/classes: blob must fit "
                          "inside its class region");
    }
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& root) {
    spec.validate();
    fs::create_directories(root);

    DatasetManifest m;
    m.root = root;
    m.split_seed = spec.seed;
    const int total_pc = spec.train_per_class + spec.val_per_class + spec.test_per_class;
    // The manifest's nominal policy, for provenance; assignment below is by
    // exact per-class counts.
    m.policy = {100.0 * spec.train_per_class / total_pc, 100.0 * spec.val_per_class / total_pc,
                100.0 * spec.test_per_class / total_pc};

    const int W = spec.image_size;
    const int H = spec.image_size;
    const int margin = static_cast<int>(std::ceil(spec.blob_radius));
    const double sigma = spec.blob_radius / 2.0;
    const int strip = W / spec.num_classes;

    auto rng = make_rng(spec.seed, fnv1a64("synthetic-blobs"));
    std::normal_distribution<double> noise_dist(0.0, spec.noise > 0 ? spec.noise : 1.0);
    json boxes = json::object();

    std::vector<std::uint8_t> img(static_cast<std::size_t>(H) * W);
    for (int ci = 0; ci < spec.num_classes; ++ci) {
        char cname[32];
        std::snprintf(cname, sizeof(cname), "class_%02d", ci);
        m.class_names.push_back(cname);
        fs::create_directories(fs::path(root) / cname);

        const int x_lo = ci * strip + margin;
        const int x_hi = (ci + 1) * strip - 1 - margin;
        const int y_lo = margin;
        const int y_hi = H - 1 - margin;
        std::uniform_int_distribution<int> cx_dist(x_lo, x_hi);
        std::uniform_int_distribution<int> cy_dist(y_lo, y_hi);

        for (int i = 0; i < total_pc; ++i) {
            const int cx = cx_dist(rng);
            const int cy = cy_dist(rng);
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    const double d2 = static_cast<double>((x - cx) * (x - cx) + (y - cy) * (y - cy));
                    double v = std::exp(-d2 / (2.0 * sigma * sigma));
                    if (spec.noise > 0) v += noise_dist(rng);
                    v = std::min(std::max(v, 0.0), 1.0);
                    img[static_cast<std::size_t>(y) * W + x] =
                        static_cast<std::uint8_t>(std::lround(v * 255.0));
                }
            }
            char fname[32];
            std::snprintf(fname, sizeof(fname), "img_%04d.png", i);
            const std::string rel = std::string(cname) + "/" + fname;
            write_png_gray((fs::path(root) / rel).string(), H, W, img.data());

            ManifestItem it;
            it.path = rel;
            it.class_index = ci;
            it.role = i < spec.train_per_class                        ? SplitRole::Train
                      : i < spec.train_per_class + spec.val_per_class ? SplitRole::Val
                                                                      : SplitRole::Test;
            it.has_box = true;
            it.box = {cx - margin, cy - margin, cx + margin, cy + margin};
            boxes[rel] = it.box;
            m.items.push_back(std::move(it));
        }
    }
    {
        std::ofstream out(fs::path(root) / "boxes.json");
        out << boxes.dump(2) << "\n";
    }
    m.recompute_hash();
    return m;
}

Tensor3 preprocess(const std::string& path, int target_size, int channels) {
    RawImage raw = decode_image(path, channels);
    raw = resize_bilinear(raw, target_size, target_size);
    Tensor3 out(raw.channels, raw.h, raw.w);
    for (std::size_t i = 0; i < raw.data.size(); ++i) {
        out.data[i] = static_cast<double>(raw.data[i]) / 255.0;
    }
    return out;
}

LoadedSplit LoadedSplit::load(const DatasetManifest& manifest, SplitRole role, int image_size,
                              int channels) {
    LoadedSplit s;
    s.role_ = role;
    s.image_size_ = image_size;
    s.channels_ = channels;
    s.num_classes_ = static_cast<int>(manifest.class_names.size());
    for (const int idx : manifest.item_indices(role)) {
        const auto& it = manifest.items[static_cast<std::size_t>(idx)];
        RawImage raw = decode_image((fs::path(manifest.root) / it.path).string(), channels);
        raw = resize_bilinear(raw, image_size, image_size);
        s.pixels_.push_back(std::move(raw.data));
        s.labels_.push_back(it.class_index);
        s.items_.push_back(it);
    }
    return s;
}

Tensor3 LoadedSplit::image(int i) const {
    Tensor3 out(channels_, image_size_, image_size_);
    const auto& px = pixels_[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < px.size(); ++k) out.data[k] = static_cast<double>(px[k]) / 255.0;
    return out;
}

Tensor4 LoadedSplit::batch_images(const std::vector<int>& indices) const {
    Tensor4 out(static_cast<int>(indices.size()), channels_, image_size_, image_size_);
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto& px = pixels_[static_cast<std::size_t>(indices[b])];
        double* dst = out.item(static_cast<int>(b));
        for (std::size_t k = 0; k < px.size(); ++k) dst[k] = static_cast<double>(px[k]) / 255.0;
    }
    return out;
}

Matrix LoadedSplit::batch_labels(const std::vector<int>& indices) const {
    Matrix out(static_cast<int>(indices.size()), num_classes_);
    for (std::size_t b = 0; b < indices.size(); ++b) {
        out.at(static_cast<int>(b), labels_[static_cast<std::size_t>(indices[b])]) = 1.0;
    }
    return out;
}

std::vector<std::vector<int>> epoch_batches(int n, int batch_size, std::uint64_t seed, int epoch) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (n < 1) throw ConfigError("cannot batch an empty split");
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    auto rng = make_rng(seed, fnv1a64("epoch-shuffle"), static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<int>> out;
    for (int start = 0; start < n; start += batch_size) {
        const int end = std::min(n, start + batch_size);
        out.emplace_back(order.begin() + start, order.begin() + end);
    }
    return out;
}

}  // namespace kdx
