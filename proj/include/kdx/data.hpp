#ifndef KDX_DATA_HPP
#define KDX_DATA_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kdx/tensor.hpp"

namespace kdx {

// Percentage split; values may be fractional but must sum to 100.
// Per-class counts use floor for val and test, remainder to train.
struct SplitPolicy {
    double train_pct = 65.0;
    double val_pct = 15.0;
    double test_pct = 20.0;
    void validate() const;
};

enum class SplitRole { Train, Val, Test };
const char* to_string(SplitRole r);
SplitRole split_role_from_string(const std::string& s);

struct ManifestItem {
    std::string path;  // relative to manifest root
    int class_index = 0;
    SplitRole role = SplitRole::Train;
    bool has_box = false;
    std::array<int, 4> box = {0, 0, 0, 0};  // inclusive [x0, y0, x1, y1]
};

// Deterministic description of a class-per-folder dataset: file lists, class
// ordering, split assignment and a content hash covering all of it plus the
// policy and seed.
struct DatasetManifest {
    std::string root;
    std::vector<std::string> class_names;
    std::vector<ManifestItem> items;
    SplitPolicy policy;
    std::uint64_t split_seed = 0;
    std::vector<std::string> warnings;
    std::string content_hash;  // hex

    int count(SplitRole role) const;
    std::vector<int> item_indices(SplitRole role) const;
    void recompute_hash();

    void save(const std::filesystem::path& path) const;
    static DatasetManifest load(const std::filesystem::path& path);
};

// Scans root/<class_name>/*.{png,jpg,jpeg,bmp}, validates that every image
// decodes, and assigns a deterministic stratified split. Files that cannot
// be decoded (or carry other extensions) are excluded and listed in
// warnings. Throws ConfigError on an empty or missing class directory.
DatasetManifest scan_folder(const std::string& root, const SplitPolicy& policy,
                            std::uint64_t seed);

// Synthetic desk-scale dataset: one bright Gaussian blob per image whose
// horizontal region encodes the class, plus optional pixel noise. Ground
// truth blob boxes are kept for the pointing-game metric.
struct SyntheticSpec {
    int image_size = 32;
    int num_classes = 3;
    double blob_radius = 4.0;
    double noise = 0.1;
    int train_per_class = 100;
    int val_per_class = 20;
    int test_per_class = 30;
    std::uint64_t seed = 7;
    void validate() const;
};

// Materializes the dataset under root (class-per-folder PNGs plus a
// boxes.json sidecar) and returns its manifest. Same spec and seed produce
// byte-identical files.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& root);

// Decode + bilinear-resize to target_size x target_size + scale to [0,1].
// Images already at target size skip resampling entirely.
Tensor3 preprocess(const std::string& path, int target_size, int channels);

// One split held in memory as preprocessed 8-bit images; batches are
// materialized to [0,1] doubles on demand.
class LoadedSplit {
public:
    static LoadedSplit load(const DatasetManifest& manifest, SplitRole role, int image_size,
                            int channels);

    int size() const { return static_cast<int>(labels_.size()); }
    int num_classes() const { return num_classes_; }
    int channels() const { return channels_; }
    int height() const { return image_size_; }
    int width() const { return image_size_; }
    SplitRole role() const { return role_; }

    int label_of(int i) const { return labels_[static_cast<std::size_t>(i)]; }
    const ManifestItem& item(int i) const { return items_[static_cast<std::size_t>(i)]; }
    Tensor3 image(int i) const;

    Tensor4 batch_images(const std::vector<int>& indices) const;
    Matrix batch_labels(const std::vector<int>& indices) const;  // one-hot rows

private:
    SplitRole role_ = SplitRole::Train;
    int image_size_ = 0;
    int channels_ = 0;
    int num_classes_ = 0;
    std::vector<int> labels_;
    std::vector<ManifestItem> items_;
    std::vector<std::vector<std::uint8_t>> pixels_;  // [C*H*W] each
};

// Deterministic epoch batching: a seeded shuffle of [0, n), chunked into
// batches of batch_size with the final partial batch kept.
std::vector<std::vector<int>> epoch_batches(int n, int batch_size, std::uint64_t seed, int epoch);

}  // namespace kdx

#endif  // KDX_DATA_HPP
