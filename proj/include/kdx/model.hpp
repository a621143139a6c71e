#ifndef KDX_MODEL_HPP
#define KDX_MODEL_HPP

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "kdx/tensor.hpp"

namespace kdx {

// One conv block: 3x3 convolution (pad 1) -> ReLU -> optional 2x2 max-pool.
struct ConvBlockSpec {
    int out_channels = 0;
    bool pool = false;
};

// Architecture description of a toy CNN. Every model is a stack of conv
// blocks followed by global average pooling, dropout and a linear head, so
// the last conv layer is always a valid CAM capture point. Two fixed
// coordinate channels are appended to the input: the head pools out spatial
// structure, and without an absolute-position signal a conv+GAP net cannot
// separate classes that differ only in where the evidence sits.
struct ToyCnnSpec {
    std::string name;
    int in_channels = 1;
    int input_h = 32;
    int input_w = 32;
    int num_classes = 3;
    std::vector<ConvBlockSpec> blocks;
    double dropout_rate = 0.2;
    bool coord_channels = true;
};

// Post-nonlinearity feature maps captured at a named conv layer.
struct ActivationStack {
    std::string layer_id;
    Tensor3 maps;  // [K x H' x W']
};

// Per-item intermediate state recorded by a training-mode forward pass and
// consumed by backward().
struct TrainContext;

// Checkpoint training metadata (persisted in the checkpoint header).
struct CheckpointMeta {
    int epoch = 0;
    std::uint64_t seed = 0;
    std::string config_hash;  // hex
};

// A toy CNN with explicit parameters and hand-written backprop. Forward
// passes are deterministic; dropout only acts in forward_train and draws its
// masks from the caller's RNG stream.
class Model {
public:
    static Model build(const ToyCnnSpec& spec, std::uint64_t seed);

    const std::string& name() const { return spec_.name; }
    const ToyCnnSpec& spec() const { return spec_; }
    int num_classes() const { return spec_.num_classes; }
    std::size_t parameter_count() const { return params_.size(); }
    std::uint64_t parameter_hash() const;
    std::vector<std::string> capture_layers() const;
    std::string last_conv_layer() const;

    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    // Inference-mode forward: dropout disabled, bitwise deterministic.
    Matrix forward(const Tensor4& images) const;

    // forward() plus capture of the named layer's post-ReLU maps (one stack
    // per batch item). Capture is observational: logits match forward().
    Matrix forward_with_activations(const Tensor4& images, const std::string& layer,
                                    std::vector<ActivationStack>& activations) const;

    // Training-mode forward (dropout active). Masks are drawn from `rng`
    // serially per item before any parallel work, so results do not depend
    // on thread count.
    Matrix forward_train(const Tensor4& images, std::mt19937_64& rng, TrainContext& ctx) const;

    // Accumulates d(loss)/d(params) into `grad` (resized and zeroed here)
    // given d(loss)/d(logits). On a frozen model the gradient is all zeros.
    void backward(const Matrix& dlogits, const TrainContext& ctx, std::vector<double>& grad) const;

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }

    void save(const std::filesystem::path& path, const CheckpointMeta& meta) const;
    static Model load(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

private:
    Model() = default;
    void check_input(const Tensor4& images) const;

    ToyCnnSpec spec_;
    std::vector<double> params_;
    bool frozen_ = false;

    // Parameter layout offsets, derived from spec_.
    struct BlockLayout {
        int in_ch, out_ch;
        std::size_t w_off, b_off;
    };
    std::vector<BlockLayout> block_layout_;
    std::size_t fc_w_off_ = 0, fc_b_off_ = 0;
    int head_width_ = 0;  // channels entering GAP
    void compute_layout();

    friend struct ModelKernels;
};

// Built-in architectures. The teacher is deliberately over-provisioned:
// its parameter count is >= 4x the student's.
Model build_toy_teacher(std::uint64_t seed, int in_channels = 1, int input_h = 32,
                        int input_w = 32, int num_classes = 3);
Model build_toy_student(std::uint64_t seed, int in_channels = 1, int input_h = 32,
                        int input_w = 32, int num_classes = 3);

// Registry lookup used by the CLI ("toy_teacher" / "toy_student").
Model build_model(const std::string& name, std::uint64_t seed, int in_channels, int input_h,
                  int input_w, int num_classes);

struct TrainContext {
    struct Item {
        Tensor3 input;                       // with coord channels appended
        std::vector<Tensor3> block_acts;     // post-ReLU, pre-pool
        std::vector<Tensor3> block_outputs;  // post-pool (== act when no pool)
        std::vector<std::vector<int>> pool_argmax;
        std::vector<double> gap;
        std::vector<double> dropout_mask;  // scaled keep mask (0 or 1/keep)
        std::vector<double> head_input;    // gap after dropout
    };
    std::vector<Item> items;
};

}  // namespace kdx

#endif  // KDX_MODEL_HPP
