#ifndef KDX_SCORECAM_HPP
#define KDX_SCORECAM_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kdx/model.hpp"
#include "kdx/tensor.hpp"

namespace kdx {

// Saliency map over the input plane, min-max normalized to [0,1].
// `degenerate` marks the all-constant-activation case, where the map is
// identically zero by contract.
struct HeatMap {
    int h = 0;
    int w = 0;
    std::vector<double> values;
    int target_class = 0;
    std::string source_model;
    std::string source_layer;
    bool degenerate = false;

    double& at(int y, int x) { return values[static_cast<std::size_t>(y) * w + x]; }
    double at(int y, int x) const { return values[static_cast<std::size_t>(y) * w + x]; }

    // First maximum in row-major order.
    std::pair<int, int> argmax_yx() const;

    // Shannon entropy of the map treated as an (unnormalized) distribution;
    // informational only.
    double entropy() const;

    // Raw-value sidecar (text header + row-major values); reload is exact.
    void save_sidecar(const std::filesystem::path& path) const;
    static HeatMap load_sidecar(const std::filesystem::path& path);
};

// Inclusive pixel box [x0,x1] x [y0,y1].
struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

struct AlignmentScore {
    double pearson = 0.0;      // 0 when either map is constant
    double iou_at_half = 0.0;  // IoU of {v >= 0.5 * max(map)} masks
    std::optional<bool> pointing_hit;  // argmax of the second map inside the box
};

// Score-CAM over the named capture layer:
//   capture -> per-channel bilinear upsample -> per-channel min-max
//   normalization (constant channels skipped) -> input masking -> class
//   probability per masked input -> softmax channel weights against the
//   all-zero-mask baseline -> rectified weighted sum -> min-max normalize.
// Channel reductions run in a content-canonical order, so permuting the
// activation channels cannot change the output even at the bit level.
HeatMap score_cam(const Model& model, const Tensor3& image, int target_class,
                  const std::string& layer, int mask_batch_size = 32);

// Same pipeline starting from pre-captured activations (the capture half is
// forward_with_activations).
HeatMap score_cam_from_activations(const Model& model, const Tensor3& image, int target_class,
                                   const ActivationStack& acts, int mask_batch_size = 32);

// Pearson / IoU / pointing between two equally-shaped maps. The pointing
// test uses the second map's argmax, matching its role as the map under
// evaluation.
AlignmentScore alignment(const HeatMap& reference, const HeatMap& candidate,
                         const std::optional<Box>& region = std::nullopt);

// Fixed colormap (blue -> cyan -> yellow -> red ramp):
//   r = clip01(1.5 - |4v - 3|), g = clip01(1.5 - |4v - 2|),
//   b = clip01(1.5 - |4v - 1|), each scaled to a byte.
std::array<std::uint8_t, 3> heat_colormap(double v);

// Writes a PNG with panels [original | overlay(primary) | overlay(secondary)]
// (the last only when given). Overlay = 0.45*image + 0.55*colormap(value).
void render_heatmap_overlay(const std::filesystem::path& out_png, const Tensor3& image,
                            const HeatMap& primary, const HeatMap* secondary = nullptr);

// Bilinear 2-D upsampling with corner alignment; exposed for tests.
void upsample_bilinear(const double* src, int sh, int sw, double* dst, int dh, int dw);

}  // namespace kdx

#endif  // KDX_SCORECAM_HPP
