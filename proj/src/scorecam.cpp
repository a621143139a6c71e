#include "kdx/scorecam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "kdx/image_io.hpp"
#include "kdx/losses.hpp"

namespace kdx {

std::pair<int, int> HeatMap::argmax_yx() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return {static_cast<int>(best) / w, static_cast<int>(best) % w};
}

double HeatMap::entropy() const {
    double total = 0.0;
    for (double v : values) total += v;
    if (total <= 0.0) return 0.0;
    double h = 0.0;
    for (double v : values) {
        if (v > 0.0) {
            const double p = v / total;
            h -= p * std::log(p);
        }
    }
    return h;
}

void HeatMap::save_sidecar(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write heatmap sidecar: " + path.string());
    out << "kdx-heatmap 1\n";
    out << "model " << source_model << "\n";
    out << "layer " << source_layer << "\n";
    out << "class " << target_class << "\n";
    out << "degenerate " << (degenerate ? 1 : 0) << "\n";
    out << "shape " << h << " " << w << "\n";
    char buf[40];
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::snprintf(buf, sizeof(buf), "%.17g", at(y, x));
            out << buf << (x + 1 == w ? "\n" : " ");
        }
    }
}

HeatMap HeatMap::load_sidecar(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open heatmap sidecar: " + path.string());
    std::string tag;
    int version = 0;
    in >> tag >> version;
    if (tag != "kdx-heatmap" || version != 1) {
        throw std::runtime_error("not a heatmap sidecar: " + path.string());
    }
    HeatMap m;
    std::string key;
    in >> key >> m.source_model;   // model
    in >> key >> m.source_layer;   // layer
    in >> key >> m.target_class;   // class
    int deg = 0;
    in >> key >> deg;              // degenerate
    m.degenerate = deg != 0;
    in >> key >> m.h >> m.w;       // shape
    m.values.resize(static_cast<std::size_t>(m.h) * m.w);
    for (auto& v : m.values) in >> v;
    if (!in) throw std::runtime_error("truncated heatmap sidecar: " + path.string());
    return m;
}

void upsample_bilinear(const double* src, int sh, int sw, double* dst, int dh, int dw) {
    const double sy = dh > 1 ? static_cast<double>(sh - 1) / (dh - 1) : 0.0;
    const double sx = dw > 1 ? static_cast<double>(sw - 1) / (dw - 1) : 0.0;
    for (int y = 0; y < dh; ++y) {
        const double fy = y * sy;
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, sh - 1);
        const double wy = fy - y0;
        for (int x = 0; x < dw; ++x) {
            const double fx = x * sx;
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, sw - 1);
            const double wx = fx - x0;
            const double a = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            const double b = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            dst[static_cast<std::size_t>(y) * dw + x] = a * (1.0 - wy) + b * wy;
        }
    }
}

HeatMap score_cam(const Model& model, const Tensor3& image, int target_class,
                  const std::string& layer, int mask_batch_size) {
    Tensor4 batch(1, image.c, image.h, image.w);
    std::copy(image.data.begin(), image.data.end(), batch.data.begin());
    std::vector<ActivationStack> acts;
    model.forward_with_activations(batch, layer, acts);
    return score_cam_from_activations(model, image, target_class, acts[0], mask_batch_size);
}

HeatMap score_cam_from_activations(const Model& model, const Tensor3& image, int target_class,
                                   const ActivationStack& acts, int mask_batch_size) {
    if (target_class < 0 || target_class >= model.num_classes()) {
        throw std::invalid_argument("score_cam: target class " + std::to_string(target_class) +
                                    " out of range");
    }
    if (mask_batch_size < 1) throw ConfigError("score_cam: mask_batch_size must be >= 1");
    const int K = acts.maps.c;
    const int H = image.h;
    const int W = image.w;
    HeatMap out;
    out.h = H;
    out.w = W;
    out.values.assign(static_cast<std::size_t>(H) * W, 0.0);
    out.target_class = target_class;
    out.source_model = model.name();
    out.source_layer = acts.layer_id;

    // Upsample every channel; remember which are non-constant.
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<std::vector<double>> up(static_cast<std::size_t>(K));
    std::vector<std::vector<double>> up_norm(static_cast<std::size_t>(K));
    std::vector<int> live;
    for (int k = 0; k < K; ++k) {
        up[static_cast<std::size_t>(k)].resize(plane);
        upsample_bilinear(acts.maps.data.data() + static_cast<std::size_t>(k) * acts.maps.plane_size(),
                          acts.maps.h, acts.maps.w, up[static_cast<std::size_t>(k)].data(), H, W);
        const auto [mn_it, mx_it] = std::minmax_element(up[static_cast<std::size_t>(k)].begin(),
                                                        up[static_cast<std::size_t>(k)].end());
        const double mn = *mn_it, mx = *mx_it;
        if (mx > mn) {
            up_norm[static_cast<std::size_t>(k)].resize(plane);
            const double range = mx - mn;
            for (std::size_t i = 0; i < plane; ++i) {
                up_norm[static_cast<std::size_t>(k)][i] = (up[static_cast<std::size_t>(k)][i] - mn) / range;
            }
            live.push_back(k);
        }
    }
    if (live.empty()) {
        // All-constant activation stack: declared degenerate, identically 0.
        out.degenerate = true;
        return out;
    }

    // Baseline = class probability on the all-zero mask.
    double baseline;
    {
        Tensor4 zero(1, image.c, H, W);
        baseline = stable_sigmoid(model.forward(zero).at(0, target_class));
    }

    // Masked forwards in chunks; each channel's score is independent of the
    // chunking.
    std::vector<double> delta(static_cast<std::size_t>(K), 0.0);
    for (std::size_t start = 0; start < live.size(); start += static_cast<std::size_t>(mask_batch_size)) {
        const std::size_t end = std::min(live.size(), start + static_cast<std::size_t>(mask_batch_size));
        Tensor4 masked(static_cast<int>(end - start), image.c, H, W);
        for (std::size_t i = start; i < end; ++i) {
            double* dst = masked.item(static_cast<int>(i - start));
            const auto& mask = up_norm[static_cast<std::size_t>(live[i])];
            for (int c = 0; c < image.c; ++c) {
                const double* src = image.data.data() + static_cast<std::size_t>(c) * plane;
                for (std::size_t px = 0; px < plane; ++px) {
                    dst[static_cast<std::size_t>(c) * plane + px] = src[px] * mask[px];
                }
            }
        }
        const Matrix logits = model.forward(masked);
        for (std::size_t i = start; i < end; ++i) {
            delta[static_cast<std::size_t>(live[i])] =
                stable_sigmoid(logits.at(static_cast<int>(i - start), target_class)) - baseline;
        }
    }

    // Canonical channel order: by score, ties broken by channel content.
    // Reductions below follow this order so the result is independent of how
    // the channels were arranged in the stack.
    std::vector<int> order = live;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (delta[static_cast<std::size_t>(a)] != delta[static_cast<std::size_t>(b)]) {
            return delta[static_cast<std::size_t>(a)] < delta[static_cast<std::size_t>(b)];
        }
        const double* pa = acts.maps.data.data() + static_cast<std::size_t>(a) * acts.maps.plane_size();
        const double* pb = acts.maps.data.data() + static_cast<std::size_t>(b) * acts.maps.plane_size();
        return std::lexicographical_compare(pa, pa + acts.maps.plane_size(),
                                            pb, pb + acts.maps.plane_size());
    });

    double dmax = delta[static_cast<std::size_t>(order[0])];
    for (int k : order) dmax = std::max(dmax, delta[static_cast<std::size_t>(k)]);
    double denom = 0.0;
    for (int k : order) denom += std::exp(delta[static_cast<std::size_t>(k)] - dmax);

    for (int k : order) {
        const double wgt = std::exp(delta[static_cast<std::size_t>(k)] - dmax) / denom;
        const auto& chan = up[static_cast<std::size_t>(k)];
        for (std::size_t i = 0; i < plane; ++i) out.values[i] += wgt * chan[i];
    }
    for (auto& v : out.values) v = std::max(v, 0.0);

    const auto [mn_it, mx_it] = std::minmax_element(out.values.begin(), out.values.end());
    const double mn = *mn_it, mx = *mx_it;
    if (mx > mn) {
        // true division: (mx-mn)/(mx-mn) is exactly 1, so max lands on 1.0
        const double range = mx - mn;
        for (auto& v : out.values) v = (v - mn) / range;
    } else {
        std::fill(out.values.begin(), out.values.end(), 0.0);
        out.degenerate = true;
    }
    return out;
}

AlignmentScore alignment(const HeatMap& reference, const HeatMap& candidate,
                         const std::optional<Box>& region) {
    if (reference.h != candidate.h || reference.w != candidate.w) {
        throw ShapeError("alignment: heatmap shapes differ");
    }
    AlignmentScore s;
    const std::size_t n = reference.values.size();

    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += reference.values[i];
        mb += candidate.values[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = reference.values[i] - ma;
        const double db = candidate.values[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    s.pearson = (va > 0.0 && vb > 0.0) ? cov / std::sqrt(va * vb) : 0.0;
    s.pearson = std::min(1.0, std::max(-1.0, s.pearson));

    const double ta = 0.5 * *std::max_element(reference.values.begin(), reference.values.end());
    const double tb = 0.5 * *std::max_element(candidate.values.begin(), candidate.values.end());
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool a = reference.values[i] >= ta;
        const bool b = candidate.values[i] >= tb;
        inter += (a && b) ? 1 : 0;
        uni += (a || b) ? 1 : 0;
    }
    s.iou_at_half = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;

    if (region.has_value()) {
        const auto [y, x] = candidate.argmax_yx();
        s.pointing_hit = region->contains(x, y);
    }
    return s;
}

std::array<std::uint8_t, 3> heat_colormap(double v) {
    v = std::min(1.0, std::max(0.0, v));
    auto ramp = [](double x) {
        x = std::min(1.0, std::max(0.0, x));
        return static_cast<std::uint8_t>(std::lround(255.0 * x));
    };
    return {ramp(1.5 - std::fabs(4.0 * v - 3.0)), ramp(1.5 - std::fabs(4.0 * v - 2.0)),
            ramp(1.5 - std::fabs(4.0 * v - 1.0))};
}

void render_heatmap_overlay(const std::filesystem::path& out_png, const Tensor3& image,
                            const HeatMap& primary, const HeatMap* secondary) {
    if (image.h != primary.h || image.w != primary.w) {
        throw ShapeError("render_heatmap_overlay: image/heatmap shape mismatch");
    }
    if (secondary && (secondary->h != primary.h || secondary->w != primary.w)) {
        throw ShapeError("render_heatmap_overlay: secondary heatmap shape mismatch");
    }
    const int H = image.h;
    const int W = image.w;
    const int panels = secondary ? 3 : 2;
    const int gap = 2;
    const int out_w = panels * W + (panels - 1) * gap;

    auto pixel_rgb = [&](int y, int x) {
        std::array<std::uint8_t, 3> rgb;
        if (image.c >= 3) {
            for (int c = 0; c < 3; ++c) {
                rgb[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(
                    std::lround(255.0 * std::min(1.0, std::max(0.0, image.at(c, y, x)))));
            }
        } else {
            const auto g = static_cast<std::uint8_t>(
                std::lround(255.0 * std::min(1.0, std::max(0.0, image.at(0, y, x)))));
            rgb = {g, g, g};
        }
        return rgb;
    };
    auto blend = [](std::array<std::uint8_t, 3> base, std::array<std::uint8_t, 3> heat) {
        std::array<std::uint8_t, 3> o;
        for (int c = 0; c < 3; ++c) {
            o[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(std::lround(
                0.45 * base[static_cast<std::size_t>(c)] + 0.55 * heat[static_cast<std::size_t>(c)]));
        }
        return o;
    };

    std::vector<std::uint8_t> canvas(static_cast<std::size_t>(H) * out_w * 3, 255);
    auto put = [&](int y, int x, std::array<std::uint8_t, 3> rgb) {
        std::uint8_t* p = canvas.data() + 3 * (static_cast<std::size_t>(y) * out_w + x);
        p[0] = rgb[0];
        p[1] = rgb[1];
        p[2] = rgb[2];
    };
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const auto base = pixel_rgb(y, x);
            put(y, x, base);
            put(y, W + gap + x, blend(base, heat_colormap(primary.at(y, x))));
            if (secondary) {
                put(y, 2 * (W + gap) + x, blend(base, heat_colormap(secondary->at(y, x))));
            }
        }
    }
    write_png_rgb(out_png.string(), H, out_w, canvas.data());
}

}  // namespace kdx
