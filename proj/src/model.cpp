#include "kdx/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kdx {

namespace {

using nlohmann::json;

// Input image with two fixed coordinate planes (x/(W-1), y/(H-1)) appended.
Tensor3 with_coords(const double* img, int c, int h, int w, bool coords) {
    Tensor3 out(coords ? c + 2 : c, h, w);
    std::copy(img, img + static_cast<std::size_t>(c) * h * w, out.data.begin());
    if (coords) {
        const double dx = w > 1 ? 1.0 / (w - 1) : 0.0;
        const double dy = h > 1 ? 1.0 / (h - 1) : 0.0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                out.at(c, y, x) = x * dx;
                out.at(c + 1, y, x) = y * dy;
            }
        }
    }
    return out;
}

// 3x3 convolution, zero padding 1, followed by ReLU.
void conv3x3_relu(const Tensor3& in, const double* W, const double* b, int out_ch, Tensor3& out) {
    const int h = in.h;
    const int w = in.w;
    out = Tensor3(out_ch, h, w);
    for (int oc = 0; oc < out_ch; ++oc) {
        const double* wc = W + static_cast<std::size_t>(oc) * in.c * 9;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double acc = b[oc];
                for (int ic = 0; ic < in.c; ++ic) {
                    const double* wk = wc + static_cast<std::size_t>(ic) * 9;
                    const double* plane = in.data.data() + static_cast<std::size_t>(ic) * h * w;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = y + ky - 1;
                        if (iy < 0 || iy >= h) continue;
                        const double* row = plane + static_cast<std::size_t>(iy) * w;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ix = x + kx - 1;
                            if (ix < 0 || ix >= w) continue;
                            acc += row[ix] * wk[ky * 3 + kx];
                        }
                    }
                }
                out.at(oc, y, x) = acc > 0.0 ? acc : 0.0;
            }
        }
    }
}

Tensor3 maxpool2(const Tensor3& in, std::vector<int>* argmax) {
    const int oh = in.h / 2;
    const int ow = in.w / 2;
    Tensor3 out(in.c, oh, ow);
    if (argmax) argmax->assign(out.data.size(), 0);
    for (int c = 0; c < in.c; ++c) {
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                int best = (2 * y) * in.w + 2 * x;
                double bv = in.data[static_cast<std::size_t>(c) * in.h * in.w + best];
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const int idx = (2 * y + dy) * in.w + (2 * x + dx);
                        const double v = in.data[static_cast<std::size_t>(c) * in.h * in.w + idx];
                        if (v > bv) {
                            bv = v;
                            best = idx;
                        }
                    }
                }
                out.at(c, y, x) = bv;
                if (argmax) (*argmax)[(static_cast<std::size_t>(c) * oh + y) * ow + x] = best;
            }
        }
    }
    return out;
}

std::vector<double> global_avg_pool(const Tensor3& in) {
    std::vector<double> out(static_cast<std::size_t>(in.c), 0.0);
    const double inv = 1.0 / static_cast<double>(in.plane_size());
    for (int c = 0; c < in.c; ++c) {
        double s = 0.0;
        const double* plane = in.data.data() + static_cast<std::size_t>(c) * in.plane_size();
        for (std::size_t i = 0; i < in.plane_size(); ++i) s += plane[i];
        out[static_cast<std::size_t>(c)] = s * inv;
    }
    return out;
}

}  // namespace

void Model::compute_layout() {
    block_layout_.clear();
    std::size_t off = 0;
    int in_ch = spec_.in_channels + (spec_.coord_channels ? 2 : 0);
    for (const auto& b : spec_.blocks) {
        BlockLayout l;
        l.in_ch = in_ch;
        l.out_ch = b.out_channels;
        l.w_off = off;
        off += static_cast<std::size_t>(b.out_channels) * in_ch * 9;
        l.b_off = off;
        off += static_cast<std::size_t>(b.out_channels);
        block_layout_.push_back(l);
        in_ch = b.out_channels;
    }
    head_width_ = in_ch;
    fc_w_off_ = off;
    off += static_cast<std::size_t>(spec_.num_classes) * head_width_;
    fc_b_off_ = off;
    off += static_cast<std::size_t>(spec_.num_classes);
    params_.resize(off);
}

Model Model::build(const ToyCnnSpec& spec, std::uint64_t seed) {
    if (spec.blocks.empty()) throw ConfigError("model spec needs at least one conv block");
    if (spec.in_channels < 1 || spec.num_classes < 1 || spec.input_h < 4 || spec.input_w < 4) {
        throw ConfigError("invalid model spec dimensions");
    }
    if (spec.dropout_rate < 0.0 || spec.dropout_rate >= 1.0) {
        throw ConfigError("dropout_rate must be in [0,1)");
    }
    Model m;
    m.spec_ = spec;
    m.compute_layout();

    // Fan-in scaled uniform init for weights, zero biases.
    auto rng = make_rng(seed, fnv1a64("model-init"));
    for (const auto& l : m.block_layout_) {
        const double s = 1.0 / std::sqrt(static_cast<double>(l.in_ch) * 9.0);
        std::uniform_real_distribution<double> dist(-s, s);
        for (std::size_t i = l.w_off; i < l.b_off; ++i) m.params_[i] = dist(rng);
    }
    {
        const double s = 1.0 / std::sqrt(static_cast<double>(m.head_width_));
        std::uniform_real_distribution<double> dist(-s, s);
        for (std::size_t i = m.fc_w_off_; i < m.fc_b_off_; ++i) m.params_[i] = dist(rng);
    }
    return m;
}

std::uint64_t Model::parameter_hash() const {
    return fnv1a64(params_.data(), params_.size() * sizeof(double));
}

std::vector<std::string> Model::capture_layers() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
        out.push_back("conv" + std::to_string(i + 1));
    }
    return out;
}

std::string Model::last_conv_layer() const {
    return "conv" + std::to_string(spec_.blocks.size());
}

void Model::check_input(const Tensor4& images) const {
    if (images.c != spec_.in_channels || images.h != spec_.input_h || images.w != spec_.input_w) {
        throw ShapeError("forward: input " + std::to_string(images.c) + "x" +
                         std::to_string(images.h) + "x" + std::to_string(images.w) +
                         " does not match model input " + std::to_string(spec_.in_channels) + "x" +
                         std::to_string(spec_.input_h) + "x" + std::to_string(spec_.input_w));
    }
    if (images.n < 1) throw ShapeError("forward: empty batch");
    if (!all_finite(images.data)) throw std::invalid_argument("forward: non-finite input");
}

namespace {

struct ItemRun {
    Tensor3 input;
    std::vector<Tensor3> acts;     // post-ReLU, pre-pool
    std::vector<Tensor3> outputs;  // post-pool
    std::vector<std::vector<int>> argmax;
    std::vector<double> gap;
};

}  // namespace

struct ModelKernels {
    static ItemRun run_item(const Model& m, const double* img, bool want_pool_argmax) {
        ItemRun r;
        r.input = with_coords(img, m.spec_.in_channels, m.spec_.input_h, m.spec_.input_w,
                              m.spec_.coord_channels);
        const Tensor3* x = &r.input;
        for (std::size_t i = 0; i < m.spec_.blocks.size(); ++i) {
            const auto& l = m.block_layout_[i];
            Tensor3 act;
            conv3x3_relu(*x, m.params_.data() + l.w_off, m.params_.data() + l.b_off, l.out_ch, act);
            r.acts.push_back(std::move(act));
            if (m.spec_.blocks[i].pool) {
                std::vector<int> am;
                r.outputs.push_back(maxpool2(r.acts.back(), want_pool_argmax ? &am : nullptr));
                r.argmax.push_back(std::move(am));
            } else {
                r.outputs.push_back(r.acts.back());
                r.argmax.emplace_back();
            }
            x = &r.outputs.back();
        }
        r.gap = global_avg_pool(*x);
        return r;
    }

    static void head_logits(const Model& m, const std::vector<double>& head_in, double* logits) {
        const int C = m.spec_.num_classes;
        const int K = m.head_width_;
        const double* W = m.params_.data() + m.fc_w_off_;
        const double* b = m.params_.data() + m.fc_b_off_;
        for (int c = 0; c < C; ++c) {
            double acc = b[c];
            for (int k = 0; k < K; ++k) acc += W[static_cast<std::size_t>(c) * K + k] * head_in[static_cast<std::size_t>(k)];
            logits[c] = acc;
        }
    }
};

Matrix Model::forward(const Tensor4& images) const {
    check_input(images);
    Matrix logits(images.n, spec_.num_classes);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < images.n; ++i) {
        ItemRun r = ModelKernels::run_item(*this, images.item(i), false);
        ModelKernels::head_logits(*this, r.gap, &logits.at(i, 0));
    }
    return logits;
}

Matrix Model::forward_with_activations(const Tensor4& images, const std::string& layer,
                                       std::vector<ActivationStack>& activations) const {
    check_input(images);
    int block = -1;
    const auto names = capture_layers();
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == layer) block = static_cast<int>(i);
    }
    if (block < 0) {
        throw std::invalid_argument("unknown capture layer '" + layer + "' in model " + spec_.name);
    }
    Matrix logits(images.n, spec_.num_classes);
    activations.assign(static_cast<std::size_t>(images.n), ActivationStack{});
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < images.n; ++i) {
        ItemRun r = ModelKernels::run_item(*this, images.item(i), false);
        ModelKernels::head_logits(*this, r.gap, &logits.at(i, 0));
        activations[static_cast<std::size_t>(i)] = {layer, std::move(r.acts[static_cast<std::size_t>(block)])};
    }
    return logits;
}

Matrix Model::forward_train(const Tensor4& images, std::mt19937_64& rng, TrainContext& ctx) const {
    check_input(images);
    const int K = head_width_;
    const double keep = 1.0 - spec_.dropout_rate;

    // Masks are drawn serially, in item order, before the parallel section.
    std::vector<std::vector<double>> masks(static_cast<std::size_t>(images.n));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int i = 0; i < images.n; ++i) {
        auto& m = masks[static_cast<std::size_t>(i)];
        m.assign(static_cast<std::size_t>(K), 1.0);
        if (spec_.dropout_rate > 0.0) {
            for (int k = 0; k < K; ++k) m[static_cast<std::size_t>(k)] = unif(rng) < keep ? 1.0 / keep : 0.0;
        }
    }

    Matrix logits(images.n, spec_.num_classes);
    ctx.items.assign(static_cast<std::size_t>(images.n), TrainContext::Item{});
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < images.n; ++i) {
        ItemRun r = ModelKernels::run_item(*this, images.item(i), true);
        auto& it = ctx.items[static_cast<std::size_t>(i)];
        it.dropout_mask = masks[static_cast<std::size_t>(i)];
        it.head_input.assign(static_cast<std::size_t>(K), 0.0);
        for (int k = 0; k < K; ++k) {
            it.head_input[static_cast<std::size_t>(k)] = r.gap[static_cast<std::size_t>(k)] * it.dropout_mask[static_cast<std::size_t>(k)];
        }
        ModelKernels::head_logits(*this, it.head_input, &logits.at(i, 0));
        it.input = std::move(r.input);
        it.block_acts = std::move(r.acts);
        it.block_outputs = std::move(r.outputs);
        it.pool_argmax = std::move(r.argmax);
        it.gap = std::move(r.gap);
    }
    return logits;
}

void Model::backward(const Matrix& dlogits, const TrainContext& ctx, std::vector<double>& grad) const {
    grad.assign(params_.size(), 0.0);
    if (frozen_) return;
    if (dlogits.rows != static_cast<int>(ctx.items.size()) || dlogits.cols != spec_.num_classes) {
        throw ShapeError("backward: dlogits shape does not match recorded forward context");
    }
    const int B = dlogits.rows;
    const int C = spec_.num_classes;
    const int K = head_width_;
    const int nblocks = static_cast<int>(spec_.blocks.size());

    std::vector<std::vector<double>> item_grads(static_cast<std::size_t>(B));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < B; ++i) {
        const auto& it = ctx.items[static_cast<std::size_t>(i)];
        auto& g = item_grads[static_cast<std::size_t>(i)];
        g.assign(params_.size(), 0.0);

        // Head.
        const double* W = params_.data() + fc_w_off_;
        std::vector<double> dhead(static_cast<std::size_t>(K), 0.0);
        for (int c = 0; c < C; ++c) {
            const double dl = dlogits.at(i, c);
            g[fc_b_off_ + static_cast<std::size_t>(c)] += dl;
            for (int k = 0; k < K; ++k) {
                g[fc_w_off_ + static_cast<std::size_t>(c) * K + k] += dl * it.head_input[static_cast<std::size_t>(k)];
                dhead[static_cast<std::size_t>(k)] += dl * W[static_cast<std::size_t>(c) * K + k];
            }
        }
        // Dropout, then GAP spread.
        const Tensor3& last = it.block_outputs.back();
        Tensor3 dout(last.c, last.h, last.w);
        const double inv_plane = 1.0 / static_cast<double>(last.plane_size());
        for (int k = 0; k < K; ++k) {
            const double dk = dhead[static_cast<std::size_t>(k)] * it.dropout_mask[static_cast<std::size_t>(k)] * inv_plane;
            double* plane = dout.data.data() + static_cast<std::size_t>(k) * dout.plane_size();
            for (std::size_t px = 0; px < dout.plane_size(); ++px) plane[px] = dk;
        }

        // Conv blocks, reversed.
        for (int bi = nblocks - 1; bi >= 0; --bi) {
            const auto& l = block_layout_[static_cast<std::size_t>(bi)];
            const Tensor3& act = it.block_acts[static_cast<std::size_t>(bi)];
            const Tensor3& in = bi == 0 ? it.input : it.block_outputs[static_cast<std::size_t>(bi - 1)];

            Tensor3 dact;
            if (spec_.blocks[static_cast<std::size_t>(bi)].pool) {
                dact = Tensor3(act.c, act.h, act.w);
                const auto& am = it.pool_argmax[static_cast<std::size_t>(bi)];
                for (int c = 0; c < dout.c; ++c) {
                    for (std::size_t px = 0; px < dout.plane_size(); ++px) {
                        const std::size_t oidx = static_cast<std::size_t>(c) * dout.plane_size() + px;
                        dact.data[static_cast<std::size_t>(c) * act.plane_size() + static_cast<std::size_t>(am[oidx])] += dout.data[oidx];
                    }
                }
            } else {
                dact = std::move(dout);
            }
            // ReLU gate.
            for (std::size_t px = 0; px < dact.data.size(); ++px) {
                if (act.data[px] <= 0.0) dact.data[px] = 0.0;
            }
            // Parameter grads and input grad.
            Tensor3 din(in.c, in.h, in.w);
            const int h = act.h;
            const int w = act.w;
            for (int oc = 0; oc < l.out_ch; ++oc) {
                const double* wc = params_.data() + l.w_off + static_cast<std::size_t>(oc) * l.in_ch * 9;
                double* gwc = g.data() + l.w_off + static_cast<std::size_t>(oc) * l.in_ch * 9;
                double gb = 0.0;
                for (int y = 0; y < h; ++y) {
                    for (int x = 0; x < w; ++x) {
                        const double d = dact.at(oc, y, x);
                        if (d == 0.0) continue;
                        gb += d;
                        for (int ic = 0; ic < l.in_ch; ++ic) {
                            for (int ky = 0; ky < 3; ++ky) {
                                const int iy = y + ky - 1;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int ix = x + kx - 1;
                                    if (ix < 0 || ix >= w) continue;
                                    gwc[static_cast<std::size_t>(ic) * 9 + ky * 3 + kx] += d * in.at(ic, iy, ix);
                                    din.at(ic, iy, ix) += d * wc[static_cast<std::size_t>(ic) * 9 + ky * 3 + kx];
                                }
                            }
                        }
                    }
                }
                g[l.b_off + static_cast<std::size_t>(oc)] += gb;
            }
            dout = std::move(din);
        }
    }
    for (int i = 0; i < B; ++i) {
        const auto& g = item_grads[static_cast<std::size_t>(i)];
        for (std::size_t p = 0; p < grad.size(); ++p) grad[p] += g[p];
    }
}

Model build_toy_teacher(std::uint64_t seed, int in_channels, int input_h, int input_w,
                        int num_classes) {
    ToyCnnSpec spec;
    spec.name = "toy_teacher";
    spec.in_channels = in_channels;
    spec.input_h = input_h;
    spec.input_w = input_w;
    spec.num_classes = num_classes;
    spec.blocks = {{16, true}, {32, true}, {32, false}};
    return Model::build(spec, seed);
}

Model build_toy_student(std::uint64_t seed, int in_channels, int input_h, int input_w,
                        int num_classes) {
    ToyCnnSpec spec;
    spec.name = "toy_student";
    spec.in_channels = in_channels;
    spec.input_h = input_h;
    spec.input_w = input_w;
    spec.num_classes = num_classes;
    spec.blocks = {{8, true}, {16, false}};
    return Model::build(spec, seed);
}

Model build_model(const std::string& name, std::uint64_t seed, int in_channels, int input_h,
                  int input_w, int num_classes) {
    if (name == "toy_teacher") return build_toy_teacher(seed, in_channels, input_h, input_w, num_classes);
    if (name == "toy_student") return build_toy_student(seed, in_channels, input_h, input_w, num_classes);
    throw ConfigError("unknown model '" + name + "' (registry: toy_teacher, toy_student)");
}

// ---------------------------------------------------------------------------
// Checkpoint I/O. Layout: magic "KDXC" | u32 version | u32 header length |
// header JSON | u64 parameter count | raw little-endian doubles.
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'K', 'D', 'X', 'C'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void Model::save(const std::filesystem::path& path, const CheckpointMeta& meta) const {
    json header;
    header["name"] = spec_.name;
    header["in_channels"] = spec_.in_channels;
    header["input_h"] = spec_.input_h;
    header["input_w"] = spec_.input_w;
    header["num_classes"] = spec_.num_classes;
    header["dropout_rate"] = spec_.dropout_rate;
    header["coord_channels"] = spec_.coord_channels;
    json blocks = json::array();
    for (const auto& b : spec_.blocks) blocks.push_back({{"out", b.out_channels}, {"pool", b.pool}});
    header["blocks"] = blocks;
    header["frozen"] = frozen_;
    header["epoch"] = meta.epoch;
    header["seed"] = meta.seed;
    header["config_hash"] = meta.config_hash;
    header["parameter_hash"] = hash_hex(parameter_hash());
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    out.write(kMagic, 4);
    const std::uint32_t ver = kVersion;
    const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
    out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    const std::uint64_t count = params_.size();
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    out.write(reinterpret_cast<const char*>(params_.data()),
              static_cast<std::streamsize>(params_.size() * sizeof(double)));
    if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

Model Model::load(const std::filesystem::path& path, CheckpointMeta* meta) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("not a checkpoint file: " + path.string());
    }
    std::uint32_t ver = 0, hlen = 0;
    in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || ver != kVersion) throw std::runtime_error("unsupported checkpoint version");
    std::string hs(hlen, '\0');
    in.read(hs.data(), hlen);
    const json header = json::parse(hs);

    ToyCnnSpec spec;
    spec.name = header.at("name").get<std::string>();
    spec.in_channels = header.at("in_channels").get<int>();
    spec.input_h = header.at("input_h").get<int>();
    spec.input_w = header.at("input_w").get<int>();
    spec.num_classes = header.at("num_classes").get<int>();
    spec.dropout_rate = header.at("dropout_rate").get<double>();
    spec.coord_channels = header.at("coord_channels").get<bool>();
    for (const auto& b : header.at("blocks")) {
        spec.blocks.push_back({b.at("out").get<int>(), b.at("pool").get<bool>()});
    }
    Model m;
    m.spec_ = spec;
    m.compute_layout();

    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (!in || count != m.params_.size()) {
        throw std::runtime_error("checkpoint parameter count mismatch in " + path.string());
    }
    in.read(reinterpret_cast<char*>(m.params_.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path.string());
    m.frozen_ = header.at("frozen").get<bool>();

    if (meta) {
        meta->epoch = header.at("epoch").get<int>();
        meta->seed = header.at("seed").get<std::uint64_t>();
        meta->config_hash = header.at("config_hash").get<std::string>();
    }
    return m;
}

}  // namespace kdx
