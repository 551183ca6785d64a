#include "syncast/forecaster.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace syncast {

void ModelConfig::validate() const {
    if (embed_dim <= 0) fail(ErrorCode::InvalidConfig, "embed_dim: must be positive");
    if (heads <= 0 || embed_dim % heads != 0) fail(ErrorCode::InvalidConfig, "heads: must divide embed_dim");
    if (encoder_depth < 0 || decoder_depth < 0 || depth() < 1)
        fail(ErrorCode::InvalidConfig, "encoder_depth/decoder_depth: need at least one block");
    if (window.levels < 1 || window.lat < 1 || window.lon < 1)
        fail(ErrorCode::InvalidConfig, "window: every extent must be positive");
    if (mlp_ratio < 1) fail(ErrorCode::InvalidConfig, "mlp_ratio: must be >= 1");
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) fail(ErrorCode::InvalidConfig, "drop_rate: must lie in [0, 1)");
    if (levels < 2) fail(ErrorCode::InvalidConfig, "levels: need at least 2 pressure levels");
    if (grid_lat <= 0 || grid_lon <= 0) fail(ErrorCode::InvalidConfig, "grid_lat/grid_lon: must be positive");
    if (bias_origin_lat < 0 || bias_origin_lon < 0) fail(ErrorCode::InvalidConfig, "bias origin must be nonnegative");
    if (lead_hours <= 0) fail(ErrorCode::InvalidConfig, "lead_hours: must be positive");
}

FieldSet FieldSet::zeros(int levels, int n_lat, int n_lon) {
    FieldSet f;
    f.levels = levels;
    f.n_lat = n_lat;
    f.n_lon = n_lon;
    const std::size_t cells = static_cast<std::size_t>(n_lat) * n_lon;
    f.upper.assign(static_cast<std::size_t>(levels) * cells * kUpperVars, 0.0);
    f.surface.assign(cells * kSurfaceVars, 0.0);
    return f;
}

FieldSet FieldSet::from_state(const AtmosphericState& s) {
    FieldSet f;
    f.levels = s.levels;
    f.n_lat = s.grid.n_lat;
    f.n_lon = s.grid.n_lon;
    f.upper.assign(s.upper.begin(), s.upper.end());
    f.surface.assign(s.surface.begin(), s.surface.end());
    return f;
}

AtmosphericState FieldSet::to_state(const GridSpec& grid, std::int64_t timestamp) const {
    if (grid.n_lat != n_lat || grid.n_lon != n_lon) fail(ErrorCode::Shape, "field set does not match grid");
    AtmosphericState s = AtmosphericState::zeros(grid, levels, timestamp);
    for (std::size_t k = 0; k < upper.size(); ++k) s.upper[k] = static_cast<float>(upper[k]);
    for (std::size_t k = 0; k < surface.size(); ++k) s.surface[k] = static_cast<float>(surface[k]);
    return s;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

std::string block_prefix(std::size_t k) { return "blocks." + std::to_string(k) + "."; }

template <class Params, class Fn>
void visit_params(Params& p, Fn&& fn) {
    auto lin = [&](const std::string& name, auto& l) {
        fn(name + ".weight", l.weight);
        if (!l.bias.data.empty()) fn(name + ".bias", l.bias);
    };
    lin("embed_upper", p.embed_upper);
    lin("embed_surface", p.embed_surface);
    for (std::size_t k = 0; k < p.blocks.size(); ++k) {
        auto& b = p.blocks[k];
        const std::string pre = block_prefix(k);
        fn(pre + "ln1.gamma", b.ln1_gamma);
        fn(pre + "ln1.beta", b.ln1_beta);
        lin(pre + "qkv", b.qkv);
        lin(pre + "proj", b.proj);
        fn(pre + "ln2.gamma", b.ln2_gamma);
        fn(pre + "ln2.beta", b.ln2_beta);
        lin(pre + "fc1", b.fc1);
        lin(pre + "fc2", b.fc2);
        fn(pre + "position_bias", b.position_bias);
    }
    lin("recover_upper", p.recover_upper);
    lin("recover_surface", p.recover_surface);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng({seed, 0x4d4f44454cu});
    const std::size_t C = static_cast<std::size_t>(cfg.embed_dim);
    const std::size_t hidden = C * static_cast<std::size_t>(cfg.mlp_ratio);
    const double branch_scale = 1.0 / std::sqrt(2.0 * cfg.depth());

    ModelParams p;
    p.config = cfg;
    p.embed_upper = LinearParams::make(C, static_cast<std::size_t>(cfg.upper_patch_features()), true);
    p.embed_surface = LinearParams::make(C, static_cast<std::size_t>(cfg.surface_patch_features()), true);
    fill_normal(p.embed_upper.weight, rng, 1.0 / std::sqrt(static_cast<double>(cfg.upper_patch_features())));
    fill_normal(p.embed_surface.weight, rng, 1.0 / std::sqrt(static_cast<double>(cfg.surface_patch_features())));

    for (int k = 0; k < cfg.depth(); ++k) {
        BlockParams b;
        b.ln1_gamma = Tensor({C}, 1.0);
        b.ln1_beta = Tensor({C});
        b.ln2_gamma = Tensor({C}, 1.0);
        b.ln2_beta = Tensor({C});
        b.qkv = LinearParams::make(3 * C, C, true);
        b.proj = LinearParams::make(C, C, true);
        b.fc1 = LinearParams::make(hidden, C, true);
        b.fc2 = LinearParams::make(C, hidden, true);
        fill_normal(b.qkv.weight, rng, 1.0 / std::sqrt(static_cast<double>(C)));
        fill_normal(b.proj.weight, rng, branch_scale / std::sqrt(static_cast<double>(C)));
        fill_normal(b.fc1.weight, rng, 1.0 / std::sqrt(static_cast<double>(C)));
        fill_normal(b.fc2.weight, rng, branch_scale / std::sqrt(static_cast<double>(hidden)));
        b.position_bias = Tensor({static_cast<std::size_t>(cfg.token_planes()),
                                  static_cast<std::size_t>(cfg.bias_tokens_lat()),
                                  static_cast<std::size_t>(cfg.bias_tokens_lon()), static_cast<std::size_t>(cfg.heads),
                                  static_cast<std::size_t>(cfg.relative_positions())});
        fill_normal(b.position_bias, rng, 0.02);
        p.blocks.push_back(std::move(b));
    }
    p.recover_upper = LinearParams::make(static_cast<std::size_t>(cfg.upper_patch_features()), C, false);
    p.recover_surface = LinearParams::make(static_cast<std::size_t>(cfg.surface_patch_features()), C, false);
    fill_normal(p.recover_upper.weight, rng, 0.1 / std::sqrt(static_cast<double>(C)));
    fill_normal(p.recover_surface.weight, rng, 0.1 / std::sqrt(static_cast<double>(C)));
    return p;
}

ModelParams ModelParams::zeros_like() const {
    ModelParams z = *this;
    z.frozen = false;
    z.for_each([](const std::string&, Tensor& t) { t.zero(); });
    return z;
}

void ModelParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) { visit_params(*this, fn); }

void ModelParams::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    visit_params(*this, fn);
}

std::vector<std::string> ModelParams::adaptable_linears() const {
    std::vector<std::string> names;
    for (std::size_t k = 0; k < blocks.size(); ++k)
        for (const char* n : {"qkv", "proj", "fc1", "fc2"}) names.push_back(block_prefix(k) + n);
    return names;
}

LinearParams& ModelParams::linear(const std::string& name) {
    return const_cast<LinearParams&>(static_cast<const ModelParams&>(*this).linear(name));
}

const LinearParams& ModelParams::linear(const std::string& name) const {
    if (name.rfind("blocks.", 0) == 0) {
        const auto dot = name.find('.', 7);
        if (dot != std::string::npos) {
            const std::size_t k = std::stoul(name.substr(7, dot - 7));
            const std::string leaf = name.substr(dot + 1);
            if (k < blocks.size()) {
                if (leaf == "qkv") return blocks[k].qkv;
                if (leaf == "proj") return blocks[k].proj;
                if (leaf == "fc1") return blocks[k].fc1;
                if (leaf == "fc2") return blocks[k].fc2;
            }
        }
    }
    if (name == "embed_upper") return embed_upper;
    if (name == "embed_surface") return embed_surface;
    if (name == "recover_upper") return recover_upper;
    if (name == "recover_surface") return recover_surface;
    fail(ErrorCode::Shape, "no linear map named '" + name + "'");
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

bool ModelParams::operator==(const ModelParams& o) const {
    if (!(config == o.config) || blocks.size() != o.blocks.size()) return false;
    std::vector<const Tensor*> mine, theirs;
    for_each([&](const std::string&, const Tensor& t) { mine.push_back(&t); });
    o.for_each([&](const std::string&, const Tensor& t) { theirs.push_back(&t); });
    if (mine.size() != theirs.size()) return false;
    for (std::size_t k = 0; k < mine.size(); ++k)
        if (!(*mine[k] == *theirs[k])) return false;
    return true;
}

LoraAdapterSet LoraAdapterSet::init(const ModelParams& base, const LoraConfig& cfg, std::uint64_t seed) {
    if (cfg.rank <= 0) fail(ErrorCode::InvalidConfig, "lora rank must be positive");
    if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) fail(ErrorCode::InvalidConfig, "lora dropout must lie in [0, 1)");
    Rng rng({seed, 0x4c4f5241u});
    LoraAdapterSet set;
    set.config = cfg;
    const auto r = static_cast<std::size_t>(cfg.rank);
    for (const auto& name : base.adaptable_linears()) {
        const auto& lin = base.linear(name);
        LoraPair pair;
        pair.A = Tensor({r, lin.in_features()});
        pair.B = Tensor({lin.out_features(), r});
        fill_uniform(pair.A, rng, 1.0 / std::sqrt(static_cast<double>(lin.in_features())));
        set.pairs.emplace(name, std::move(pair));
    }
    return set;
}

LoraAdapterSet LoraAdapterSet::zeros_like() const {
    LoraAdapterSet z = *this;
    z.for_each([](const std::string&, Tensor& t) { t.zero(); });
    return z;
}

void LoraAdapterSet::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (auto& [name, pair] : pairs) {
        fn(name + ".lora_A", pair.A);
        fn(name + ".lora_B", pair.B);
    }
}

void LoraAdapterSet::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    for (const auto& [name, pair] : pairs) {
        fn(name + ".lora_A", pair.A);
        fn(name + ".lora_B", pair.B);
    }
}

bool LoraAdapterSet::operator==(const LoraAdapterSet& o) const {
    if (config.rank != o.config.rank || config.alpha != o.config.alpha || config.dropout != o.config.dropout ||
        config.scale_enabled != o.config.scale_enabled || pairs.size() != o.pairs.size())
        return false;
    for (const auto& [name, pair] : pairs) {
        auto it = o.pairs.find(name);
        if (it == o.pairs.end() || !(pair.A == it->second.A) || !(pair.B == it->second.B)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Geometry

TokenOffset token_offset(const RegionSpec& region, const ModelConfig& cfg) {
    if (region.i0 % kPatch != 0 || region.j0 % kPatch != 0)
        fail(ErrorCode::Alignment, "region origin (" + std::to_string(region.i0) + ", " + std::to_string(region.j0) +
                                       ") is not on a patch boundary");
    if (region.i0 < 0 || region.j0 < 0 || region.height() <= 0 || region.width() <= 0)
        fail(ErrorCode::Alignment, "region window is empty or negative");
    TokenOffset off{region.i0 / kPatch, region.j0 / kPatch};
    const int tl = (region.height() + kPatch - 1) / kPatch;
    const int tw = (region.width() + kPatch - 1) / kPatch;
    if (off.lat + tl > cfg.bias_tokens_lat() || off.lon + tw > cfg.bias_tokens_lon())
        fail(ErrorCode::Alignment, "region extends beyond the positional-bias grid");
    return off;
}

namespace {

struct Geometry {
    int levels = 0, n_lat = 0, n_lon = 0;
    int upper_planes = 0, planes = 0, tok_lat = 0, tok_lon = 0;
    std::size_t plane_tokens = 0, upper_tokens = 0, tokens = 0;
    TokenOffset offset;
};

Geometry make_geometry(const ModelConfig& cfg, int levels, int n_lat, int n_lon, TokenOffset off) {
    if (levels != cfg.levels)
        fail(ErrorCode::Shape, "state has " + std::to_string(levels) + " levels, model expects " +
                                   std::to_string(cfg.levels));
    Geometry g;
    g.levels = levels;
    g.n_lat = n_lat;
    g.n_lon = n_lon;
    g.upper_planes = cfg.upper_planes();
    g.planes = cfg.token_planes();
    g.tok_lat = (n_lat + kPatch - 1) / kPatch;
    g.tok_lon = (n_lon + kPatch - 1) / kPatch;
    g.plane_tokens = static_cast<std::size_t>(g.tok_lat) * g.tok_lon;
    g.upper_tokens = g.plane_tokens * g.upper_planes;
    g.tokens = g.plane_tokens * g.planes;
    g.offset = off;
    if (off.lat < 0 || off.lon < 0 || off.lat + g.tok_lat > cfg.bias_tokens_lat() ||
        off.lon + g.tok_lon > cfg.bias_tokens_lon())
        fail(ErrorCode::Alignment, "state extends beyond the positional-bias grid");
    return g;
}

struct Window {
    std::vector<int> tokens;
    std::vector<std::size_t> bias_base;  // per query token: offset of its (head 0, rel 0) bias entry
    std::vector<int> rel;                // T*T relative-offset indices
};

std::vector<Window> partition(const Geometry& g, const ModelConfig& cfg, bool shifted) {
    const auto& w = cfg.window;
    const int sz = shifted ? w.levels / 2 : 0;
    const int sh = shifted ? w.lat / 2 : 0;
    const int sw = shifted ? w.lon / 2 : 0;
    const int rl = 2 * w.lat - 1, rw = 2 * w.lon - 1;
    const std::size_t per_pos = static_cast<std::size_t>(cfg.heads) * cfg.relative_positions();

    std::map<std::tuple<int, int, int>, std::vector<int>> groups;
    for (int d = 0; d < g.planes; ++d)
        for (int h = 0; h < g.tok_lat; ++h)
            for (int x = 0; x < g.tok_lon; ++x) {
                const int ha = cfg.bias_origin_lat + g.offset.lat + h;
                const int xa = cfg.bias_origin_lon + g.offset.lon + x;
                const auto key = std::make_tuple((d + sz) / w.levels, (ha + sh) / w.lat, (xa + sw) / w.lon);
                groups[key].push_back(static_cast<int>((d * g.tok_lat + h) * g.tok_lon + x));
            }

    std::vector<Window> out;
    out.reserve(groups.size());
    for (auto& [key, toks] : groups) {
        Window win;
        win.tokens = std::move(toks);
        const std::size_t T = win.tokens.size();
        win.bias_base.resize(T);
        win.rel.resize(T * T);
        auto coords = [&](int t) {
            const int d = t / static_cast<int>(g.plane_tokens);
            const int rem = t % static_cast<int>(g.plane_tokens);
            return std::array<int, 3>{d, rem / g.tok_lon, rem % g.tok_lon};
        };
        for (std::size_t i = 0; i < T; ++i) {
            const auto [dq, hq, xq] = coords(win.tokens[i]);
            const std::size_t pos = (static_cast<std::size_t>(dq) * cfg.bias_tokens_lat() + (g.offset.lat + hq)) *
                                        cfg.bias_tokens_lon() +
                                    (g.offset.lon + xq);
            win.bias_base[i] = pos * per_pos;
            for (std::size_t j = 0; j < T; ++j) {
                const auto [dk, hk, xk] = coords(win.tokens[j]);
                win.rel[i * T + j] = ((dq - dk + w.levels - 1) * rl + (hq - hk + w.lat - 1)) * rw + (xq - xk + w.lon - 1);
            }
        }
        out.push_back(std::move(win));
    }
    return out;
}

// Patch features of the replicate-padded input.
void gather_features(const FieldSet& in, const Geometry& g, Mat& fu, Mat& fs) {
    constexpr int P = kPatch;
    fu.resize(static_cast<Eigen::Index>(g.upper_tokens), 2 * P * P * kUpperVars);
    fs.resize(static_cast<Eigen::Index>(g.plane_tokens), P * P * kSurfaceVars);
    const std::size_t cells = static_cast<std::size_t>(g.n_lat) * g.n_lon;
    for (int d = 0; d < g.upper_planes; ++d)
        for (int h = 0; h < g.tok_lat; ++h)
            for (int x = 0; x < g.tok_lon; ++x) {
                const Eigen::Index row = (static_cast<Eigen::Index>(d) * g.tok_lat + h) * g.tok_lon + x;
                Eigen::Index col = 0;
                for (int dz = 0; dz < 2; ++dz) {
                    const int z = std::min(2 * d + dz, g.levels - 1);
                    for (int py = 0; py < P; ++py) {
                        const int i = std::min(P * h + py, g.n_lat - 1);
                        for (int px = 0; px < P; ++px) {
                            const int j = std::min(P * x + px, g.n_lon - 1);
                            const std::size_t base = ((z * cells) + static_cast<std::size_t>(i) * g.n_lon + j) * kUpperVars;
                            for (int v = 0; v < kUpperVars; ++v) fu(row, col++) = in.upper[base + v];
                        }
                    }
                }
            }
    for (int h = 0; h < g.tok_lat; ++h)
        for (int x = 0; x < g.tok_lon; ++x) {
            const Eigen::Index row = static_cast<Eigen::Index>(h) * g.tok_lon + x;
            Eigen::Index col = 0;
            for (int py = 0; py < P; ++py) {
                const int i = std::min(P * h + py, g.n_lat - 1);
                for (int px = 0; px < P; ++px) {
                    const int j = std::min(P * x + px, g.n_lon - 1);
                    const std::size_t base = (static_cast<std::size_t>(i) * g.n_lon + j) * kSurfaceVars;
                    for (int v = 0; v < kSurfaceVars; ++v) fs(row, col++) = in.surface[base + v];
                }
            }
        }
}

// Scatter recovered patch values into fields, dropping padding (add = true accumulates).
void scatter_patches(const Mat& ru, const Mat& rs, const Geometry& g, FieldSet& out) {
    constexpr int P = kPatch;
    const std::size_t cells = static_cast<std::size_t>(g.n_lat) * g.n_lon;
    for (int d = 0; d < g.upper_planes; ++d)
        for (int h = 0; h < g.tok_lat; ++h)
            for (int x = 0; x < g.tok_lon; ++x) {
                const Eigen::Index row = (static_cast<Eigen::Index>(d) * g.tok_lat + h) * g.tok_lon + x;
                Eigen::Index col = 0;
                for (int dz = 0; dz < 2; ++dz) {
                    const int z = 2 * d + dz;
                    for (int py = 0; py < P; ++py) {
                        const int i = P * h + py;
                        for (int px = 0; px < P; ++px, col += kUpperVars) {
                            const int j = P * x + px;
                            if (z >= g.levels || i >= g.n_lat || j >= g.n_lon) continue;
                            const std::size_t base = ((z * cells) + static_cast<std::size_t>(i) * g.n_lon + j) * kUpperVars;
                            for (int v = 0; v < kUpperVars; ++v) out.upper[base + v] += ru(row, col + v);
                        }
                    }
                }
            }
    for (int h = 0; h < g.tok_lat; ++h)
        for (int x = 0; x < g.tok_lon; ++x) {
            const Eigen::Index row = static_cast<Eigen::Index>(h) * g.tok_lon + x;
            Eigen::Index col = 0;
            for (int py = 0; py < P; ++py) {
                const int i = P * h + py;
                for (int px = 0; px < P; ++px, col += kSurfaceVars) {
                    const int j = P * x + px;
                    if (i >= g.n_lat || j >= g.n_lon) continue;
                    const std::size_t base = (static_cast<std::size_t>(i) * g.n_lon + j) * kSurfaceVars;
                    for (int v = 0; v < kSurfaceVars; ++v) out.surface[base + v] += rs(row, col + v);
                }
            }
        }
}

// Adjoint of scatter_patches: gradient w.r.t. the recovered patch matrices.
void gather_patch_grads(const FieldSet& grad, const Geometry& g, Mat& dru, Mat& drs) {
    constexpr int P = kPatch;
    dru = Mat::Zero(static_cast<Eigen::Index>(g.upper_tokens), 2 * P * P * kUpperVars);
    drs = Mat::Zero(static_cast<Eigen::Index>(g.plane_tokens), P * P * kSurfaceVars);
    const std::size_t cells = static_cast<std::size_t>(g.n_lat) * g.n_lon;
    for (int d = 0; d < g.upper_planes; ++d)
        for (int h = 0; h < g.tok_lat; ++h)
            for (int x = 0; x < g.tok_lon; ++x) {
                const Eigen::Index row = (static_cast<Eigen::Index>(d) * g.tok_lat + h) * g.tok_lon + x;
                Eigen::Index col = 0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int py = 0; py < P; ++py)
                        for (int px = 0; px < P; ++px, col += kUpperVars) {
                            const int z = 2 * d + dz, i = P * h + py, j = P * x + px;
                            if (z >= g.levels || i >= g.n_lat || j >= g.n_lon) continue;
                            const std::size_t base = ((z * cells) + static_cast<std::size_t>(i) * g.n_lon + j) * kUpperVars;
                            for (int v = 0; v < kUpperVars; ++v) dru(row, col + v) = grad.upper[base + v];
                        }
            }
    for (int h = 0; h < g.tok_lat; ++h)
        for (int x = 0; x < g.tok_lon; ++x) {
            const Eigen::Index row = static_cast<Eigen::Index>(h) * g.tok_lon + x;
            Eigen::Index col = 0;
            for (int py = 0; py < P; ++py)
                for (int px = 0; px < P; ++px, col += kSurfaceVars) {
                    const int i = P * h + py, j = P * x + px;
                    if (i >= g.n_lat || j >= g.n_lon) continue;
                    const std::size_t base = (static_cast<std::size_t>(i) * g.n_lon + j) * kSurfaceVars;
                    for (int v = 0; v < kSurfaceVars; ++v) drs(row, col + v) = grad.surface[base + v];
                }
        }
}

// ---------------------------------------------------------------------------
// Attention

Mat attention_forward(const Mat& qkv, const Tensor& bias, int heads, int nrel, const std::vector<Window>& wins,
                      std::vector<Mat>* probs) {
    const Eigen::Index C = qkv.cols() / 3;
    const Eigen::Index dh = C / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat out = Mat::Zero(qkv.rows(), C);
    for (const auto& w : wins) {
        const Eigen::Index T = static_cast<Eigen::Index>(w.tokens.size());
        Mat q(T, C), k(T, C), v(T, C);
        for (Eigen::Index i = 0; i < T; ++i) {
            const auto r = qkv.row(w.tokens[static_cast<std::size_t>(i)]);
            q.row(i) = r.segment(0, C);
            k.row(i) = r.segment(C, C);
            v.row(i) = r.segment(2 * C, C);
        }
        for (int hd = 0; hd < heads; ++hd) {
            Mat s = (q.middleCols(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose()) * scale;
            for (Eigen::Index i = 0; i < T; ++i) {
                const double* brow = bias.data.data() + w.bias_base[static_cast<std::size_t>(i)] +
                                     static_cast<std::size_t>(hd) * nrel;
                for (Eigen::Index j = 0; j < T; ++j) s(i, j) += brow[w.rel[static_cast<std::size_t>(i * T + j)]];
                const double mx = s.row(i).maxCoeff();
                s.row(i) = (s.row(i).array() - mx).exp();
                s.row(i) /= s.row(i).sum();
            }
            const Mat o = s * v.middleCols(hd * dh, dh);
            for (Eigen::Index i = 0; i < T; ++i)
                out.row(w.tokens[static_cast<std::size_t>(i)]).segment(hd * dh, dh) = o.row(i);
            if (probs) probs->push_back(std::move(s));
        }
    }
    return out;
}

Mat attention_backward(const Mat& dout, const Mat& qkv, const std::vector<Mat>& probs, int heads, int nrel,
                       const std::vector<Window>& wins, Tensor* dbias) {
    const Eigen::Index C = qkv.cols() / 3;
    const Eigen::Index dh = C / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat dqkv = Mat::Zero(qkv.rows(), qkv.cols());
    std::size_t idx = 0;
    for (const auto& w : wins) {
        const Eigen::Index T = static_cast<Eigen::Index>(w.tokens.size());
        Mat q(T, C), k(T, C), v(T, C), dO(T, C);
        for (Eigen::Index i = 0; i < T; ++i) {
            const int t = w.tokens[static_cast<std::size_t>(i)];
            q.row(i) = qkv.row(t).segment(0, C);
            k.row(i) = qkv.row(t).segment(C, C);
            v.row(i) = qkv.row(t).segment(2 * C, C);
            dO.row(i) = dout.row(t);
        }
        for (int hd = 0; hd < heads; ++hd) {
            const Mat& p = probs[idx++];
            const auto dOh = dO.middleCols(hd * dh, dh);
            const Mat dp = dOh * v.middleCols(hd * dh, dh).transpose();
            const Mat dv = p.transpose() * dOh;
            Mat ds = dp;
            for (Eigen::Index i = 0; i < T; ++i) {
                const double dot = (dp.row(i).array() * p.row(i).array()).sum();
                ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
            }
            const Mat dq = (ds * k.middleCols(hd * dh, dh)) * scale;
            const Mat dk = (ds.transpose() * q.middleCols(hd * dh, dh)) * scale;
            for (Eigen::Index i = 0; i < T; ++i) {
                const int t = w.tokens[static_cast<std::size_t>(i)];
                dqkv.row(t).segment(hd * dh, dh) += dq.row(i);
                dqkv.row(t).segment(C + hd * dh, dh) += dk.row(i);
                dqkv.row(t).segment(2 * C + hd * dh, dh) += dv.row(i);
            }
            if (dbias) {
                for (Eigen::Index i = 0; i < T; ++i) {
                    double* brow = dbias->data.data() + w.bias_base[static_cast<std::size_t>(i)] +
                                   static_cast<std::size_t>(hd) * nrel;
                    for (Eigen::Index j = 0; j < T; ++j) brow[w.rel[static_cast<std::size_t>(i * T + j)]] += ds(i, j);
                }
            }
        }
    }
    return dqkv;
}

// ---------------------------------------------------------------------------
// Blocks

struct BlockCache {
    LayerNormCache ln1, ln2;
    LinearCache qkv_c, proj_c, fc1_c, fc2_c;
    Mat qkv;
    std::vector<Mat> probs;
    Mat fc1_out;
    Mat drop_attn, drop_mlp;  // residual-branch dropout masks (empty when off)
};

struct LoraLookup {
    const LoraAdapterSet* adapters = nullptr;
    Rng* rng = nullptr;

    LoraUse use(const std::string& name) const {
        LoraUse u;
        if (!adapters) return u;
        auto it = adapters->pairs.find(name);
        if (it == adapters->pairs.end()) return u;
        u.pair = &it->second;
        u.scale = adapters->config.scaling();
        u.dropout = adapters->config.dropout;
        u.rng = rng;
        return u;
    }
};

Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    Mat m(rows, cols);
    const double keep = 1.0 - rate;
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    return m;
}

Mat block_forward(const Mat& x, const BlockParams& bp, const std::string& pre, const ModelConfig& cfg,
                  const std::vector<Window>& wins, const LoraLookup& lora, Rng* rng, BlockCache* c) {
    const Mat h1 = layer_norm_forward(x, bp.ln1_gamma, bp.ln1_beta, c ? &c->ln1 : nullptr);
    Mat qkv = linear_forward(h1, bp.qkv, lora.use(pre + "qkv"), c ? &c->qkv_c : nullptr);
    const Mat att = attention_forward(qkv, bp.position_bias, cfg.heads, cfg.relative_positions(), wins,
                                      c ? &c->probs : nullptr);
    Mat p = linear_forward(att, bp.proj, lora.use(pre + "proj"), c ? &c->proj_c : nullptr);
    const bool drop = rng && cfg.drop_rate > 0.0;
    if (drop) {
        Mat m = dropout_mask(p.rows(), p.cols(), cfg.drop_rate, *rng);
        p = p.cwiseProduct(m);
        if (c) c->drop_attn = std::move(m);
    }
    const Mat x1 = x + p;
    const Mat h2 = layer_norm_forward(x1, bp.ln2_gamma, bp.ln2_beta, c ? &c->ln2 : nullptr);
    Mat f1 = linear_forward(h2, bp.fc1, lora.use(pre + "fc1"), c ? &c->fc1_c : nullptr);
    const Mat g = gelu(f1);
    Mat f2 = linear_forward(g, bp.fc2, lora.use(pre + "fc2"), c ? &c->fc2_c : nullptr);
    if (drop) {
        Mat m = dropout_mask(f2.rows(), f2.cols(), cfg.drop_rate, *rng);
        f2 = f2.cwiseProduct(m);
        if (c) c->drop_mlp = std::move(m);
    }
    if (c) {
        c->qkv = std::move(qkv);
        c->fc1_out = std::move(f1);
    }
    return x1 + f2;
}

Mat block_backward(const Mat& dy, const BlockParams& bp, const std::string& pre, const ModelConfig& cfg,
                   const std::vector<Window>& wins, const LoraLookup& lora, const BlockCache& c, BlockParams* g,
                   LoraAdapterSet* lg) {
    auto grads = [&](const char* leaf, LinearParams* base) {
        LinearGrads out;
        out.base = base;
        if (lg) {
            auto it = lg->pairs.find(pre + leaf);
            if (it != lg->pairs.end()) out.lora = &it->second;
        }
        return out;
    };
    Mat dx1 = dy;
    const Mat df2 = c.drop_mlp.size() > 0 ? Mat(dy.cwiseProduct(c.drop_mlp)) : dy;
    const Mat dgel = linear_backward(df2, c.fc2_c, bp.fc2, lora.use(pre + "fc2"), grads("fc2", g ? &g->fc2 : nullptr));
    const Mat df1 = gelu_backward(dgel, c.fc1_out);
    const Mat dh2 = linear_backward(df1, c.fc1_c, bp.fc1, lora.use(pre + "fc1"), grads("fc1", g ? &g->fc1 : nullptr));
    dx1 += layer_norm_backward(dh2, c.ln2, bp.ln2_gamma, g ? &g->ln2_gamma : nullptr, g ? &g->ln2_beta : nullptr);

    Mat dx = dx1;
    const Mat dp = c.drop_attn.size() > 0 ? Mat(dx1.cwiseProduct(c.drop_attn)) : dx1;
    const Mat datt = linear_backward(dp, c.proj_c, bp.proj, lora.use(pre + "proj"), grads("proj", g ? &g->proj : nullptr));
    const Mat dqkv = attention_backward(datt, c.qkv, c.probs, cfg.heads, cfg.relative_positions(), wins,
                                       g ? &g->position_bias : nullptr);
    const Mat dh1 = linear_backward(dqkv, c.qkv_c, bp.qkv, lora.use(pre + "qkv"), grads("qkv", g ? &g->qkv : nullptr));
    dx += layer_norm_backward(dh1, c.ln1, bp.ln1_gamma, g ? &g->ln1_gamma : nullptr, g ? &g->ln1_beta : nullptr);
    return dx;
}

void check_finite(const Mat& m, int layer) {
    if (!m.allFinite()) fail(ErrorCode::NumericFailure, "non-finite activation at layer " + std::to_string(layer), layer);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

struct ForecasterTape::Impl {
    const ModelParams* params = nullptr;
    LoraLookup lora;
    Geometry geo;
    std::vector<Window> windows[2];
    LinearCache embed_u, embed_s;
    std::vector<BlockCache> blocks;
    Mat tokens;  // final token matrix fed to recovery
    FieldSet output;

    static std::unique_ptr<Impl> make(const FieldSet& in, const ModelParams& params, const LoraAdapterSet* adapters,
                                      TokenOffset offset, Rng* rng) {
        auto impl = std::make_unique<Impl>();
        impl->params = &params;
        impl->lora = {adapters, rng};
        impl->geo = make_geometry(params.config, in.levels, in.n_lat, in.n_lon, offset);
        impl->windows[0] = partition(impl->geo, params.config, false);
        if (params.config.shift_windows && params.blocks.size() > 1)
            impl->windows[1] = partition(impl->geo, params.config, true);
        return impl;
    }

    void run(const FieldSet& in, Rng* rng, bool keep) {
        const auto& P = *params;
        const auto& cfg = P.config;
        Mat fu, fs;
        gather_features(in, geo, fu, fs);
        const Mat xu = linear_forward(fu, P.embed_upper, {}, keep ? &embed_u : nullptr);
        const Mat xs = linear_forward(fs, P.embed_surface, {}, keep ? &embed_s : nullptr);
        Mat x(static_cast<Eigen::Index>(geo.tokens), cfg.embed_dim);
        x.topRows(xu.rows()) = xu;
        x.bottomRows(xs.rows()) = xs;
        check_finite(x, 0);

        if (keep) blocks.resize(P.blocks.size());
        for (std::size_t k = 0; k < P.blocks.size(); ++k) {
            const bool shifted = cfg.shift_windows && (k % 2 == 1);
            x = block_forward(x, P.blocks[k], block_prefix(k), cfg, windows[shifted ? 1 : 0], lora, rng,
                              keep ? &blocks[k] : nullptr);
            check_finite(x, static_cast<int>(k) + 1);
        }

        const Mat ru = x.topRows(static_cast<Eigen::Index>(geo.upper_tokens)) * P.recover_upper.weight.mat().transpose();
        const Mat rs = x.bottomRows(static_cast<Eigen::Index>(geo.plane_tokens)) * P.recover_surface.weight.mat().transpose();
        const int last = static_cast<int>(P.blocks.size()) + 1;
        check_finite(ru, last);
        check_finite(rs, last);
        output = cfg.residual ? in : FieldSet::zeros(geo.levels, geo.n_lat, geo.n_lon);
        scatter_patches(ru, rs, geo, output);
        if (keep) tokens = std::move(x);
    }
};

namespace {

FieldSet run_inference(const FieldSet& in, const ModelParams& params, const LoraAdapterSet* adapters,
                       TokenOffset offset) {
    auto impl = ForecasterTape::Impl::make(in, params, adapters, offset, nullptr);
    impl->run(in, nullptr, false);
    return std::move(impl->output);
}

}  // namespace

ForecasterTape::ForecasterTape(const FieldSet& input, const ModelParams& params, const LoraAdapterSet* adapters,
                               TokenOffset offset, Rng* dropout_rng)
    : impl_(Impl::make(input, params, adapters, offset, dropout_rng)) {
    impl_->run(input, dropout_rng, true);
}

ForecasterTape::~ForecasterTape() = default;
ForecasterTape::ForecasterTape(ForecasterTape&&) noexcept = default;
ForecasterTape& ForecasterTape::operator=(ForecasterTape&&) noexcept = default;

const FieldSet& ForecasterTape::output() const { return impl_->output; }

void ForecasterTape::backward(const FieldSet& grad_output, ModelParams* pg, LoraAdapterSet* lg) const {
    const auto& I = *impl_;
    const auto& P = *I.params;
    const auto& cfg = P.config;
    if (grad_output.upper.size() != I.output.upper.size() || grad_output.surface.size() != I.output.surface.size())
        fail(ErrorCode::Shape, "output gradient does not match forward output");

    Mat dru, drs;
    gather_patch_grads(grad_output, I.geo, dru, drs);
    const Eigen::Index nu = static_cast<Eigen::Index>(I.geo.upper_tokens);
    const Eigen::Index ns = static_cast<Eigen::Index>(I.geo.plane_tokens);
    if (pg) {
        pg->recover_upper.weight.mat().noalias() += dru.transpose() * I.tokens.topRows(nu);
        pg->recover_surface.weight.mat().noalias() += drs.transpose() * I.tokens.bottomRows(ns);
    }
    Mat dx(I.tokens.rows(), I.tokens.cols());
    dx.topRows(nu) = dru * P.recover_upper.weight.mat();
    dx.bottomRows(ns) = drs * P.recover_surface.weight.mat();

    // Backward needs no dropout draws; masks live in the caches.
    const LoraLookup lora{I.lora.adapters, nullptr};
    for (std::size_t k = P.blocks.size(); k-- > 0;) {
        const bool shifted = cfg.shift_windows && (k % 2 == 1);
        dx = block_backward(dx, P.blocks[k], block_prefix(k), cfg, I.windows[shifted ? 1 : 0], lora, I.blocks[k],
                            pg ? &pg->blocks[k] : nullptr, lg);
    }
    if (pg) {
        linear_backward(dx.topRows(nu), I.embed_u, P.embed_upper, {}, {&pg->embed_upper, nullptr});
        linear_backward(dx.bottomRows(ns), I.embed_s, P.embed_surface, {}, {&pg->embed_surface, nullptr});
    }
}

// ---------------------------------------------------------------------------
// Public operations

Tensor patch_embed(const AtmosphericState& normalized, const ModelParams& params) {
    const FieldSet in = FieldSet::from_state(normalized);
    const Geometry g = make_geometry(params.config, in.levels, in.n_lat, in.n_lon,
                                     {0, 0});
    Mat fu, fs;
    gather_features(in, g, fu, fs);
    const Mat xu = linear_forward(fu, params.embed_upper, {}, nullptr);
    const Mat xs = linear_forward(fs, params.embed_surface, {}, nullptr);
    const auto C = static_cast<std::size_t>(params.config.embed_dim);
    Tensor out({static_cast<std::size_t>(g.planes), static_cast<std::size_t>(g.tok_lat),
                static_cast<std::size_t>(g.tok_lon), C});
    MatMap m(out.data.data(), static_cast<Eigen::Index>(g.tokens), static_cast<Eigen::Index>(C));
    m.topRows(xu.rows()) = xu;
    m.bottomRows(xs.rows()) = xs;
    return out;
}

FieldSet patch_recover(const Tensor& tokens, const ModelParams& params, int levels, int n_lat, int n_lon) {
    const auto& cfg = params.config;
    if (levels != cfg.levels) fail(ErrorCode::Shape, "level count does not match model");
    const int tl = (n_lat + kPatch - 1) / kPatch, tw = (n_lon + kPatch - 1) / kPatch;
    const std::vector<std::size_t> expect{static_cast<std::size_t>(cfg.token_planes()), static_cast<std::size_t>(tl),
                                          static_cast<std::size_t>(tw), static_cast<std::size_t>(cfg.embed_dim)};
    if (tokens.shape != expect)
        fail(ErrorCode::Shape, "token tensor " + shape_string(tokens.shape) + " != expected " + shape_string(expect));
    Geometry g;
    g.levels = levels;
    g.n_lat = n_lat;
    g.n_lon = n_lon;
    g.upper_planes = cfg.upper_planes();
    g.planes = cfg.token_planes();
    g.tok_lat = tl;
    g.tok_lon = tw;
    g.plane_tokens = static_cast<std::size_t>(tl) * tw;
    g.upper_tokens = g.plane_tokens * g.upper_planes;
    g.tokens = g.plane_tokens * g.planes;
    ConstMatMap x(tokens.data.data(), static_cast<Eigen::Index>(g.tokens), cfg.embed_dim);
    const Mat ru = x.topRows(static_cast<Eigen::Index>(g.upper_tokens)) * params.recover_upper.weight.mat().transpose();
    const Mat rs = x.bottomRows(static_cast<Eigen::Index>(g.plane_tokens)) * params.recover_surface.weight.mat().transpose();
    FieldSet out = FieldSet::zeros(levels, n_lat, n_lon);
    scatter_patches(ru, rs, g, out);
    return out;
}

Tensor crop_positional_bias(const Tensor& global_bias, const RegionSpec& region) {
    if (global_bias.shape.size() != 5) fail(ErrorCode::Shape, "positional bias must be 5-dimensional");
    const std::size_t D = global_bias.shape[0], Hg = global_bias.shape[1], Wg = global_bias.shape[2];
    const std::size_t inner = global_bias.shape[3] * global_bias.shape[4];
    if (region.i0 < 0 || region.j0 < 0 || region.i0 % kPatch != 0 || region.j0 % kPatch != 0)
        fail(ErrorCode::Alignment, "region origin is not on a patch boundary");
    const std::size_t h0 = static_cast<std::size_t>(region.i0 / kPatch);
    const std::size_t w0 = static_cast<std::size_t>(region.j0 / kPatch);
    const std::size_t hl = static_cast<std::size_t>((region.height() + kPatch - 1) / kPatch);
    const std::size_t wl = static_cast<std::size_t>((region.width() + kPatch - 1) / kPatch);
    if (hl == 0 || wl == 0 || h0 + hl > Hg || w0 + wl > Wg)
        fail(ErrorCode::Alignment, "region does not fit inside the positional-bias grid");
    Tensor out({D, hl, wl, global_bias.shape[3], global_bias.shape[4]});
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t h = 0; h < hl; ++h)
            for (std::size_t w = 0; w < wl; ++w) {
                const double* src = global_bias.data.data() + ((d * Hg + h0 + h) * Wg + w0 + w) * inner;
                double* dst = out.data.data() + ((d * hl + h) * wl + w) * inner;
                std::copy(src, src + inner, dst);
            }
    return out;
}

ModelParams crop_to_region(const ModelParams& params, const RegionSpec& region) {
    const TokenOffset off = token_offset(region, params.config);
    ModelParams out = params;
    out.config.grid_lat = (region.height() + kPatch - 1) / kPatch * kPatch;
    out.config.grid_lon = (region.width() + kPatch - 1) / kPatch * kPatch;
    out.config.bias_origin_lat = params.config.bias_origin_lat + off.lat;
    out.config.bias_origin_lon = params.config.bias_origin_lon + off.lon;
    for (auto& b : out.blocks) b.position_bias = crop_positional_bias(b.position_bias, region);
    return out;
}

AtmosphericState forward(const AtmosphericState& normalized, const ModelParams& params,
                         const LoraAdapterSet* adapters, const RegionSpec* region) {
    const TokenOffset off = region ? token_offset(*region, params.config) : TokenOffset{};
    const FieldSet out = run_inference(FieldSet::from_state(normalized), params, adapters, off);
    return out.to_state(normalized.grid, normalized.timestamp + params.config.lead_hours);
}

Prediction predict(const AtmosphericState& normalized, const ModelParams& params, const NormalizationStats& stats,
                   const LoraAdapterSet* adapters, const RegionSpec* region) {
    Prediction p;
    p.normalized = forward(normalized, params, adapters, region);
    p.physical = denormalize_state(p.normalized, stats);
    return p;
}

ModelParams merge_lora(const ModelParams& params, const LoraAdapterSet& adapters) {
    ModelParams out = params;
    out.frozen = false;
    const double s = adapters.config.scaling();
    for (const auto& [name, pair] : adapters.pairs) {
        LinearParams& lin = out.linear(name);
        const std::size_t d = lin.out_features(), k = lin.in_features();
        if (pair.A.shape.size() != 2 || pair.B.shape.size() != 2 || pair.A.shape[1] != k || pair.B.shape[0] != d ||
            pair.A.shape[0] != pair.B.shape[1] || pair.A.shape[0] != static_cast<std::size_t>(adapters.config.rank))
            fail(ErrorCode::Shape, "adapter '" + name + "' shapes A" + shape_string(pair.A.shape) + " B" +
                                       shape_string(pair.B.shape) + " do not fit W" + shape_string(lin.weight.shape) +
                                       " at rank " + std::to_string(adapters.config.rank));
        lin.weight.mat().noalias() += s * (pair.B.mat() * pair.A.mat());
    }
    return out;
}

std::vector<AtmosphericState> rollout(const AtmosphericState& normalized, const ModelParams& params, int n,
                                      const NormalizationStats* stats, const LoraAdapterSet* adapters,
                                      const RegionSpec* region) {
    if (n < 1) fail(ErrorCode::InvalidConfig, "rollout length must be >= 1");
    std::vector<AtmosphericState> out;
    out.reserve(static_cast<std::size_t>(n));
    AtmosphericState current = normalized;
    for (int k = 0; k < n; ++k) {
        try {
            out.push_back(forward(current, params, adapters, region));
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NumericFailure) throw;
            fail(ErrorCode::NumericFailure, "rollout step " + std::to_string(k) + ": " + e.what(), k);
        }
        current = stats ? normalize_state(denormalize_state(out.back(), *stats), *stats) : out.back();
    }
    return out;
}

}  // namespace syncast
