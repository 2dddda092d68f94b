#pragma once

// Bilinear face model (identity x expression core tensor), displacement
// application along vertex normals, and scalar-field baking into UV space.

#include <algorithm>
#include <cmath>
#include <deque>
#include <vector>

#include <Eigen/Dense>

#include "dnpm/common.hpp"
#include "dnpm/image.hpp"
#include "dnpm/mesh.hpp"
#include "dnpm/tensor.hpp"

namespace dnpm {

struct CoreTensor {
    Tensor data;  // [n_id, n_exp, 3 * n_vert]

    CoreTensor() = default;
    explicit CoreTensor(Tensor t) : data(std::move(t)) {
        require(data.rank() == 3, "core tensor must be rank 3, got " + shape_str(data.shape()));
        require(data.dim(2) % 3 == 0, "core tensor geometry axis must be divisible by 3");
        require(data.all_finite(), "core tensor has non-finite entries");
    }

    int n_id() const { return data.dim(0); }
    int n_exp() const { return data.dim(1); }
    int n_vert() const { return data.dim(2) / 3; }
};

// A core tensor bound to the template mesh that supplies faces and uvs.
struct BilinearModel {
    CoreTensor core;
    Mesh template_mesh;

    void check() const {
        check_mesh(template_mesh, /*need_uvs=*/true);
        require(template_mesh.n_vertices() == core.n_vert(),
                "template vertex count must match core tensor");
    }
};

// Contracted vertex positions: core x_id w_id x_exp w_exp, reshaped n_vert x 3.
inline std::vector<Vec3> bilinear_vertices(const CoreTensor& core, const std::vector<double>& w_id,
                                           const std::vector<double>& w_exp) {
    if (static_cast<int>(w_id.size()) != core.n_id() ||
        static_cast<int>(w_exp.size()) != core.n_exp())
        throw ShapeError("bilinear contraction: coefficient lengths (" +
                         std::to_string(w_id.size()) + "," + std::to_string(w_exp.size()) +
                         ") do not match core (" + std::to_string(core.n_id()) + "," +
                         std::to_string(core.n_exp()) + ")");
    int g = core.data.dim(2);
    // Contract identity axis: [n_id, n_exp*g] -> [n_exp, g], then expression axis.
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m_id(
        core.data.data(), core.n_id(), static_cast<Eigen::Index>(core.n_exp()) * g);
    Eigen::Map<const Eigen::VectorXd> vid(w_id.data(), core.n_id());
    Eigen::VectorXd mid = m_id.transpose() * vid;  // n_exp*g
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m_exp(
        mid.data(), core.n_exp(), g);
    Eigen::Map<const Eigen::VectorXd> vexp(w_exp.data(), core.n_exp());
    Eigen::VectorXd geo = m_exp.transpose() * vexp;  // g
    std::vector<Vec3> out(static_cast<std::size_t>(core.n_vert()));
    for (int v = 0; v < core.n_vert(); ++v) out[v] = {geo[3 * v], geo[3 * v + 1], geo[3 * v + 2]};
    return out;
}

inline Mesh bilinear_proxy(const BilinearModel& model, const std::vector<double>& w_id,
                           const std::vector<double>& w_exp) {
    model.check();
    Mesh out = model.template_mesh;
    out.vertices = bilinear_vertices(model.core, w_id, w_exp);
    out.normals.clear();
    return out;
}

// V_h[v] = V_p[v] + s * decode(sample_map(map, uv_v)) * n_v on the subdivided proxy.
inline Mesh apply_displacement(const Mesh& proxy, const DisplacementMap& map, double s,
                               int subdiv_levels, double d_max = 0.002) {
    require(std::isfinite(s), "apply_displacement: s must be finite");
    check_mesh(proxy, /*need_uvs=*/true);
    Mesh sub = compute_vertex_normals(subdivide_midpoint(proxy, subdiv_levels));
    Mesh out = sub;
    for (int v = 0; v < sub.n_vertices(); ++v) {
        double offset = s * decode_displacement(sample_map(map, sub.uvs[v][0], sub.uvs[v][1]), d_max);
        out.vertices[v] = add3(sub.vertices[v], scale3(sub.normals[v], offset));
    }
    return out;
}

// Rasterizes a per-vertex scalar field (unit scale, [0,1]) into UV texels by
// barycentric interpolation; texels covered by no triangle are filled by
// breadth-first dilation from the covered set. Overlapping triangles that
// disagree on a texel raise a chart error.
inline DisplacementMap bake_map(const Mesh& mesh, const std::vector<double>& per_vertex_scalar,
                                int resolution) {
    check_mesh(mesh, /*need_uvs=*/true);
    require(static_cast<int>(per_vertex_scalar.size()) == mesh.n_vertices(),
            "bake_map: scalar count must match vertex count");
    require(resolution >= 2, "bake_map: resolution must be >= 2");
    for (double v : per_vertex_scalar)
        require(std::isfinite(v) && v >= -1e-9 && v <= 1.0 + 1e-9,
                "bake_map: scalars must lie in [0,1]");

    int W = resolution, H = resolution;
    DisplacementMap out(W, H, 0.0);
    std::vector<int> covered_by(static_cast<std::size_t>(W) * H, -1);
    const double tol = 1e-12;

    for (int fi = 0; fi < mesh.n_faces(); ++fi) {
        const Face& f = mesh.faces[fi];
        Vec2 a = mesh.uvs[f[0]], b = mesh.uvs[f[1]], c = mesh.uvs[f[2]];
        double det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        if (std::fabs(det) < 1e-15) continue;  // degenerate in UV space
        // Texel centers: uv = (x/(W-1), y/(H-1)).
        auto to_px = [&](double u, int n) { return u * (n - 1); };
        int x_lo = std::max(0, static_cast<int>(std::floor(to_px(std::min({a[0], b[0], c[0]}), W))));
        int x_hi = std::min(W - 1, static_cast<int>(std::ceil(to_px(std::max({a[0], b[0], c[0]}), W))));
        int y_lo = std::max(0, static_cast<int>(std::floor(to_px(std::min({a[1], b[1], c[1]}), H))));
        int y_hi = std::min(H - 1, static_cast<int>(std::ceil(to_px(std::max({a[1], b[1], c[1]}), H))));
        for (int y = y_lo; y <= y_hi; ++y)
            for (int x = x_lo; x <= x_hi; ++x) {
                double u = static_cast<double>(x) / (W - 1);
                double v = static_cast<double>(y) / (H - 1);
                double l1 = ((b[0] - u) * (c[1] - v) - (c[0] - u) * (b[1] - v)) / det;
                double l2 = ((c[0] - u) * (a[1] - v) - (a[0] - u) * (c[1] - v)) / det;
                double l3 = 1.0 - l1 - l2;
                if (l1 < -tol || l2 < -tol || l3 < -tol) continue;
                double val = l1 * per_vertex_scalar[f[0]] + l2 * per_vertex_scalar[f[1]] +
                             l3 * per_vertex_scalar[f[2]];
                std::size_t idx = static_cast<std::size_t>(y) * W + x;
                if (covered_by[idx] >= 0) {
                    if (std::fabs(out.values[idx] - val) > 1e-9)
                        throw ChartError("bake_map: overlapping UV triangles disagree at texel (" +
                                         std::to_string(x) + "," + std::to_string(y) + ")");
                    continue;  // shared edge/vertex; first writer wins
                }
                covered_by[idx] = fi;
                out.values[idx] = val;
            }
    }

    std::deque<std::pair<int, int>> queue;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (covered_by[static_cast<std::size_t>(y) * W + x] >= 0) queue.emplace_back(x, y);
    if (queue.empty()) throw ChartError("bake_map: no texel covered by any triangle");
    const int dx[4] = {1, -1, 0, 0};
    const int dy[4] = {0, 0, 1, -1};
    while (!queue.empty()) {
        auto [x, y] = queue.front();
        queue.pop_front();
        for (int k = 0; k < 4; ++k) {
            int nx = x + dx[k], ny = y + dy[k];
            if (nx < 0 || nx >= W || ny < 0 || ny >= H) continue;
            std::size_t nidx = static_cast<std::size_t>(ny) * W + nx;
            if (covered_by[nidx] >= 0) continue;
            covered_by[nidx] = mesh.n_faces();  // filled by dilation
            out.values[nidx] = out.at(x, y);
            queue.emplace_back(nx, ny);
        }
    }
    return out;
}

}  // namespace dnpm
