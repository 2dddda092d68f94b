#pragma once

// Weak-perspective camera model and landmark-driven fitting of bilinear
// model coefficients: alternating damped Gauss-Newton blocks (camera, then
// identity+expression jointly) with gradient-step fallback.

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include <json.hpp>

#include "dnpm/common.hpp"
#include "dnpm/geometry.hpp"
#include "dnpm/mesh.hpp"

namespace dnpm {

struct Camera {
    double scale = 1.0;
    Vec3 rotation{0.0, 0.0, 0.0};  // axis-angle, radians
    Vec2 translation{0.0, 0.0};    // image units
};

inline Eigen::Matrix3d rotation_matrix(const Vec3& axis_angle) {
    Eigen::Vector3d aa(axis_angle[0], axis_angle[1], axis_angle[2]);
    double theta = aa.norm();
    if (theta < 1e-14) return Eigen::Matrix3d::Identity();
    return Eigen::AngleAxisd(theta, aa / theta).toRotationMatrix();
}

// Wraps |axis-angle| into [0, pi] using (theta, n) == (2*pi - theta, -n).
inline Vec3 wrap_axis_angle(const Vec3& axis_angle) {
    Eigen::Vector3d aa(axis_angle[0], axis_angle[1], axis_angle[2]);
    double theta = aa.norm();
    if (theta <= M_PI || theta < 1e-14) return axis_angle;
    Eigen::Vector3d axis = aa / theta;
    theta = std::fmod(theta, 2.0 * M_PI);
    if (theta > M_PI) {
        theta = 2.0 * M_PI - theta;
        axis = -axis;
    }
    Eigen::Vector3d w = axis * theta;
    return {w[0], w[1], w[2]};
}

inline void check_camera(const Camera& cam) {
    require(cam.scale > 0.0, "camera scale must be positive");
    require(norm3(cam.rotation) < M_PI + 1e-6, "camera rotation norm must be < pi");
}

inline Vec2 project(const Camera& cam, const Vec3& x) {
    Eigen::Matrix3d R = rotation_matrix(cam.rotation);
    Eigen::Vector3d p = R * Eigen::Vector3d(x[0], x[1], x[2]);
    return {cam.scale * p[0] + cam.translation[0], cam.scale * p[1] + cam.translation[1]};
}

struct FitConfig {
    int max_iters = 50;
    double lambda_id = 1e-3;
    double lambda_exp = 1e-3;
    double tol = 1e-7;        // per-iteration objective improvement to declare stationarity
    double mu_init = 1e-3;    // Levenberg damping
    double mu_scale = 10.0;
    int max_mu_raises = 8;
};

inline void to_json(nlohmann::json& j, const FitConfig& c) {
    j = {{"max_iters", c.max_iters},   {"lambda_id", c.lambda_id}, {"lambda_exp", c.lambda_exp},
         {"tol", c.tol},               {"mu_init", c.mu_init},     {"mu_scale", c.mu_scale},
         {"max_mu_raises", c.max_mu_raises}};
}

inline void from_json(const nlohmann::json& j, FitConfig& c) {
    c.max_iters = j.value("max_iters", c.max_iters);
    c.lambda_id = j.value("lambda_id", c.lambda_id);
    c.lambda_exp = j.value("lambda_exp", c.lambda_exp);
    c.tol = j.value("tol", c.tol);
    c.mu_init = j.value("mu_init", c.mu_init);
    c.mu_scale = j.value("mu_scale", c.mu_scale);
    c.max_mu_raises = j.value("max_mu_raises", c.max_mu_raises);
}

struct FitResult {
    std::vector<double> w_id;
    std::vector<double> w_exp;
    Camera camera;
    double residual = 0.0;   // RMS projected landmark distance, image units
    double objective = 0.0;  // full regularized objective
    bool converged = false;
    int iterations = 0;
};

namespace detail {

// One damped Gauss-Newton step on theta for the given residual function;
// falls back to a backtracking gradient step when damping alone fails.
// Returns true if the objective strictly decreased.
inline bool lm_block_step(std::vector<double>& theta,
                          const std::function<Eigen::VectorXd(const std::vector<double>&)>& resid,
                          double& mu, const FitConfig& cfg) {
    int n = static_cast<int>(theta.size());
    Eigen::VectorXd r0 = resid(theta);
    double f0 = r0.squaredNorm();
    Eigen::MatrixXd J(r0.size(), n);
    for (int i = 0; i < n; ++i) {
        double h = 1e-7 * std::max(1.0, std::fabs(theta[i]));
        std::vector<double> tp = theta, tm = theta;
        tp[i] += h;
        tm[i] -= h;
        J.col(i) = (resid(tp) - resid(tm)) / (2.0 * h);
    }
    Eigen::MatrixXd JtJ = J.transpose() * J;
    Eigen::VectorXd g = J.transpose() * r0;

    for (int raise = 0; raise <= cfg.max_mu_raises; ++raise) {
        Eigen::MatrixXd A = JtJ + mu * Eigen::MatrixXd::Identity(n, n);
        Eigen::VectorXd delta = A.ldlt().solve(-g);
        std::vector<double> trial = theta;
        for (int i = 0; i < n; ++i) trial[i] += delta[i];
        double f1 = resid(trial).squaredNorm();
        if (std::isfinite(f1) && f1 < f0) {
            theta = trial;
            mu = std::max(mu / 3.0, 1e-12);
            return true;
        }
        mu *= cfg.mu_scale;
    }
    // Gradient fallback: steepest descent on the squared objective.
    double alpha = 1.0 / std::max(1.0, g.norm());
    for (int bt = 0; bt < 24; ++bt, alpha *= 0.5) {
        std::vector<double> trial = theta;
        for (int i = 0; i < n; ++i) trial[i] -= alpha * g[i];
        double f1 = resid(trial).squaredNorm();
        if (std::isfinite(f1) && f1 < f0) {
            theta = trial;
            return true;
        }
    }
    return false;
}

}  // namespace detail

// Minimizes sum_j ||project(V[l_j]) - p_j||^2 + lambda_id*|w_id|^2 +
// lambda_exp*|w_exp|^2 over (camera, w_id, w_exp). Non-convergence within
// max_iters is reported via the flag, never as an exception.
inline FitResult fit_landmarks(const CoreTensor& core, const std::vector<int>& landmark_vertex_ids,
                               const std::vector<Vec2>& observed_2d, const std::vector<double>& init_w_id,
                               const std::vector<double>& init_w_exp, const Camera& init_camera,
                               const FitConfig& cfg = {}) {
    int k = static_cast<int>(landmark_vertex_ids.size());
    require(k >= 6, "fit_landmarks: need at least 6 landmarks, got " + std::to_string(k));
    require(static_cast<int>(observed_2d.size()) == k,
            "fit_landmarks: observation count must match landmark count");
    int nv = core.n_vert();
    for (int idx : landmark_vertex_ids)
        require(idx >= 0 && idx < nv, "fit_landmarks: landmark vertex id out of range");
    require(static_cast<int>(init_w_id.size()) == core.n_id() &&
                static_cast<int>(init_w_exp.size()) == core.n_exp(),
            "fit_landmarks: init coefficient sizes must match core");
    check_camera(init_camera);
    require(cfg.max_iters >= 0 && cfg.lambda_id >= 0 && cfg.lambda_exp >= 0,
            "fit_landmarks: invalid config");

    FitResult best;
    best.w_id = init_w_id;
    best.w_exp = init_w_exp;
    best.camera = init_camera;

    int n_id = core.n_id(), n_exp = core.n_exp();
    double sqrt_lid = std::sqrt(cfg.lambda_id), sqrt_lexp = std::sqrt(cfg.lambda_exp);

    auto full_residual = [&](const Camera& cam, const std::vector<double>& wid,
                             const std::vector<double>& wexp) {
        std::vector<Vec3> verts = bilinear_vertices(core, wid, wexp);
        Eigen::VectorXd r(2 * k + n_id + n_exp);
        for (int j = 0; j < k; ++j) {
            Vec2 p = project(cam, verts[landmark_vertex_ids[j]]);
            r[2 * j] = p[0] - observed_2d[j][0];
            r[2 * j + 1] = p[1] - observed_2d[j][1];
        }
        for (int i = 0; i < n_id; ++i) r[2 * k + i] = sqrt_lid * wid[i];
        for (int i = 0; i < n_exp; ++i) r[2 * k + n_id + i] = sqrt_lexp * wexp[i];
        return r;
    };
    auto evaluate = [&](FitResult& res) {
        Eigen::VectorXd r = full_residual(res.camera, res.w_id, res.w_exp);
        res.objective = r.squaredNorm();
        res.residual = std::sqrt(r.head(2 * k).squaredNorm() / k);
    };
    evaluate(best);

    double mu_cam = cfg.mu_init, mu_coef = cfg.mu_init;
    for (int iter = 0; iter < cfg.max_iters; ++iter) {
        double before = best.objective;

        // Camera block: [scale, r0, r1, r2, t0, t1].
        std::vector<double> tc = {best.camera.scale,          best.camera.rotation[0],
                                  best.camera.rotation[1],    best.camera.rotation[2],
                                  best.camera.translation[0], best.camera.translation[1]};
        auto cam_of = [&](const std::vector<double>& t) {
            Camera c;
            c.scale = std::max(t[0], 1e-9);
            c.rotation = wrap_axis_angle({t[1], t[2], t[3]});
            c.translation = {t[4], t[5]};
            return c;
        };
        detail::lm_block_step(
            tc, [&](const std::vector<double>& t) { return full_residual(cam_of(t), best.w_id, best.w_exp); },
            mu_cam, cfg);
        best.camera = cam_of(tc);

        // Coefficient block: [w_id; w_exp] jointly.
        std::vector<double> tw = best.w_id;
        tw.insert(tw.end(), best.w_exp.begin(), best.w_exp.end());
        auto split = [&](const std::vector<double>& t) {
            return std::make_pair(std::vector<double>(t.begin(), t.begin() + n_id),
                                  std::vector<double>(t.begin() + n_id, t.end()));
        };
        detail::lm_block_step(
            tw,
            [&](const std::vector<double>& t) {
                auto [wid, wexp] = split(t);
                return full_residual(best.camera, wid, wexp);
            },
            mu_coef, cfg);
        std::tie(best.w_id, best.w_exp) = split(tw);

        evaluate(best);
        best.iterations = iter + 1;
        if (before - best.objective <= cfg.tol * std::max(1.0, before)) {
            best.converged = true;
            break;
        }
    }
    if (cfg.max_iters == 0) best.converged = true;  // nothing asked, nothing pending
    return best;
}

}  // namespace dnpm
