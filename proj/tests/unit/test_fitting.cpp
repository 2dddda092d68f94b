#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dnpm/fitting.hpp"

using namespace dnpm;

namespace {

// Smooth random core: base head-like shape plus small per-basis perturbations,
// so the fitting landscape is well conditioned.
CoreTensor smooth_core(int n_id, int n_exp, int n_vert, Rng& rng) {
    Tensor data = Tensor::zeros({n_id, n_exp, 3 * n_vert});
    std::vector<Vec3> base(static_cast<std::size_t>(n_vert));
    for (int v = 0; v < n_vert; ++v) {
        double a = 2.0 * M_PI * v / n_vert;
        base[v] = {std::cos(a), std::sin(a), 0.3 * std::sin(2 * a)};
    }
    for (int a = 0; a < n_id; ++a)
        for (int b = 0; b < n_exp; ++b)
            for (int v = 0; v < n_vert; ++v)
                for (int c = 0; c < 3; ++c)
                    data[(static_cast<std::int64_t>(a) * n_exp + b) * 3 * n_vert + 3 * v + c] =
                        base[v][c] + 0.15 * rng.gaussian();
    return CoreTensor(data);
}

}  // namespace

TEST_CASE("camera projection") {
    SECTION("identity rotation is scale-and-shift") {
        Camera cam;
        cam.scale = 2.0;
        cam.translation = {0.5, -1.0};
        Vec2 p = project(cam, {1.0, 2.0, 3.0});
        CHECK(p[0] == Catch::Approx(2.5));
        CHECK(p[1] == Catch::Approx(3.0));
    }
    SECTION("quarter turn about z maps x to y") {
        Camera cam;
        cam.rotation = {0.0, 0.0, M_PI / 2};
        Vec2 p = project(cam, {1.0, 0.0, 0.0});
        CHECK(p[0] == Catch::Approx(0.0).margin(1e-12));
        CHECK(p[1] == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("wrap_axis_angle preserves the rotation") {
        Vec3 aa = {2.5, -2.2, 1.1};  // norm > pi
        REQUIRE(norm3(aa) > M_PI);
        Vec3 w = wrap_axis_angle(aa);
        CHECK(norm3(w) <= M_PI + 1e-12);
        Eigen::Matrix3d R1 = rotation_matrix(aa);
        Eigen::Matrix3d R2 = rotation_matrix(w);
        CHECK((R1 - R2).norm() < 1e-12);
    }
    SECTION("invalid cameras rejected") {
        Camera cam;
        cam.scale = 0.0;
        CHECK_THROWS_AS(check_camera(cam), Error);
        Camera cam2;
        cam2.rotation = {4.0, 0.0, 0.0};
        CHECK_THROWS_AS(check_camera(cam2), Error);
    }
}

TEST_CASE("fit_landmarks") {
    Rng rng(19);
    int n_id = 3, n_exp = 2, n_vert = 40;
    CoreTensor core = smooth_core(n_id, n_exp, n_vert, rng);
    std::vector<int> lm_ids;
    for (int j = 0; j < 10; ++j) lm_ids.push_back(j * 4);

    std::vector<double> true_wid = {0.9, 0.3, -0.2};
    std::vector<double> true_wexp = {1.0, 0.25};
    Camera true_cam;
    true_cam.scale = 1.4;
    true_cam.rotation = {0.05, -0.1, 0.15};
    true_cam.translation = {0.2, -0.3};

    std::vector<Vec3> verts = bilinear_vertices(core, true_wid, true_wexp);
    std::vector<Vec2> observed;
    for (int idx : lm_ids) observed.push_back(project(true_cam, verts[idx]));

    std::vector<double> init_wid = {1.0, 0.0, 0.0};
    std::vector<double> init_wexp = {1.0, 0.0};
    Camera init_cam;  // identity

    SECTION("noise-free observations are fit below 1e-3 image units") {
        FitConfig cfg;
        cfg.max_iters = 100;
        FitResult res = fit_landmarks(core, lm_ids, observed, init_wid, init_wexp, init_cam, cfg);
        CHECK(res.residual < 1e-3);
        CHECK(res.converged);
        check_camera(res.camera);
    }
    SECTION("objective is non-increasing across iteration budgets") {
        double prev = std::numeric_limits<double>::infinity();
        for (int iters : {0, 1, 2, 3, 5, 8, 12, 20}) {
            FitConfig cfg;
            cfg.max_iters = iters;
            FitResult res =
                fit_landmarks(core, lm_ids, observed, init_wid, init_wexp, init_cam, cfg);
            CHECK(res.objective <= prev + 1e-12);
            prev = res.objective;
        }
    }
    SECTION("huge identity regularizer drives w_id to zero") {
        FitConfig cfg;
        cfg.max_iters = 80;
        cfg.lambda_id = 1e12;
        FitResult res = fit_landmarks(core, lm_ids, observed, init_wid, init_wexp, init_cam, cfg);
        double norm = 0.0;
        for (double v : res.w_id) norm += v * v;
        CHECK(std::sqrt(norm) < 1e-4);
    }
    SECTION("zero iterations return the initialization unchanged") {
        std::vector<Vec3> init_verts = bilinear_vertices(core, init_wid, init_wexp);
        std::vector<Vec2> self_obs;
        for (int idx : lm_ids) self_obs.push_back(project(init_cam, init_verts[idx]));
        FitConfig cfg;
        cfg.max_iters = 0;
        FitResult res = fit_landmarks(core, lm_ids, self_obs, init_wid, init_wexp, init_cam, cfg);
        CHECK(res.w_id == init_wid);
        CHECK(res.w_exp == init_wexp);
        CHECK(res.camera.scale == init_cam.scale);
        CHECK(res.residual == 0.0);
        CHECK(res.iterations == 0);
    }
    SECTION("precondition violations rejected") {
        CHECK_THROWS_AS(fit_landmarks(core, {0, 1, 2}, {{0, 0}, {0, 0}, {0, 0}}, init_wid,
                                      init_wexp, init_cam),
                        Error);  // < 6 landmarks
        std::vector<int> bad_ids = lm_ids;
        bad_ids[0] = n_vert + 5;
        CHECK_THROWS_AS(fit_landmarks(core, bad_ids, observed, init_wid, init_wexp, init_cam),
                        Error);
    }
}

TEST_CASE("fit config json round trip") {
    FitConfig c;
    c.max_iters = 77;
    c.lambda_id = 0.25;
    nlohmann::json j = c;
    FitConfig back = j.get<FitConfig>();
    CHECK(back.max_iters == 77);
    CHECK(back.lambda_id == 0.25);
    CHECK(back.lambda_exp == c.lambda_exp);
    // Partial configs keep defaults for missing keys.
    FitConfig partial = nlohmann::json::parse(R"({"max_iters": 5})").get<FitConfig>();
    CHECK(partial.max_iters == 5);
    CHECK(partial.lambda_id == FitConfig{}.lambda_id);
}
