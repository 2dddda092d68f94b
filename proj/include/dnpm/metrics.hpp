#pragma once

// Image-quality metrics (PSNR, SSIM) over unit-scale displacement maps and
// the evaluation-table CSV format.

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dnpm/common.hpp"
#include "dnpm/image.hpp"

namespace dnpm {

inline double psnr(const DisplacementMap& a, const DisplacementMap& b, double max_value = 1.0) {
    if (!a.same_shape(b))
        throw ShapeError("psnr: shape mismatch " + std::to_string(a.width) + "x" +
                         std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                         std::to_string(b.height));
    require(max_value > 0.0, "psnr: max_value must be positive");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        double d = a.values[i] - b.values[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.values.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_value * max_value / mse);
}

struct SsimParams {
    double max_value = 1.0;
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

// Mean local SSIM over all fully-valid window positions (no padding).
inline double ssim(const DisplacementMap& a, const DisplacementMap& b, SsimParams p = {}) {
    if (!a.same_shape(b))
        throw ShapeError("ssim: shape mismatch");
    require(p.max_value > 0.0 && p.sigma > 0.0 && p.window >= 1 && p.window % 2 == 1,
            "ssim: invalid params");
    if (a.width < p.window || a.height < p.window)
        throw ConfigError("ssim: image smaller than " + std::to_string(p.window) + "x" +
                          std::to_string(p.window) + " window");
    int r = p.window / 2;
    std::vector<double> w(static_cast<std::size_t>(p.window) * p.window);
    double wsum = 0.0;
    for (int j = -r; j <= r; ++j)
        for (int i = -r; i <= r; ++i) {
            double g = std::exp(-0.5 * (i * i + j * j) / (p.sigma * p.sigma));
            w[static_cast<std::size_t>(j + r) * p.window + (i + r)] = g;
            wsum += g;
        }
    for (double& v : w) v /= wsum;

    double c1 = (p.k1 * p.max_value) * (p.k1 * p.max_value);
    double c2 = (p.k2 * p.max_value) * (p.k2 * p.max_value);
    double total = 0.0;
    long count = 0;
    for (int cy = r; cy < a.height - r; ++cy)
        for (int cx = r; cx < a.width - r; ++cx) {
            double mx = 0.0, my = 0.0, mxx = 0.0, myy = 0.0, mxy = 0.0;
            for (int j = -r; j <= r; ++j)
                for (int i = -r; i <= r; ++i) {
                    double ww = w[static_cast<std::size_t>(j + r) * p.window + (i + r)];
                    double xa = a.at(cx + i, cy + j);
                    double xb = b.at(cx + i, cy + j);
                    mx += ww * xa;
                    my += ww * xb;
                    mxx += ww * xa * xa;
                    myy += ww * xb * xb;
                    mxy += ww * (xa * xb);  // grouping keeps ssim(a,b) == ssim(b,a) bit-exact
                }
            double vx = mxx - mx * mx;
            double vy = myy - my * my;
            double cov = mxy - mx * my;
            double num = (2.0 * (mx * my) + c1) * (2.0 * cov + c2);
            double den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            ++count;
        }
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Evaluation tables.
// ---------------------------------------------------------------------------

struct EvalRow {
    std::string method;
    std::string protocol;
    double psnr_db = 0.0;
    double ssim = 0.0;
};

inline std::string format_eval_table(const std::vector<EvalRow>& rows) {
    std::string out = "method,protocol,psnr_db,ssim\n";
    for (const EvalRow& r : rows) {
        require(r.method.find(',') == std::string::npos &&
                    r.protocol.find(',') == std::string::npos,
                "eval table fields must not contain commas");
        out += r.method + "," + r.protocol + "," + format_metric(r.psnr_db) + "," +
               format_metric(r.ssim) + "\n";
    }
    return out;
}

inline void write_eval_table(const std::vector<EvalRow>& rows, const std::filesystem::path& path) {
    write_text_file(path, format_eval_table(rows));
}

inline std::vector<EvalRow> read_eval_table(const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    if (!std::getline(in, line) || line != "method,protocol,psnr_db,ssim")
        throw IoError("eval table missing header: " + path.string());
    std::vector<EvalRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        EvalRow r;
        std::string psnr_s, ssim_s;
        if (!std::getline(ls, r.method, ',') || !std::getline(ls, r.protocol, ',') ||
            !std::getline(ls, psnr_s, ',') || !std::getline(ls, ssim_s))
            throw IoError("malformed eval table row: " + line);
        r.psnr_db = psnr_s == "inf" ? std::numeric_limits<double>::infinity() : std::stod(psnr_s);
        r.ssim = std::stod(ssim_s);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace dnpm
