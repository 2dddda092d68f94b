#pragma once

// Triangle meshes with per-vertex UVs and normals, Wavefront OBJ I/O,
// normal computation, and midpoint subdivision.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dnpm/common.hpp"

namespace dnpm {

using Vec3 = std::array<double, 3>;
using Vec2 = std::array<double, 2>;
using Face = std::array<int, 3>;

struct Mesh {
    std::vector<Vec3> vertices;
    std::vector<Face> faces;
    std::vector<Vec2> uvs;      // per-vertex; empty = absent
    std::vector<Vec3> normals;  // per-vertex unit vectors; empty = absent

    bool has_uvs() const { return !uvs.empty(); }
    bool has_normals() const { return !normals.empty(); }
    int n_vertices() const { return static_cast<int>(vertices.size()); }
    int n_faces() const { return static_cast<int>(faces.size()); }
};

inline Vec3 sub3(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 add3(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 scale3(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross3(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }

inline void check_mesh(const Mesh& m, bool need_uvs = false) {
    require(!m.vertices.empty(), "mesh has no vertices");
    if (need_uvs) require(m.has_uvs(), "mesh is missing per-vertex uvs");
    if (m.has_uvs())
        require(m.uvs.size() == m.vertices.size(), "uv count must match vertex count");
    if (m.has_normals())
        require(m.normals.size() == m.vertices.size(), "normal count must match vertex count");
    int n = m.n_vertices();
    for (const Face& f : m.faces)
        for (int idx : f)
            require(idx >= 0 && idx < n, "face index out of range");
    for (const Vec2& uv : m.uvs)
        require(uv[0] >= -1e-9 && uv[0] <= 1.0 + 1e-9 && uv[1] >= -1e-9 && uv[1] <= 1.0 + 1e-9,
                "uv outside [0,1]^2");
}

// Area-weighted vertex normals; zero-area vertex stars fall back to (0,0,1).
inline Mesh compute_vertex_normals(const Mesh& mesh) {
    require(!mesh.vertices.empty(), "compute_vertex_normals: empty mesh");
    Mesh out = mesh;
    out.normals.assign(mesh.vertices.size(), Vec3{0.0, 0.0, 0.0});
    for (const Face& f : mesh.faces) {
        const Vec3& a = mesh.vertices[f[0]];
        const Vec3& b = mesh.vertices[f[1]];
        const Vec3& c = mesh.vertices[f[2]];
        Vec3 fn = cross3(sub3(b, a), sub3(c, a));  // |fn| = 2 * area
        for (int idx : f) out.normals[idx] = add3(out.normals[idx], fn);
    }
    for (Vec3& n : out.normals) {
        double len = norm3(n);
        n = len < 1e-12 ? Vec3{0.0, 0.0, 1.0} : scale3(n, 1.0 / len);
    }
    return out;
}

// Splits each triangle into 4 via edge midpoints; positions/uvs linearly
// interpolated, normals (when present) averaged and renormalized.
inline Mesh subdivide_midpoint(const Mesh& mesh, int levels) {
    require(levels >= 0, "subdivide_midpoint: levels must be >= 0");
    check_mesh(mesh);
    Mesh cur = mesh;
    for (int level = 0; level < levels; ++level) {
        Mesh next;
        next.vertices = cur.vertices;
        next.uvs = cur.uvs;
        next.normals = cur.normals;
        std::map<std::pair<int, int>, int> midpoint;
        auto edge_vertex = [&](int a, int b) {
            std::pair<int, int> key = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            int idx = next.n_vertices();
            next.vertices.push_back(scale3(add3(cur.vertices[a], cur.vertices[b]), 0.5));
            if (cur.has_uvs())
                next.uvs.push_back({0.5 * (cur.uvs[a][0] + cur.uvs[b][0]),
                                    0.5 * (cur.uvs[a][1] + cur.uvs[b][1])});
            if (cur.has_normals()) {
                Vec3 n = add3(cur.normals[a], cur.normals[b]);
                double len = norm3(n);
                next.normals.push_back(len < 1e-12 ? Vec3{0.0, 0.0, 1.0} : scale3(n, 1.0 / len));
            }
            midpoint.emplace(key, idx);
            return idx;
        };
        next.faces.reserve(cur.faces.size() * 4);
        for (const Face& f : cur.faces) {
            int ab = edge_vertex(f[0], f[1]);
            int bc = edge_vertex(f[1], f[2]);
            int ca = edge_vertex(f[2], f[0]);
            next.faces.push_back({f[0], ab, ca});
            next.faces.push_back({f[1], bc, ab});
            next.faces.push_back({f[2], ca, bc});
            next.faces.push_back({ab, bc, ca});
        }
        cur = std::move(next);
    }
    return cur;
}

// ---------------------------------------------------------------------------
// Wavefront OBJ I/O. Attributes are per-vertex, so face records always use
// matching v/vt/vn indices. Numbers are written in shortest exact form.
// ---------------------------------------------------------------------------

inline std::string obj_number(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline void write_obj(const Mesh& mesh, const std::filesystem::path& path) {
    check_mesh(mesh);
    std::string out;
    out.reserve(mesh.vertices.size() * 40);
    for (const Vec3& v : mesh.vertices)
        out += "v " + obj_number(v[0]) + " " + obj_number(v[1]) + " " + obj_number(v[2]) + "\n";
    for (const Vec2& t : mesh.uvs)
        out += "vt " + obj_number(t[0]) + " " + obj_number(t[1]) + "\n";
    for (const Vec3& n : mesh.normals)
        out += "vn " + obj_number(n[0]) + " " + obj_number(n[1]) + " " + obj_number(n[2]) + "\n";
    for (const Face& f : mesh.faces) {
        out += "f";
        for (int idx : f) {
            std::string i = std::to_string(idx + 1);
            out += " " + i;
            if (mesh.has_uvs() || mesh.has_normals()) {
                out += "/";
                if (mesh.has_uvs()) out += i;
                if (mesh.has_normals()) out += "/" + i;
            }
        }
        out += "\n";
    }
    write_text_file(path, out);
}

inline Mesh read_obj(const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    Mesh mesh;
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& msg) {
        throw IoError("OBJ parse error at " + path.string() + ":" + std::to_string(lineno) + ": " +
                      msg);
    };
    auto parse_corner = [&](const std::string& tok) {
        // Accept i, i/t, i/t/n, i//n; per-vertex attributes must reuse index i.
        int slots[3] = {0, 0, 0};
        int slot = 0;
        std::size_t pos = 0;
        while (pos < tok.size()) {
            if (tok[pos] == '/') {
                if (++slot > 2) fail("too many '/' in face corner");
                ++pos;
                continue;
            }
            std::size_t end = tok.find('/', pos);
            if (end == std::string::npos) end = tok.size();
            slots[slot] = std::stoi(tok.substr(pos, end - pos));
            pos = end;
        }
        if (slots[0] == 0) fail("face corner missing vertex index");
        for (int s = 1; s <= 2; ++s)
            if (slots[s] != 0 && slots[s] != slots[0])
                fail("per-corner attribute index differs from vertex index");
        return slots[0];
    };
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            Vec3 v;
            if (!(ls >> v[0] >> v[1] >> v[2])) fail("bad vertex record");
            mesh.vertices.push_back(v);
        } else if (tag == "vt") {
            Vec2 t;
            if (!(ls >> t[0] >> t[1])) fail("bad texture coordinate record");
            mesh.uvs.push_back(t);
        } else if (tag == "vn") {
            Vec3 n;
            if (!(ls >> n[0] >> n[1] >> n[2])) fail("bad normal record");
            mesh.normals.push_back(n);
        } else if (tag == "f") {
            std::vector<int> corners;
            std::string tok;
            while (ls >> tok) corners.push_back(parse_corner(tok));
            if (corners.size() != 3) fail("only triangle faces are supported");
            int n = static_cast<int>(mesh.vertices.size());
            Face f;
            for (int c = 0; c < 3; ++c) {
                int idx = corners[c] > 0 ? corners[c] - 1 : n + corners[c];
                if (idx < 0 || idx >= n) fail("face index out of range");
                f[c] = idx;
            }
            mesh.faces.push_back(f);
        }
        // Other tags (o, g, s, mtllib, usemtl, ...) are ignored.
    }
    check_mesh(mesh);
    return mesh;
}

}  // namespace dnpm
