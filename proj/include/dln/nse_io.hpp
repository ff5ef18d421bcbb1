#pragma once

/// Field snapshots: flat little-endian binary plus a JSON sidecar.
///
/// Binary layout: int32 header (n, n, components, step), then each component
/// as n*n float64 values in row-major order.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dln/errors.hpp"
#include "dln/nse2d.hpp"
#include "dln/spectral.hpp"

namespace dln::nse {

struct SnapshotMeta {
    double time = 0.0;
    double theta = 0.0;
    double k = 0.0;
    std::string case_name;
    std::int32_t step = 0;
};

struct Snapshot {
    SnapshotMeta meta;
    Grid2D grid;
    std::vector<std::vector<double>> components;
};

namespace detail {

template <class T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
}

template <class T>
void put(std::ostream& os, T v) {
    const T le = to_little(v);
    os.write(reinterpret_cast<const char*>(&le), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("truncated snapshot");
    return to_little(v);
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& p) {
    std::filesystem::path s = p;
    s += ".json";
    return s;
}

}  // namespace detail

inline void write_snapshot(const std::filesystem::path& path, const Grid2D& grid,
                           const std::vector<const std::vector<double>*>& components, const SnapshotMeta& meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string());
    detail::put<std::int32_t>(os, grid.n);
    detail::put<std::int32_t>(os, grid.n);
    detail::put<std::int32_t>(os, static_cast<std::int32_t>(components.size()));
    detail::put<std::int32_t>(os, meta.step);
    for (const auto* c : components) {
        if (c->size() != grid.points()) throw DimensionMismatch("component does not match the grid");
        for (double v : *c) detail::put<double>(os, v);
    }
    if (!os) throw IoError("failed writing " + path.string());

    nlohmann::ordered_json j;
    j["time"] = meta.time;
    j["theta"] = meta.theta;
    j["k"] = meta.k;
    j["case"] = meta.case_name;
    j["step"] = meta.step;
    j["n"] = grid.n;
    j["side_length"] = grid.side_length;
    j["components"] = components.size();
    std::ofstream js(detail::sidecar_path(path));
    if (!js) throw IoError("cannot open sidecar for " + path.string());
    js << j.dump(2) << '\n';
}

inline void write_snapshot(const std::filesystem::path& path, const VelocityField& u, const SnapshotMeta& meta) {
    write_snapshot(path, u.grid, {&u.x, &u.y}, meta);
}

inline void write_snapshot(const std::filesystem::path& path, const ScalarField& p, const SnapshotMeta& meta) {
    write_snapshot(path, p.grid, {&p.data}, meta);
}

[[nodiscard]] inline Snapshot read_snapshot(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    const auto n0 = detail::get<std::int32_t>(is);
    const auto n1 = detail::get<std::int32_t>(is);
    const auto nc = detail::get<std::int32_t>(is);
    const auto step = detail::get<std::int32_t>(is);
    if (n0 != n1 || nc < 1) throw IoError("malformed snapshot header");

    std::ifstream js(detail::sidecar_path(path));
    if (!js) throw IoError("missing sidecar for " + path.string());
    const auto j = nlohmann::json::parse(js, nullptr, false);
    if (j.is_discarded()) throw IoError("malformed sidecar for " + path.string());

    Snapshot s;
    s.grid = Grid2D(n0, j.at("side_length").get<double>());
    s.meta.time = j.at("time").get<double>();
    s.meta.theta = j.at("theta").get<double>();
    s.meta.k = j.at("k").get<double>();
    s.meta.case_name = j.at("case").get<std::string>();
    s.meta.step = step;
    s.components.assign(static_cast<std::size_t>(nc), std::vector<double>(s.grid.points()));
    for (auto& c : s.components) {
        for (double& v : c) v = detail::get<double>(is);
    }
    return s;
}

}  // namespace dln::nse
