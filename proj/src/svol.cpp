#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "stmt/volcore.hpp"

namespace stmt {

static_assert(std::endian::native == std::endian::little, "SVOL payload I/O assumes a little-endian host");

namespace {

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return {buf, res.ptr};
}

std::string header_line(const char* dtype, Shape3 s, const Spacing3& sp) {
    std::string h = "SVOL1 ";
    h += dtype;
    h += ' ' + std::to_string(s.d) + ' ' + std::to_string(s.h) + ' ' + std::to_string(s.w);
    h += ' ' + format_double(sp.z) + ' ' + format_double(sp.y) + ' ' + format_double(sp.x) + '\n';
    return h;
}

template <typename T>
void write_grid(const std::filesystem::path& path, const char* dtype, const Grid<T>& g) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw Error("cannot open for writing: " + path.string());
    }
    const std::string h = header_line(dtype, g.shape, g.spacing);
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    os.write(reinterpret_cast<const char*>(g.data.data()), static_cast<std::streamsize>(g.data.size() * sizeof(T)));
    if (!os) {
        throw Error("write failed: " + path.string());
    }
}

double parse_double(const std::string& tok, const std::filesystem::path& path) {
    double v = 0.0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
        throw FormatError("SVOL header: bad spacing token '" + tok + "' in " + path.string());
    }
    return v;
}

template <typename T>
Grid<T> read_grid(const std::filesystem::path& path, const std::string& expected_dtype) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw MissingArtifact("cannot open SVOL file: " + path.string());
    }
    std::string line;
    if (!std::getline(is, line)) {
        throw FormatError("SVOL header missing: " + path.string());
    }
    std::istringstream hs(line);
    std::string magic, dtype, zs, ys, xs;
    Grid<T> g;
    hs >> magic >> dtype >> g.shape.d >> g.shape.h >> g.shape.w >> zs >> ys >> xs;
    if (!hs || magic != "SVOL1") {
        throw FormatError("SVOL header malformed: " + path.string());
    }
    if (dtype != expected_dtype) {
        throw FormatError("SVOL dtype is " + dtype + ", expected " + expected_dtype + ": " + path.string());
    }
    g.spacing = {parse_double(zs, path), parse_double(ys, path), parse_double(xs, path)};
    if (!g.shape.positive() || !(g.spacing.z > 0 && g.spacing.y > 0 && g.spacing.x > 0)) {
        throw FormatError("SVOL header has non-positive dims or spacing: " + path.string());
    }
    g.data.resize(g.shape.voxels());
    is.read(reinterpret_cast<char*>(g.data.data()), static_cast<std::streamsize>(g.data.size() * sizeof(T)));
    if (static_cast<std::size_t>(is.gcount()) != g.data.size() * sizeof(T)) {
        throw FormatError("SVOL payload truncated: " + path.string());
    }
    return g;
}

}  // namespace

void write_svol(const std::filesystem::path& path, const Volume& v) { write_grid(path, "f32", v); }
void write_svol(const std::filesystem::path& path, const LabelMap& l) { write_grid(path, "u8", l); }

Volume read_svol_image(const std::filesystem::path& path) {
    Volume v;
    static_cast<Grid<float>&>(v) = read_grid<float>(path, "f32");
    return v;
}

LabelMap read_svol_label(const std::filesystem::path& path, int num_classes) {
    LabelMap l;
    static_cast<Grid<std::uint8_t>&>(l) = read_grid<std::uint8_t>(path, "u8");
    l.num_classes = num_classes;
    for (auto c : l.data) {
        if (c >= num_classes) {
            throw FormatError("SVOL label value " + std::to_string(c) + " outside class range: " + path.string());
        }
    }
    return l;
}

}  // namespace stmt
