#include "ecgad/npy.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "ecgad/error.hpp"

namespace ecgad::npy {

static_assert(std::endian::native == std::endian::little, "npy io assumes a little-endian host");

namespace {

constexpr char kMagic[] = "\x93NUMPY";

std::string dict_value(const std::string& header, const std::string& key) {
    const auto pos = header.find("'" + key + "'");
    if (pos == std::string::npos) fail(ErrorKind::Format, "npy header lacks '" + key + "'");
    auto colon = header.find(':', pos);
    if (colon == std::string::npos) fail(ErrorKind::Format, "npy header malformed near '" + key + "'");
    return header.substr(colon + 1);
}

Shape parse_shape(const std::string& header) {
    const std::string rest = dict_value(header, "shape");
    const auto open = rest.find('(');
    const auto close = rest.find(')');
    if (open == std::string::npos || close == std::string::npos || close < open)
        fail(ErrorKind::Format, "npy shape tuple malformed");
    Shape shape;
    const std::string inner = rest.substr(open + 1, close - open - 1);
    std::size_t i = 0;
    while (i < inner.size()) {
        while (i < inner.size() && (inner[i] == ' ' || inner[i] == ',')) ++i;
        if (i >= inner.size()) break;
        std::size_t used = 0;
        try {
            shape.push_back(std::stoull(inner.substr(i), &used));
        } catch (const std::exception&) {
            fail(ErrorKind::Format, "npy shape entry not an integer");
        }
        i += used;
    }
    return shape;
}

}  // namespace

Tensor parse(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 6) != 0)
        fail(ErrorKind::Format, "not an npy file (bad magic)");
    const std::uint8_t major = bytes[6];
    std::size_t header_len = 0, offset = 0;
    if (major == 1) {
        header_len = bytes[8] | (bytes[9] << 8);
        offset = 10;
    } else if (major == 2 || major == 3) {
        if (bytes.size() < 12) fail(ErrorKind::Format, "npy header truncated");
        header_len = bytes[8] | (bytes[9] << 8) | (bytes[10] << 16) | (std::size_t{bytes[11]} << 24);
        offset = 12;
    } else {
        fail(ErrorKind::Format, "unsupported npy version " + std::to_string(major));
    }
    if (offset + header_len > bytes.size()) fail(ErrorKind::Format, "npy header truncated");
    const std::string header(reinterpret_cast<const char*>(bytes.data() + offset), header_len);

    const std::string descr_raw = dict_value(header, "descr");
    std::string descr;
    {
        const auto q1 = descr_raw.find('\'');
        const auto q2 = descr_raw.find('\'', q1 + 1);
        if (q1 == std::string::npos || q2 == std::string::npos) fail(ErrorKind::Format, "npy descr malformed");
        descr = descr_raw.substr(q1 + 1, q2 - q1 - 1);
    }
    std::size_t width = 0;
    if (descr == "<f8" || descr == "f8" || descr == "=f8")
        width = 8;
    else if (descr == "<f4" || descr == "f4" || descr == "=f4")
        width = 4;
    else
        fail(ErrorKind::Format, "unsupported npy dtype '" + descr + "' (expected float32 or float64)");

    const std::string fortran = dict_value(header, "fortran_order");
    const bool fortran_order = fortran.find("True") < fortran.find(',');
    Shape shape = parse_shape(header);

    const std::size_t n = Tensor::count(shape);
    const std::size_t body = offset + header_len;
    if (bytes.size() - body < n * width) fail(ErrorKind::Format, "npy data truncated");

    std::vector<double> values(n);
    const std::uint8_t* src = bytes.data() + body;
    if (width == 8) {
        std::memcpy(values.data(), src, n * 8);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            float f;
            std::memcpy(&f, src + 4 * i, 4);
            values[i] = f;
        }
    }
    if (fortran_order && shape.size() > 1) {
        // Column-major to row-major.
        std::vector<double> rowmajor(n);
        std::vector<std::size_t> idx(shape.size(), 0);
        for (std::size_t f = 0; f < n; ++f) {
            std::size_t r = 0;
            for (std::size_t a = 0; a < shape.size(); ++a) r = r * shape[a] + idx[a];
            rowmajor[r] = values[f];
            for (std::size_t a = 0; a < shape.size(); ++a) {
                if (++idx[a] < shape[a]) break;
                idx[a] = 0;
            }
        }
        values = std::move(rowmajor);
    }
    return Tensor(std::move(shape), std::move(values));
}

Tensor load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Format, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(bytes);
}

std::vector<std::uint8_t> serialize(const Tensor& t) {
    std::string shape = "(";
    for (std::size_t i = 0; i < t.rank(); ++i) shape += std::to_string(t.dim(i)) + ", ";
    if (t.rank() > 1) shape.resize(shape.size() - 2);
    if (t.rank() == 1) shape.resize(shape.size() - 1);
    shape += ")";
    std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': " + shape + ", }";
    // Pad so that magic + length + header + newline is a multiple of 64.
    const std::size_t total = 10 + header.size() + 1;
    header.append((64 - total % 64) % 64, ' ');
    header.push_back('\n');

    std::vector<std::uint8_t> out(kMagic, kMagic + 6);
    out.push_back(1);
    out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(header.size() & 0xff));
    out.push_back(static_cast<std::uint8_t>(header.size() >> 8));
    out.insert(out.end(), header.begin(), header.end());
    const std::size_t body = out.size();
    out.resize(body + 4 * t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const float f = static_cast<float>(t[i]);
        std::memcpy(out.data() + body + 4 * i, &f, 4);
    }
    return out;
}

void save(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = serialize(t);
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Runtime, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace ecgad::npy
