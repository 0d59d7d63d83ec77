#include "clipdecomp/image_io.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "clipdecomp/errors.hpp"

namespace clipdecomp {

namespace {

// PPM header tokens are separated by whitespace; '#' starts a comment that
// runs to end of line.
std::string next_header_token(std::istream& in, const std::string& path) {
    std::string token;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!token.empty()) return token;
            continue;
        }
        token.push_back(static_cast<char>(ch));
    }
    if (token.empty()) throw FormatError(path + ": truncated header");
    return token;
}

std::size_t parse_dim(const std::string& token, const std::string& path) {
    std::size_t value = 0;
    for (char c : token) {
        if (c < '0' || c > '9') throw FormatError(path + ": bad header value '" + token + "'");
        value = value * 10 + static_cast<std::size_t>(c - '0');
    }
    return value;
}

}  // namespace

ImageInput read_ppm(const std::string& path, std::size_t expected_height,
                    std::size_t expected_width, const PpmOptions& options) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError(path + ": cannot open");

    const std::string magic = next_header_token(f, path);
    if (magic != "P6") throw FormatError(path + ": expected magic 'P6', got '" + magic + "'");
    const std::size_t width = parse_dim(next_header_token(f, path), path);
    const std::size_t height = parse_dim(next_header_token(f, path), path);
    const std::size_t maxval = parse_dim(next_header_token(f, path), path);
    if (maxval != 255) {
        throw FormatError(path + ": maxval must be 255, got " + std::to_string(maxval));
    }
    if (height != expected_height || width != expected_width) {
        throw FormatError(path + ": image is " + std::to_string(height) + "x" +
                          std::to_string(width) + ", expected " + std::to_string(expected_height) +
                          "x" + std::to_string(expected_width));
    }

    std::vector<unsigned char> raw(3 * height * width);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(f.gcount()) != raw.size()) {
        throw FormatError(path + ": truncated pixel data");
    }

    ImageInput image;
    image.pixels = Tensor({3, height, width});
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = static_cast<double>(raw[(y * width + x) * 3 + c]) / 255.0;
                image.pixels.data[(c * height + y) * width + x] =
                    static_cast<float>((v - options.mean[c]) / options.std[c]);
            }
        }
    }
    return image;
}

void write_pgm(const std::string& path, const Tensor& grid) {
    if (grid.ndim() != 2) throw ShapeError("pgm output expects a 2-D grid, got " + grid.shape_str());
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (float v : grid.data) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
    }
    const double range = hi - lo;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError(path + ": cannot open for writing");
    f << "P5\n" << grid.shape[1] << " " << grid.shape[0] << "\n255\n";
    for (float v : grid.data) {
        const double scaled = range == 0.0 ? 0.5 : (static_cast<double>(v) - lo) / range;
        f.put(static_cast<char>(static_cast<unsigned char>(std::lround(scaled * 255.0))));
    }
    if (!f) throw FormatError(path + ": write failed");
}

}  // namespace clipdecomp
