#include "fencepipe/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

#include <unistd.h>

namespace fencepipe {

namespace fs = std::filesystem;

void write_file_atomic(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) {
            throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
        }
    }
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open " + tmp.string() + " for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ignore;
            fs::remove(tmp, ignore);
            throw IoError("write failed for " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot move " + tmp.string() + " to " + path.string());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Image read_png(const fs::path& path) {
    const std::string bytes = read_file(path);
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        throw CorruptionError("not a readable PNG: " + path.string() + " (" + image.message + ")");
    }
    const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
    image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    const std::size_t channels = gray ? 1 : 3;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
    // Background for flattening alpha is black.
    png_color background{0, 0, 0};
    if (!png_image_finish_read(&image, &background, buf.data(), 0, nullptr)) {
        png_image_free(&image);
        throw CorruptionError("failed to decode PNG " + path.string() + " (" + image.message + ")");
    }
    Image img(image.width, image.height, channels);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        img.data[i] = buf[i] / 255.0;
    }
    return img;
}

void write_png(const fs::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw DataError("PNG output needs 1 or 3 channels, got " + std::to_string(img.channels));
    }
    if (img.empty()) {
        throw DataError("cannot write an empty image");
    }
    std::vector<png_byte> pixels(img.data.size());
    std::transform(img.data.begin(), img.data.end(), pixels.begin(), to_byte);
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_get_memory_size(image, size, 0, pixels.data(), 0, nullptr)) {
        throw IoError(std::string("PNG encoding failed: ") + image.message);
    }
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
        throw IoError(std::string("PNG encoding failed: ") + image.message);
    }
    out.resize(size);
    write_file_atomic(path, out);
}

Image read_ppm(const fs::path& path) {
    const std::string bytes = read_file(path);
    std::istringstream in(bytes);
    std::string magic;
    in >> magic;
    if (magic != "P5" && magic != "P6") {
        throw CorruptionError("not a binary PGM/PPM file: " + path.string());
    }
    auto next_int = [&]() {
        in >> std::ws;
        while (in.peek() == '#') {
            std::string skip;
            std::getline(in, skip);
            in >> std::ws;
        }
        long v = -1;
        in >> v;
        if (!in || v < 0) {
            throw CorruptionError("bad PNM header in " + path.string());
        }
        return static_cast<std::size_t>(v);
    };
    const std::size_t w = next_int();
    const std::size_t h = next_int();
    const std::size_t maxval = next_int();
    if (maxval != 255) {
        throw CorruptionError("only maxval 255 is supported: " + path.string());
    }
    in.get();
    const std::size_t channels = magic == "P6" ? 3 : 1;
    Image img(w, h, channels);
    const auto offset = static_cast<std::size_t>(in.tellg());
    if (bytes.size() < offset + img.data.size()) {
        throw CorruptionError("truncated PNM data in " + path.string());
    }
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        img.data[i] = static_cast<unsigned char>(bytes[offset + i]) / 255.0;
    }
    return img;
}

void write_ppm(const fs::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw DataError("PNM output needs 1 or 3 channels");
    }
    std::string out = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " +
                      std::to_string(img.height) + "\n255\n";
    for (double v : img.data) {
        out.push_back(static_cast<char>(to_byte(v)));
    }
    write_file_atomic(path, out);
}

namespace {
std::string lower_ext(const fs::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e;
}
}  // namespace

Image read_image(const fs::path& path) {
    const std::string e = lower_ext(path);
    if (e == ".png") {
        return read_png(path);
    }
    if (e == ".ppm" || e == ".pgm" || e == ".pnm") {
        return read_ppm(path);
    }
    throw DataError("unsupported image format: " + path.string());
}

void write_image(const fs::path& path, const Image& img) {
    const std::string e = lower_ext(path);
    if (e == ".png") {
        write_png(path, img);
    } else if (e == ".ppm" || e == ".pgm" || e == ".pnm") {
        write_ppm(path, img);
    } else {
        throw DataError("unsupported image format: " + path.string());
    }
}

BinaryMask mask_from_image(const Image& img) {
    BinaryMask m(img.width, img.height, 1);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        // Any channel at or above mid-gray marks the pixel.
        bool on = false;
        for (std::size_t c = 0; c < img.channels; ++c) {
            on = on || img.data[i * img.channels + c] >= 0.5;
        }
        m.data[i] = on ? 1 : 0;
    }
    return m;
}

Image image_from_mask(const BinaryMask& mask) {
    Image img(mask.width, mask.height, 1);
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        img.data[i] = mask.data[i] != 0 ? 1.0 : 0.0;
    }
    return img;
}

BinaryMask read_mask(const fs::path& path) { return mask_from_image(read_image(path)); }

void write_mask(const fs::path& path, const BinaryMask& mask) { write_image(path, image_from_mask(mask)); }

}  // namespace fencepipe
