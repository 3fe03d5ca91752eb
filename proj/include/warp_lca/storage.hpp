#pragma once

// On-disk formats.
//
// WTNS record (all integers little-endian):
//   "WTNS" | u16 version = 1 | u16 rank = 4 | u32 dims[4] | f32 payload[prod(dims)]
// Several records may be concatenated in one file. Values are held as double
// in memory and rounded to single precision when written.
//
// Artifacts pair a record file with a JSON sidecar of the same stem.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>
#include <png.h>
#include <unistd.h>

#include "json.hpp"

#include "warp_lca/dictionary.hpp"
#include "warp_lca/errors.hpp"
#include "warp_lca/normalization.hpp"
#include "warp_lca/predictor.hpp"
#include "warp_lca/tensor.hpp"

namespace warp_lca {

namespace fs = std::filesystem;

inline constexpr std::array<char, 4> kTensorMagic{'W', 'T', 'N', 'S'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::size_t kTensorHeaderBytes = 4 + 2 + 2 + 4 * 4;

static_assert(std::endian::native == std::endian::little, "WTNS I/O assumes a little-endian host");

namespace detail {

template <typename T>
void put(std::string& buf, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    buf.append(bytes, sizeof(T));
}

template <typename T>
T get(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace detail

/// Writes via a temporary file in the same directory, then renames over `path`.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
    }
}

/// Appends one WTNS record.
inline void encode_tensor(std::string& buf, const Tensor4& t) {
    const Shape4 s = t.shape();
    buf.append(kTensorMagic.data(), kTensorMagic.size());
    detail::put<std::uint16_t>(buf, kTensorVersion);
    detail::put<std::uint16_t>(buf, 4);
    for (std::size_t a = 0; a < 4; ++a) {
        if (s[a] > UINT32_MAX) throw FormatError("WTNS: dimension " + std::to_string(s[a]) + " does not fit in u32");
        detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(s[a]));
    }
    buf.reserve(buf.size() + 4 * t.size());
    for (double v : t.data()) detail::put<float>(buf, static_cast<float>(v));
}

/// Decodes the record starting at `offset`, advancing it past the record.
inline Tensor4 decode_tensor(std::string_view bytes, std::size_t& offset, const std::string& source = "buffer") {
    const std::size_t avail = bytes.size() - offset;
    if (avail < kTensorHeaderBytes)
        throw CorruptionError(source + ": truncated WTNS header at byte " + std::to_string(offset) + " (" +
                              std::to_string(avail) + " bytes left, need " + std::to_string(kTensorHeaderBytes) + ")");
    const char* p = bytes.data() + offset;
    if (std::memcmp(p, kTensorMagic.data(), 4) != 0)
        throw FormatError(source + ": bad magic at byte " + std::to_string(offset) + ", expected 'WTNS'");
    const auto version = detail::get<std::uint16_t>(p + 4);
    if (version != kTensorVersion)
        throw FormatError(source + ": unsupported WTNS version " + std::to_string(version) + ", expected " +
                          std::to_string(kTensorVersion));
    const auto rank = detail::get<std::uint16_t>(p + 6);
    if (rank != 4) throw FormatError(source + ": unsupported rank " + std::to_string(rank) + ", expected 4");
    std::array<std::size_t, 4> dims{};
    std::uint64_t count = 1;
    bool overflow = false;
    for (std::size_t a = 0; a < 4; ++a) {
        dims[a] = detail::get<std::uint32_t>(p + 8 + 4 * a);
        if (dims[a] != 0 && count > (UINT64_MAX / 4) / dims[a]) overflow = true;
        else count *= dims[a];
    }
    const std::size_t remaining = avail - kTensorHeaderBytes;
    if (overflow || count > remaining / 4)
        throw CorruptionError(source + ": payload truncated or dims overflow at byte " + std::to_string(offset) +
                              " (dims " + std::to_string(dims[0]) + "x" + std::to_string(dims[1]) + "x" +
                              std::to_string(dims[2]) + "x" + std::to_string(dims[3]) + ", " +
                              std::to_string(remaining) + " payload bytes available)");
    Tensor4 t(Shape4{dims[0], dims[1], dims[2], dims[3]});
    const char* q = p + kTensorHeaderBytes;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(detail::get<float>(q + 4 * i));
    offset += kTensorHeaderBytes + 4 * static_cast<std::size_t>(count);
    return t;
}

inline void write_tensors(const fs::path& path, std::span<const Tensor4> tensors) {
    std::string buf;
    for (const auto& t : tensors) encode_tensor(buf, t);
    write_file_atomic(path, buf);
}

inline std::vector<Tensor4> read_tensors(const fs::path& path) {
    const std::string bytes = detail::read_file(path);
    std::vector<Tensor4> out;
    std::size_t offset = 0;
    while (offset < bytes.size()) out.push_back(decode_tensor(bytes, offset, path.string()));
    return out;
}

inline void write_tensor(const fs::path& path, const Tensor4& t) { write_tensors(path, std::span<const Tensor4>(&t, 1)); }

/// Reads a file holding exactly one record.
inline Tensor4 read_tensor(const fs::path& path) {
    const std::string bytes = detail::read_file(path);
    std::size_t offset = 0;
    Tensor4 t = decode_tensor(bytes, offset, path.string());
    if (offset != bytes.size())
        throw CorruptionError(path.string() + ": " + std::to_string(bytes.size() - offset) +
                              " unexpected bytes after the tensor record");
    return t;
}

/// Rounds every value to single precision, i.e. what a save/load cycle yields.
inline Tensor4 round_to_storage(Tensor4 t) {
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
    return t;
}

// ---------------------------------------------------------------- JSON

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& path) {
    const std::string text = detail::read_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": invalid JSON: " + e.what());
    }
}

inline fs::path sidecar_path(const fs::path& path) {
    fs::path p = path;
    return p.replace_extension(".json");
}

// ---------------------------------------------------------------- fingerprint

inline std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256: digest computation failed");
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    return hex.str();
}

/// SHA-256 of the single-precision little-endian kernel payload.
inline std::string dictionary_fingerprint(const Dictionary& dict) {
    std::string payload;
    payload.reserve(4 * dict.kernels.size());
    for (double v : dict.kernels.data()) detail::put<float>(payload, static_cast<float>(v));
    return sha256_hex(payload);
}

inline void require_fingerprint(const std::string& expected, const std::string& actual, const std::string& what) {
    if (expected != actual)
        throw FingerprintError(what + ": dictionary fingerprint mismatch (expected " + expected + ", got " + actual + ")");
}

// ---------------------------------------------------------------- images

enum class ImageFormat { Png, Pgm, Ppm };

inline std::optional<ImageFormat> image_format_for(const fs::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") return ImageFormat::Png;
    if (ext == ".pgm") return ImageFormat::Pgm;
    if (ext == ".ppm") return ImageFormat::Ppm;
    return std::nullopt;
}

/// Clamp to [0, 1], then floor(255 v + 0.5).
inline std::uint8_t quantize_pixel(double v) {
    if (!(v > 0.0)) return 0; // also maps NaN to 0
    if (v >= 1.0) return 255;
    return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

namespace detail {

struct Raster {
    std::size_t width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> pixels; // interleaved
};

inline Tensor4 raster_to_tensor(const Raster& r) {
    Tensor4 t(Shape4{1, r.channels, r.height, r.width});
    for (std::size_t y = 0; y < r.height; ++y)
        for (std::size_t x = 0; x < r.width; ++x)
            for (std::size_t c = 0; c < r.channels; ++c)
                t(0, c, y, x) = r.pixels[(y * r.width + x) * r.channels + c] / 255.0;
    return t;
}

inline Raster tensor_to_raster(const Tensor4& t, const std::string& context) {
    const Shape4 s = t.shape();
    if (s.n != 1) throw ShapeError("batch", 1, s.n, context);
    if (s.c != 1 && s.c != 3) throw ShapeError("channels", 3, s.c, context + " (1 or 3 channels)");
    Raster r{s.w, s.h, s.c, std::vector<std::uint8_t>(s.w * s.h * s.c)};
    for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x)
            for (std::size_t c = 0; c < s.c; ++c) r.pixels[(y * s.w + x) * s.c + c] = quantize_pixel(t(0, c, y, x));
    return r;
}

inline Raster decode_png(const fs::path& path) {
    const std::string bytes = read_file(path);
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw FormatError(path.string() + ": not a readable PNG (" + img.message + ")");
    const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
    img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    Raster r{img.width, img.height, gray ? 1u : 3u, {}};
    r.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, r.pixels.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw CorruptionError(path.string() + ": PNG decode failed (" + msg + ")");
    }
    return r;
}

inline std::string encode_png(const Raster& r) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(r.width);
    img.height = static_cast<png_uint_32>(r.height);
    img.format = r.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, r.pixels.data(), 0, nullptr))
        throw IoError(std::string("PNG encode failed: ") + img.message);
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, r.pixels.data(), 0, nullptr))
        throw IoError(std::string("PNG encode failed: ") + img.message);
    out.resize(size);
    return out;
}

/// Binary (P5/P6) and ASCII (P2/P3) netpbm with maxval <= 255.
inline Raster decode_pnm(const fs::path& path) {
    const std::string bytes = read_file(path);
    std::size_t pos = 0;
    auto skip = [&] {
        while (pos < bytes.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
            else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else break;
        }
    };
    auto number = [&]() -> std::size_t {
        skip();
        if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos])))
            throw CorruptionError(path.string() + ": malformed netpbm header");
        std::size_t v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
            if (v > (1u << 30)) throw CorruptionError(path.string() + ": netpbm value too large");
        }
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError(path.string() + ": bad magic, expected P2/P3/P5/P6");
    const char kind = bytes[1];
    if (kind != '2' && kind != '3' && kind != '5' && kind != '6')
        throw FormatError(path.string() + ": unsupported netpbm type P" + std::string(1, kind));
    pos = 2;
    Raster r;
    r.channels = (kind == '3' || kind == '6') ? 3 : 1;
    r.width = number();
    r.height = number();
    const std::size_t maxval = number();
    if (maxval == 0 || maxval > 255) throw FormatError(path.string() + ": only 8-bit netpbm (maxval <= 255) is supported");
    const std::size_t count = r.width * r.height * r.channels;
    r.pixels.resize(count);
    auto rescale = [&](std::size_t v) {
        if (v > maxval) throw CorruptionError(path.string() + ": sample exceeds maxval");
        return static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
    };
    if (kind == '5' || kind == '6') {
        ++pos; // single whitespace after maxval
        if (bytes.size() < pos + count)
            throw CorruptionError(path.string() + ": truncated pixel data (" + std::to_string(bytes.size() - std::min(pos, bytes.size())) +
                                  " of " + std::to_string(count) + " bytes)");
        for (std::size_t i = 0; i < count; ++i) r.pixels[i] = rescale(static_cast<unsigned char>(bytes[pos + i]));
    } else {
        for (std::size_t i = 0; i < count; ++i) r.pixels[i] = rescale(number());
    }
    return r;
}

inline std::string encode_pnm(const Raster& r, ImageFormat fmt) {
    if ((fmt == ImageFormat::Pgm) != (r.channels == 1))
        throw ConfigError(std::string("save_image: ") + (r.channels == 1 ? "1-channel images need .pgm or .png"
                                                                         : "3-channel images need .ppm or .png"));
    std::string out = (r.channels == 1 ? "P5\n" : "P6\n") + std::to_string(r.width) + " " + std::to_string(r.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(r.pixels.data()), r.pixels.size());
    return out;
}

} // namespace detail

/// [1, C, H, W] with values in [0, 1]; C is 1 (gray) or 3 (RGB, alpha dropped).
inline Tensor4 load_image(const fs::path& path) {
    const auto fmt = image_format_for(path);
    if (!fmt) throw FormatError(path.string() + ": unsupported image extension (expected .png, .pgm, .ppm)");
    return detail::raster_to_tensor(*fmt == ImageFormat::Png ? detail::decode_png(path) : detail::decode_pnm(path));
}

/// Writes a [1, C, H, W] tensor (C = 1 or 3) as 8-bit PNG/PGM/PPM, chosen by extension.
inline void save_image(const fs::path& path, const Tensor4& t) {
    const auto fmt = image_format_for(path);
    if (!fmt) throw FormatError(path.string() + ": unsupported image extension (expected .png, .pgm, .ppm)");
    const auto raster = detail::tensor_to_raster(t, "save_image");
    write_file_atomic(path, *fmt == ImageFormat::Png ? detail::encode_png(raster) : detail::encode_pnm(raster, *fmt));
}

/// Lays a batch out left to right as one image, `gap` pixels apart (filled with `fill`).
inline Tensor4 tile_horizontally(std::span<const Tensor4> images, std::size_t gap = 2, double fill = 1.0) {
    if (images.empty()) return {};
    const Shape4 s = images.front().shape();
    Tensor4 out(Shape4{1, s.c, s.h, images.size() * s.w + (images.size() - 1) * gap}, fill);
    for (std::size_t i = 0; i < images.size(); ++i) {
        require_same_shape(s, images[i].shape(), "tile_horizontally");
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t y = 0; y < s.h; ++y)
                for (std::size_t x = 0; x < s.w; ++x) out(0, c, y, i * (s.w + gap) + x) = images[i](0, c, y, x);
    }
    return out;
}

// ---------------------------------------------------------------- datasets

enum class SizePolicy { Strict, CenterCrop };

inline Tensor4 center_crop(const Tensor4& img, std::size_t h, std::size_t w) {
    const Shape4 s = img.shape();
    if (s.h < h || s.w < w) throw ShapeError(s.h < h ? "height" : "width", s.h < h ? h : w, s.h < h ? s.h : s.w, "center_crop");
    const std::size_t top = (s.h - h) / 2, left = (s.w - w) / 2;
    Tensor4 out(Shape4{s.n, s.c, h, w});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) out(n, c, y, x) = img(n, c, top + y, left + x);
    return out;
}

struct Dataset {
    std::vector<Tensor4> images; // [1, C, H, W] each
    std::vector<std::string> names;
    std::vector<std::string> warnings;
};

/// Pixel-space images from a directory of .png/.pgm/.ppm files (sorted by
/// name) or from a WTNS file holding an [N, C, H, W] batch in [0, 1].
/// Mixed sizes are an error under Strict; CenterCrop crops to the smallest
/// height and width present.
inline Dataset load_pixels(const fs::path& source, SizePolicy policy = SizePolicy::Strict) {
    Dataset ds;
    if (!fs::exists(source)) throw IoError("dataset '" + source.string() + "' does not exist");
    if (fs::is_regular_file(source)) {
        const Tensor4 batch = read_tensor(source);
        for (std::size_t n = 0; n < batch.shape().n; ++n) {
            ds.images.push_back(batch.sample(n));
            ds.names.push_back(source.stem().string() + "_" + std::to_string(n));
        }
    } else {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(source))
            if (e.is_regular_file() && image_format_for(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            ds.images.push_back(load_image(f));
            ds.names.push_back(f.filename().string());
        }
    }
    if (ds.images.empty()) {
        ds.warnings.push_back("dataset '" + source.string() + "' contains no images");
        return ds;
    }
    std::size_t min_h = SIZE_MAX, min_w = SIZE_MAX;
    const std::size_t channels = ds.images.front().shape().c;
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const Shape4 s = ds.images[i].shape();
        if (s.c != channels) throw ShapeError("channels", channels, s.c, "dataset image '" + ds.names[i] + "'");
        min_h = std::min(min_h, s.h);
        min_w = std::min(min_w, s.w);
    }
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const Shape4 s = ds.images[i].shape();
        if (s.h == min_h && s.w == min_w) continue;
        if (policy == SizePolicy::Strict)
            throw ShapeError(s.h != min_h ? "height" : "width", s.h != min_h ? min_h : min_w, s.h != min_h ? s.h : s.w,
                             "dataset image '" + ds.names[i] + "' (mixed sizes; use the center-crop policy)");
        ds.images[i] = center_crop(ds.images[i], min_h, min_w);
    }
    return ds;
}

/// load_pixels followed by the given normalisation.
inline Dataset load_dataset(const fs::path& source, const Normalization& normalization,
                            SizePolicy policy = SizePolicy::Strict) {
    Dataset ds = load_pixels(source, policy);
    for (auto& img : ds.images) img = normalization.apply(img);
    return ds;
}

// ---------------------------------------------------------------- dictionary files

inline void to_json(nlohmann::json& j, const DictionaryMeta& m) {
    j = {{"lambda_schedule", m.lambda_schedule}, {"epochs", m.epochs},       {"ista_steps", m.ista_steps},
         {"increase_factor", m.increase_factor}, {"eta", m.eta},             {"batch_size", m.batch_size},
         {"seed", m.seed},                       {"normalization", m.normalization}};
}
inline void from_json(const nlohmann::json& j, DictionaryMeta& m) {
    m.lambda_schedule = j.value("lambda_schedule", std::vector<double>{});
    m.epochs = j.value("epochs", std::size_t{0});
    m.ista_steps = j.value("ista_steps", std::size_t{0});
    m.increase_factor = j.value("increase_factor", 1.0);
    m.eta = j.value("eta", 0.0);
    m.batch_size = j.value("batch_size", std::size_t{0});
    m.seed = j.value("seed", std::uint64_t{0});
    m.normalization = j.value("normalization", Normalization{});
}

inline void save_dictionary(const fs::path& path, const Dictionary& dict) {
    dict.validate();
    write_tensor(path, dict.kernels);
    nlohmann::json meta = dict.meta;
    meta["geom"] = dict.geom;
    meta["features"] = dict.features();
    meta["channels"] = dict.channels();
    meta["fingerprint"] = dictionary_fingerprint(dict);
    write_json(sidecar_path(path), meta);
}

/// Reads kernels and sidecar; the sidecar fingerprint must match the kernels.
inline Dictionary load_dictionary(const fs::path& path) {
    const nlohmann::json meta = read_json(sidecar_path(path));
    Dictionary dict;
    dict.kernels = read_tensor(path);
    try {
        dict.geom = meta.at("geom").get<ConvGeometry>();
        dict.meta = meta.get<DictionaryMeta>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(sidecar_path(path).string() + ": " + e.what());
    }
    dict.validate();
    if (meta.contains("fingerprint"))
        require_fingerprint(meta.at("fingerprint").get<std::string>(), dictionary_fingerprint(dict),
                            "load_dictionary '" + path.string() + "'");
    return dict;
}

// ---------------------------------------------------------------- predictor files

struct ModelInfo {
    std::string dictionary_fingerprint;
    nlohmann::json train_config = nlohmann::json::object();
    TrainHistory history;
};

inline void save_model(const fs::path& path, const PredictorModel& model, const ModelInfo& info = {}) {
    std::vector<Tensor4> records;
    model.for_each_layer([&](const ConvLayer& l) {
        records.push_back(l.weight);
        records.push_back(Tensor4(Shape4{1, l.bias.size(), 1, 1}, l.bias));
    });
    write_tensors(path, records);
    nlohmann::json j;
    j["architecture"] = model.arch;
    j["scaling"] = model.scaling;
    j["input_spec"] = {{"image_channels", model.arch.in_channels - 1}, {"lambda_channel", "raw"}};
    j["dictionary_fingerprint"] = info.dictionary_fingerprint;
    j["train_config"] = info.train_config;
    j["losses"] = {{"train", info.history.train_loss},
                   {"val", info.history.val_loss},
                   {"best_epoch", info.history.best_epoch},
                   {"best", std::isfinite(info.history.best_loss) ? nlohmann::json(info.history.best_loss) : nlohmann::json()},
                   {"train_size", info.history.train_size},
                   {"val_size", info.history.val_size}};
    write_json(sidecar_path(path), j);
}

inline std::pair<PredictorModel, ModelInfo> load_model(const fs::path& path) {
    const nlohmann::json j = read_json(sidecar_path(path));
    PredictorModel model;
    ModelInfo info;
    try {
        model = make_predictor(j.at("architecture").get<PredictorArch>(), j.at("scaling").get<TargetScaling>());
        info.dictionary_fingerprint = j.value("dictionary_fingerprint", std::string{});
        info.train_config = j.value("train_config", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(sidecar_path(path).string() + ": " + e.what());
    }
    const std::vector<Tensor4> records = read_tensors(path);
    std::size_t expected = 0;
    model.for_each_layer([&](const ConvLayer&) { expected += 2; });
    if (records.size() != expected)
        throw CorruptionError(path.string() + ": expected " + std::to_string(expected) + " tensor records, found " +
                              std::to_string(records.size()));
    std::size_t k = 0;
    model.for_each_layer([&](ConvLayer& l) {
        require_same_shape(l.weight.shape(), records[k].shape(), path.string() + " weight record " + std::to_string(k));
        l.weight = records[k++];
        require_same_shape(Shape4{1, l.bias.size(), 1, 1}, records[k].shape(), path.string() + " bias record " + std::to_string(k));
        l.bias.assign(records[k].data().begin(), records[k].data().end());
        ++k;
    });
    return {std::move(model), std::move(info)};
}

// ---------------------------------------------------------------- state datasets

/// Encoded training set: per sample the normalised input image and the final
/// LCA state, plus the lambda it was encoded with.
struct StateDataset {
    std::vector<Tensor4> images; // [1, C, H, W], normalised
    std::vector<Tensor4> states; // [1, M, H', W']
    std::vector<double> lambdas;
    std::vector<std::size_t> final_l0;
    TargetScaling scaling;
    std::string dictionary_fingerprint;
    nlohmann::json extra = nlohmann::json::object(); // provenance (solver config, source names)
};

/// Writes `<dir>/states.wtns` (image, state record pairs) and `<dir>/manifest.json`.
inline void save_state_dataset(const fs::path& dir, const StateDataset& ds) {
    if (ds.images.size() != ds.states.size() || ds.images.size() != ds.lambdas.size())
        throw ShapeError("samples", ds.images.size(), ds.states.size(), "save_state_dataset");
    std::vector<Tensor4> records;
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        records.push_back(ds.images[i]);
        records.push_back(ds.states[i]);
    }
    write_tensors(dir / "states.wtns", records);
    nlohmann::json m;
    m["count"] = ds.images.size();
    if (!ds.states.empty()) {
        const Shape4 cs = ds.states.front().shape(), is = ds.images.front().shape();
        m["code_dims"] = {cs.c, cs.h, cs.w};
        m["image_dims"] = {is.c, is.h, is.w};
    }
    m["lambdas"] = ds.lambdas;
    m["final_l0"] = ds.final_l0;
    m["scaling"] = ds.scaling;
    m["dictionary_fingerprint"] = ds.dictionary_fingerprint;
    m["records"] = "states.wtns";
    m["extra"] = ds.extra;
    write_json(dir / "manifest.json", m);
}

/// `path` is the manifest or the directory holding it.
inline StateDataset load_state_dataset(const fs::path& path) {
    const fs::path manifest = fs::is_directory(path) ? path / "manifest.json" : path;
    const nlohmann::json m = read_json(manifest);
    StateDataset ds;
    std::size_t count = 0;
    try {
        count = m.at("count").get<std::size_t>();
        ds.lambdas = m.at("lambdas").get<std::vector<double>>();
        ds.final_l0 = m.value("final_l0", std::vector<std::size_t>{});
        ds.scaling = m.at("scaling").get<TargetScaling>();
        ds.dictionary_fingerprint = m.at("dictionary_fingerprint").get<std::string>();
        ds.extra = m.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(manifest.string() + ": " + e.what());
    }
    const std::vector<Tensor4> records = read_tensors(manifest.parent_path() / m.value("records", std::string("states.wtns")));
    if (records.size() != 2 * count || ds.lambdas.size() != count)
        throw CorruptionError(manifest.string() + ": manifest lists " + std::to_string(count) + " samples but found " +
                              std::to_string(records.size() / 2) + " record pairs and " + std::to_string(ds.lambdas.size()) +
                              " lambdas");
    for (std::size_t i = 0; i < count; ++i) {
        ds.images.push_back(records[2 * i]);
        ds.states.push_back(records[2 * i + 1]);
    }
    return ds;
}

} // namespace warp_lca
