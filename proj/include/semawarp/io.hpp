// On-disk formats: label PNG + key/value sidecar, RGB PNG, raw warp fields,
// base64 for JSON payloads.
#pragma once

#include <png.h>

#include <cstring>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "semawarp/nets.hpp"
#include "semawarp/parsemap.hpp"

namespace semawarp {

/// Interleaved 8-bit RGB, row-major.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0) {}
  std::uint8_t& at(std::size_t i, std::size_t j, std::size_t ch) { return pixels[(i * width + j) * 3 + ch]; }
  std::uint8_t at(std::size_t i, std::size_t j, std::size_t ch) const {
    return pixels[(i * width + j) * 3 + ch];
  }
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

// ---------------------------------------------------------------------------
// PNG codec (in memory)

namespace detail {

struct PngWriteBuffer {
  std::string bytes;
};

inline void png_write_cb(png_structp png, png_bytep data, png_size_t n) {
  auto* buf = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
  buf->bytes.append(reinterpret_cast<const char*>(data), n);
}

inline void png_flush_cb(png_structp) {}

struct PngReadBuffer {
  const std::string* bytes;
  std::size_t pos = 0;
};

inline void png_read_cb(png_structp png, png_bytep out, png_size_t n) {
  auto* buf = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
  if (buf->pos + n > buf->bytes->size()) png_error(png, "truncated PNG");
  std::memcpy(out, buf->bytes->data() + buf->pos, n);
  buf->pos += n;
}

[[noreturn]] inline void png_error_cb(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
  png_longjmp(png, 1);
}

inline void png_warn_cb(png_structp, png_const_charp) {}

/// Encodes 8-bit rows; `channels` is 1 (gray) or 3 (RGB). Output depends only
/// on the pixels (no timestamps or text chunks).
inline std::string encode_png(const std::uint8_t* pixels, std::size_t H, std::size_t W,
                              int channels) {
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_cb, png_warn_cb);
  require(png != nullptr, "png_error", "cannot create PNG writer");
  png_infop info = png_create_info_struct(png);
  PngWriteBuffer buf;
  std::vector<png_const_bytep> rows(H);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("png_error", "PNG encode failed: " + err);
  }
  png_set_write_fn(png, &buf, png_write_cb, png_flush_cb);
  png_set_IHDR(png, info, png_uint_32(W), png_uint_32(H), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (std::size_t i = 0; i < H; ++i) rows[i] = pixels + i * W * std::size_t(channels);
  png_write_rows(png, const_cast<png_bytepp>(rows.data()), png_uint_32(H));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return buf.bytes;
}

struct DecodedPng {
  std::size_t height = 0, width = 0;
  int channels = 0;  // 1 or 3 after normalisation
  std::vector<std::uint8_t> pixels;
};

/// Decodes to 8-bit gray (when `gray`) or RGB; palette, alpha and 16-bit
/// inputs are normalised.
inline DecodedPng decode_png(const std::string& bytes, bool gray) {
  require(bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0,
          "bad_image", "payload is not a PNG image");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_cb, png_warn_cb);
  require(png != nullptr, "png_error", "cannot create PNG reader");
  png_infop info = png_create_info_struct(png);
  PngReadBuffer buf{&bytes, 0};
  DecodedPng out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("bad_image", "PNG decode failed: " + err);
  }
  png_set_read_fn(png, &buf, png_read_cb);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  const bool is_gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
  if (gray && !is_gray) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("bad_image", "label PNG must be single-channel");
  }
  if (!gray && is_gray) png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  out.height = png_get_image_height(png, info);
  out.width = png_get_image_width(png, info);
  out.channels = gray ? 1 : 3;
  require(png_get_rowbytes(png, info) == out.width * std::size_t(out.channels), "bad_image",
          "unexpected PNG row layout");
  out.pixels.resize(out.height * out.width * std::size_t(out.channels));
  rows.resize(out.height);
  for (std::size_t i = 0; i < out.height; ++i)
    rows[i] = out.pixels.data() + i * out.width * std::size_t(out.channels);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace detail

inline std::string encode_label_png(const LabelImage& img) {
  img.validate();
  return detail::encode_png(img.labels.data(), img.height, img.width, 1);
}

inline std::string encode_rgb_png(const RgbImage& img) {
  require(img.pixels.size() == img.height * img.width * 3, "shape_mismatch", "RGB buffer size mismatch");
  return detail::encode_png(img.pixels.data(), img.height, img.width, 3);
}

inline RgbImage decode_rgb_png(const std::string& bytes) {
  auto d = detail::decode_png(bytes, false);
  RgbImage img;
  img.height = d.height;
  img.width = d.width;
  img.pixels = std::move(d.pixels);
  return img;
}

/// Labels from a grayscale PNG; every value must index `palette`.
inline LabelImage decode_label_png(const std::string& bytes,
                                   const std::vector<std::string>& palette = default_categories()) {
  auto d = detail::decode_png(bytes, true);
  LabelImage img(d.height, d.width, palette);
  img.labels = std::move(d.pixels);
  img.validate();
  return img;
}

// ---------------------------------------------------------------------------
// Sidecar: "key value" lines

inline std::string label_sidecar(const LabelImage& img) {
  std::ostringstream os;
  os << "format SEMAWARP-LABELS v1\n";
  os << "C " << img.palette.size() << "\nH " << img.height << "\nW " << img.width << "\n";
  for (std::size_t c = 0; c < img.palette.size(); ++c) os << "label." << c << " " << img.palette[c] << "\n";
  return os.str();
}

/// Parses "key value" lines; blank lines and '#' comments are skipped.
inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto sp = line.find_first_of(" \t", first);
    const std::string key = line.substr(first, sp == std::string::npos ? std::string::npos : sp - first);
    std::string value;
    if (sp != std::string::npos) {
      const auto vs = line.find_first_not_of(" \t", sp);
      if (vs != std::string::npos) value = line.substr(vs);
      while (!value.empty() && (value.back() == ' ' || value.back() == '\t')) value.pop_back();
    }
    kv[key] = value;
  }
  return kv;
}

struct SidecarInfo {
  std::size_t C = 0, H = 0, W = 0;
  std::vector<std::string> palette;
};

inline SidecarInfo parse_label_sidecar(const std::string& text) {
  const auto kv = parse_key_values(text);
  auto num = [&](const char* k) -> std::size_t {
    require(kv.count(k), "bad_sidecar", std::string("sidecar lacks '") + k + "'");
    try {
      return std::stoul(kv.at(k));
    } catch (const std::exception&) {
      throw Error("bad_sidecar", std::string("sidecar value for '") + k + "' is not a number");
    }
  };
  require(kv.count("format") && kv.at("format") == "SEMAWARP-LABELS v1", "bad_sidecar",
          "sidecar has no 'format SEMAWARP-LABELS v1' line");
  SidecarInfo s;
  s.C = num("C");
  s.H = num("H");
  s.W = num("W");
  for (std::size_t c = 0; c < s.C; ++c) {
    const std::string key = "label." + std::to_string(c);
    require(kv.count(key), "bad_sidecar", "sidecar lacks '" + key + "'");
    s.palette.push_back(kv.at(key));
  }
  return s;
}

inline std::string sidecar_path(const std::string& png_path) { return png_path + ".meta"; }

inline void save_labels(const std::string& png_path, const LabelImage& img) {
  write_file(png_path, encode_label_png(img));
  write_file(sidecar_path(png_path), label_sidecar(img));
}

/// Reads a label PNG and its sidecar; the sidecar's size must match the image.
inline LabelImage load_labels(const std::string& png_path) {
  const auto info = parse_label_sidecar(read_file(sidecar_path(png_path)));
  auto img = decode_label_png(read_file(png_path), info.palette);
  require(img.height == info.H && img.width == info.W, "bad_sidecar",
          "sidecar size does not match " + png_path);
  return img;
}

// ---------------------------------------------------------------------------
// Warp field files

inline constexpr const char* kFieldMagic = "SEMAWARP-FIELD v1";

template <typename T>
std::string encode_field(const WarpField<T>& f) {
  std::string out = std::string(kFieldMagic) + " " + std::to_string(f.height()) + " " +
                    std::to_string(f.width()) + "\n";
  for (T v : f.data.storage()) put_f32_le(out, float(v));
  return out;
}

template <typename T>
WarpField<T> decode_field(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  require(nl != std::string::npos, "bad_field", "warp field has no header line");
  std::istringstream hs(bytes.substr(0, nl));
  std::string magic, version;
  std::size_t H = 0, W = 0;
  hs >> magic >> version >> H >> W;
  require(magic + " " + version == kFieldMagic && H > 0 && W > 0, "bad_field",
          "warp field header must be 'SEMAWARP-FIELD v1 H W'");
  require(bytes.size() - nl - 1 == 2 * H * W * 4, "bad_field", "warp field payload size mismatch");
  WarpField<T> f{Tensor<T>({2, H, W})};
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + nl + 1);
  for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = T(get_f32_le(p + 4 * i));
  return f;
}

// ---------------------------------------------------------------------------
// Base64 (RFC 4648, padded)

inline std::string base64_encode(const std::string& in) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const unsigned v = (unsigned char)in[i] << 16 | (unsigned char)in[i + 1] << 8 | (unsigned char)in[i + 2];
    out += tbl[v >> 18];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += tbl[v & 63];
  }
  if (i < in.size()) {
    unsigned v = (unsigned char)in[i] << 16;
    if (i + 1 < in.size()) v |= (unsigned char)in[i + 1] << 8;
    out += tbl[v >> 18];
    out += tbl[(v >> 12) & 63];
    out += i + 1 < in.size() ? tbl[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::string base64_decode(const std::string& in) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  require(in.size() % 4 == 0, "bad_base64", "base64 length must be a multiple of 4");
  std::string out;
  out.reserve(in.size() / 4 * 3);
  for (std::size_t i = 0; i < in.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = in[i + k];
      if (c == '=' && i + 4 == in.size() && k >= 2) {
        v[k] = 0;
        ++pad;
        continue;
      }
      require(pad == 0 && (v[k] = val(c)) >= 0, "bad_base64", "invalid base64 character");
    }
    const unsigned x = unsigned(v[0]) << 18 | unsigned(v[1]) << 12 | unsigned(v[2]) << 6 | unsigned(v[3]);
    out += char(x >> 16);
    if (pad < 2) out += char((x >> 8) & 255);
    if (pad < 1) out += char(x & 255);
  }
  return out;
}

}  // namespace semawarp
