#pragma once

// Probability maps (.cbpm), label masks (8-bit PNG) and the dataset manifest.
//
// .cbpm layout, version 1:
//   "CBPM 1\n"
//   "height=<H> width=<W> classes=<C>\n"
//   H*W*C little-endian IEEE-754 binary32 values, row-major, class fastest.

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "calfuse/error.hpp"

namespace calfuse {

namespace fs = std::filesystem;

using ClassIndex = std::uint8_t;

inline constexpr double kProbSumTolerance = 1e-4;
inline constexpr std::size_t kMaxDimension = 1u << 16;
inline constexpr std::size_t kMaxClasses = 255;

struct Shape {
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t pixels() const { return height * width; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width);
}

/// Per-pixel class probabilities of one model on one image.
class ProbMap {
 public:
  ProbMap() = default;
  ProbMap(std::size_t height, std::size_t width, std::size_t classes)
      : height_(height),
        width_(width),
        classes_(classes),
        data_(height * width * classes, 0.0f) {}
  ProbMap(std::size_t height, std::size_t width, std::size_t classes,
          std::vector<float> data)
      : height_(height), width_(width), classes_(classes), data_(std::move(data)) {
    if (data_.size() != height_ * width_ * classes_)
      throw validation_error("probability map data length " +
                             std::to_string(data_.size()) +
                             " does not match dimensions");
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t classes() const { return classes_; }
  Shape shape() const { return {height_, width_}; }
  std::size_t pixels() const { return height_ * width_; }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  std::span<const float> pixel(std::size_t index) const {
    return std::span<const float>(data_).subspan(index * classes_, classes_);
  }
  std::span<float> pixel(std::size_t index) {
    return std::span<float>(data_).subspan(index * classes_, classes_);
  }
  float at(std::size_t row, std::size_t col, std::size_t cls) const {
    return data_[(row * width_ + col) * classes_ + cls];
  }

  friend bool operator==(const ProbMap&, const ProbMap&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t classes_ = 0;
  std::vector<float> data_;
};

/// Per-pixel class indices (ground truth or a prediction).
class LabelMask {
 public:
  LabelMask() = default;
  LabelMask(std::size_t height, std::size_t width, ClassIndex fill = 0)
      : height_(height), width_(width), data_(height * width, fill) {}
  LabelMask(std::size_t height, std::size_t width, std::vector<ClassIndex> data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (data_.size() != height_ * width_)
      throw validation_error("label mask data length " +
                             std::to_string(data_.size()) +
                             " does not match dimensions");
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  Shape shape() const { return {height_, width_}; }
  std::size_t pixels() const { return data_.size(); }

  std::span<const ClassIndex> data() const { return data_; }
  std::span<ClassIndex> data() { return data_; }
  ClassIndex operator[](std::size_t i) const { return data_[i]; }
  ClassIndex& operator[](std::size_t i) { return data_[i]; }
  ClassIndex at(std::size_t row, std::size_t col) const {
    return data_[row * width_ + col];
  }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<ClassIndex> data_;
};

inline std::string pixel_name(std::size_t index, std::size_t width) {
  return "(" + std::to_string(index / width) + "," +
         std::to_string(index % width) + ")";
}

/// Throws data_error on the first pixel violating the probability invariants.
inline void validate(const ProbMap& map) {
  if (map.height() == 0 || map.width() == 0)
    throw data_error("probability map has zero extent " + to_string(map.shape()));
  if (map.classes() < 2 || map.classes() > kMaxClasses)
    throw data_error("probability map has " + std::to_string(map.classes()) +
                     " classes; need 2.." + std::to_string(kMaxClasses));
  for (std::size_t i = 0; i < map.pixels(); ++i) {
    double sum = 0.0;
    const auto probs = map.pixel(i);
    for (std::size_t c = 0; c < probs.size(); ++c) {
      const float p = probs[c];
      if (!(p >= 0.0f && p <= 1.0f)) {
        std::ostringstream os;
        os << "pixel " << pixel_name(i, map.width()) << " class " << c
           << ": probability " << p << " outside [0,1]";
        throw data_error(os.str());
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > kProbSumTolerance) {
      std::ostringstream os;
      os << "pixel " << pixel_name(i, map.width()) << ": probability sum "
         << sum << " outside 1+-" << kProbSumTolerance;
      throw data_error(os.str());
    }
  }
}

/// Throws data_error if any index is >= classes.
inline void validate_classes(const LabelMask& mask, std::size_t classes) {
  for (std::size_t i = 0; i < mask.pixels(); ++i) {
    if (mask[i] >= classes)
      throw data_error("pixel " + pixel_name(i, mask.width()) + ": class " +
                       std::to_string(mask[i]) + " out of range for " +
                       std::to_string(classes) + " classes");
  }
}

/// Most probable class; ties go to the lowest index.
inline ClassIndex argmax(std::span<const float> probs) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < probs.size(); ++c)
    if (probs[c] > probs[best]) best = c;
  return static_cast<ClassIndex>(best);
}

inline LabelMask argmax_mask(const ProbMap& map) {
  LabelMask mask(map.height(), map.width());
  for (std::size_t i = 0; i < map.pixels(); ++i) mask[i] = argmax(map.pixel(i));
  return mask;
}

// ---------------------------------------------------------------------------
// .cbpm

namespace detail {

inline constexpr std::string_view kCbpmMagic = "CBPM 1\n";

inline std::string cbpm_header(std::size_t h, std::size_t w, std::size_t c) {
  std::string header(kCbpmMagic);
  header += "height=" + std::to_string(h) + " width=" + std::to_string(w) +
            " classes=" + std::to_string(c) + "\n";
  return header;
}

inline void put_le32(std::string& out, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  for (int shift = 0; shift < 32; shift += 8)
    out.push_back(static_cast<char>((bits >> shift) & 0xffu));
}

inline float get_le32(const unsigned char* p) {
  const std::uint32_t bits = std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) |
                             (std::uint32_t{p[2]} << 16) |
                             (std::uint32_t{p[3]} << 24);
  return std::bit_cast<float>(bits);
}

inline std::optional<std::size_t> parse_size(std::string_view s) {
  if (s.empty() || s.size() > 9) return std::nullopt;
  std::size_t v = 0;
  for (char ch : s) {
    if (ch < '0' || ch > '9') return std::nullopt;
    v = v * 10 + static_cast<std::size_t>(ch - '0');
  }
  return v;
}

struct CbpmHeader {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::size_t payload_offset = 0;
};

// Parses the two ASCII header lines from the start of `bytes`.
inline CbpmHeader parse_cbpm_header(std::string_view bytes,
                                    const std::string& name) {
  if (bytes.substr(0, kCbpmMagic.size()) != kCbpmMagic)
    throw data_error(name + ": bad magic (expected \"CBPM 1\")");
  const auto start = kCbpmMagic.size();
  const auto eol = bytes.find('\n', start);
  if (eol == std::string_view::npos)
    throw data_error(name + ": unterminated dimension line");
  std::string_view line = bytes.substr(start, eol - start);

  CbpmHeader header;
  const std::array<std::pair<std::string_view, std::size_t*>, 3> fields{{
      {"height=", &header.height},
      {"width=", &header.width},
      {"classes=", &header.classes},
  }};
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const auto& [key, target] = fields[i];
    if (line.substr(0, key.size()) != key)
      throw data_error(name + ": malformed dimension line");
    line.remove_prefix(key.size());
    const auto end = (i + 1 < fields.size()) ? line.find(' ') : line.size();
    if (end == std::string_view::npos)
      throw data_error(name + ": malformed dimension line");
    const auto value = parse_size(line.substr(0, end));
    if (!value) throw data_error(name + ": malformed dimension line");
    *target = *value;
    line.remove_prefix(std::min(line.size(), end + 1));
  }
  if (header.height == 0 || header.width == 0 ||
      header.height > kMaxDimension || header.width > kMaxDimension)
    throw data_error(name + ": invalid image dimensions");
  if (header.classes < 2 || header.classes > kMaxClasses)
    throw data_error(name + ": invalid class count " +
                     std::to_string(header.classes));
  header.payload_offset = eol + 1;
  return header;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (in.bad()) throw io_error("read failure on " + path.string());
  return bytes;
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("write failure on " + path.string());
}

}  // namespace detail

/// Serializes a validated map to the .cbpm byte stream.
inline std::string encode_probmap(const ProbMap& map) {
  validate(map);
  std::string out = detail::cbpm_header(map.height(), map.width(), map.classes());
  out.reserve(out.size() + map.data().size() * 4);
  for (float v : map.data()) detail::put_le32(out, v);
  return out;
}

inline ProbMap decode_probmap(std::string_view bytes,
                              const std::string& name = "<memory>") {
  const auto header = detail::parse_cbpm_header(bytes, name);
  const std::size_t count = header.height * header.width * header.classes;
  const std::size_t payload = bytes.size() - header.payload_offset;
  if (payload != count * 4)
    throw data_error(name + ": payload length " + std::to_string(payload) +
                     " bytes, header requires " + std::to_string(count * 4));
  std::vector<float> data(count);
  const auto* p =
      reinterpret_cast<const unsigned char*>(bytes.data() + header.payload_offset);
  for (std::size_t i = 0; i < count; ++i) data[i] = detail::get_le32(p + 4 * i);
  ProbMap map(header.height, header.width, header.classes, std::move(data));
  try {
    validate(map);
  } catch (const Error& e) {
    rethrow_with_context(e, name);
  }
  return map;
}

/// Writes nothing if the map violates its invariants.
inline void write_probmap(const ProbMap& map, const fs::path& destination) {
  const auto bytes = encode_probmap(map);
  detail::write_file(destination, bytes);
}

inline ProbMap read_probmap(const fs::path& source) {
  return decode_probmap(detail::read_file(source), source.string());
}

/// Reads only the header lines; used to cross-check dimensions cheaply.
inline std::pair<Shape, std::size_t> read_probmap_shape(const fs::path& source) {
  std::ifstream in(source, std::ios::binary);
  if (!in) throw io_error("cannot open " + source.string());
  std::string head(128, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));
  const auto header = detail::parse_cbpm_header(head, source.string());
  return {{header.height, header.width}, header.classes};
}

// ---------------------------------------------------------------------------
// PNG masks

namespace detail {

struct PngReadState {
  std::string_view bytes;
  std::size_t offset = 0;
};

inline void png_read_from_memory(png_structp png, png_bytep out,
                                 png_size_t length) {
  auto* state = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (state->offset + length > state->bytes.size())
    png_error(png, "truncated PNG stream");
  std::copy_n(state->bytes.data() + state->offset, length,
              reinterpret_cast<char*>(out));
  state->offset += length;
}

inline void png_write_to_string(png_structp png, png_bytep data,
                                png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), length);
}

inline void png_flush_noop(png_structp) {}

[[noreturn]] inline void png_raise(png_structp png, png_const_charp message) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = message;
  png_longjmp(png, 1);
}

inline void png_warn_silently(png_structp, png_const_charp) {}

}  // namespace detail

/// 8-bit grayscale PNG, pixel value = class index.
inline std::string encode_mask_png(const LabelMask& mask) {
  if (mask.height() == 0 || mask.width() == 0)
    throw validation_error("cannot encode empty mask");
  std::string out;
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message,
                                            detail::png_raise,
                                            detail::png_warn_silently);
  if (!png) throw io_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw io_error("png_create_info_struct failed");
  }
  std::vector<png_bytep> rows(mask.height());
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw io_error("PNG encode failed: " + message);
  }
  png_set_write_fn(png, &out, detail::png_write_to_string, detail::png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(mask.width()),
               static_cast<png_uint_32>(mask.height()), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
  auto* base = const_cast<ClassIndex*>(mask.data().data());
  for (std::size_t r = 0; r < mask.height(); ++r)
    rows[r] = base + r * mask.width();
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

/// Encodes interleaved 8-bit RGB rows; used by the overlay emitter.
inline std::string encode_rgb_png(std::size_t height, std::size_t width,
                                  std::span<const std::uint8_t> rgb) {
  if (rgb.size() != height * width * 3)
    throw validation_error("RGB buffer does not match dimensions");
  std::string out;
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message,
                                            detail::png_raise,
                                            detail::png_warn_silently);
  if (!png) throw io_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw io_error("png_create_info_struct failed");
  }
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw io_error("PNG encode failed: " + message);
  }
  png_set_write_fn(png, &out, detail::png_write_to_string, detail::png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
  auto* base = const_cast<std::uint8_t*>(rgb.data());
  for (std::size_t r = 0; r < height; ++r) rows[r] = base + r * width * 3;
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

struct DecodedPng {
  std::size_t height = 0;
  std::size_t width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

// Decodes any 8-bit-or-less PNG without colour conversion. With header_only
// set, stops after IHDR.
inline DecodedPng decode_png(std::string_view bytes, const std::string& name,
                             bool header_only) {
  if (bytes.size() < 8 ||
      png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
    throw data_error(name + ": not a PNG file");
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message,
                                           png_raise, png_warn_silently);
  if (!png) throw io_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw io_error("png_create_info_struct failed");
  }
  PngReadState state{bytes, 0};
  DecodedPng result;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw data_error(name + ": PNG decode failed: " + message);
  }
  png_set_read_fn(png, &state, png_read_from_memory);
  png_read_info(png, info);
  result.width = png_get_image_width(png, info);
  result.height = png_get_image_height(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  result.channels = png_get_channels(png, info);
  if (bit_depth > 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw data_error(name + ": " + std::to_string(bit_depth) +
                     "-bit PNG not supported (8-bit maximum)");
  }
  if (header_only || color_type == PNG_COLOR_TYPE_PALETTE) {
    if (color_type == PNG_COLOR_TYPE_PALETTE) result.channels = 3;
    png_destroy_read_struct(&png, &info, nullptr);
    return result;
  }
  if (bit_depth < 8) png_set_packing(png);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  result.pixels.resize(stride * result.height);
  rows.resize(result.height);
  for (std::size_t r = 0; r < result.height; ++r)
    rows[r] = result.pixels.data() + r * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return result;
}

}  // namespace detail

inline DecodedPng decode_png(std::string_view bytes,
                             const std::string& name = "<memory>") {
  return detail::decode_png(bytes, name, false);
}

inline LabelMask decode_mask_png(std::string_view bytes,
                                 const std::string& name = "<memory>") {
  auto decoded = detail::decode_png(bytes, name, false);
  if (decoded.channels != 1)
    throw data_error(name + ": mask PNG must be single-channel grayscale, has " +
                     std::to_string(decoded.channels) + " channels");
  return LabelMask(decoded.height, decoded.width, std::move(decoded.pixels));
}

inline void write_mask(const LabelMask& mask, const fs::path& destination) {
  detail::write_file(destination, encode_mask_png(mask));
}

/// Class-range validation happens at the use site (see validate_classes).
inline LabelMask read_mask(const fs::path& source) {
  return decode_mask_png(detail::read_file(source), source.string());
}

/// Reads dimensions from the IHDR chunk without decoding pixel data.
inline Shape read_mask_shape(const fs::path& source) {
  std::ifstream in(source, std::ios::binary);
  if (!in) throw io_error("cannot open " + source.string());
  std::array<unsigned char, 26> head{};
  in.read(reinterpret_cast<char*>(head.data()), head.size());
  if (in.gcount() != static_cast<std::streamsize>(head.size()) ||
      png_sig_cmp(head.data(), 0, 8) != 0 ||
      std::string_view(reinterpret_cast<const char*>(head.data()) + 12, 4) != "IHDR")
    throw data_error(source.string() + ": not a PNG file");
  auto be32 = [&](std::size_t at) {
    return (std::size_t{head[at]} << 24) | (std::size_t{head[at + 1]} << 16) |
           (std::size_t{head[at + 2]} << 8) | std::size_t{head[at + 3]};
  };
  const int bit_depth = head[24];
  const int color_type = head[25];
  if (bit_depth > 8)
    throw data_error(source.string() + ": " + std::to_string(bit_depth) +
                     "-bit PNG not supported (8-bit maximum)");
  if (color_type != PNG_COLOR_TYPE_GRAY)
    throw data_error(source.string() + ": mask PNG must be single-channel grayscale");
  return {be32(20), be32(16)};
}

inline nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

// ---------------------------------------------------------------------------
// Manifest

enum class Split { training, validation, testing };

inline constexpr std::array<Split, 3> kAllSplits{Split::training,
                                                 Split::validation,
                                                 Split::testing};

inline std::string to_string(Split split) {
  switch (split) {
    case Split::training: return "training";
    case Split::validation: return "validation";
    case Split::testing: return "testing";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view name) {
  for (Split s : kAllSplits)
    if (to_string(s) == name) return s;
  return std::nullopt;
}

struct ModelEntry {
  std::string model_id;
  std::map<Split, std::string> predictions;  // split -> directory, as written
};

struct ImageEntry {
  std::string image_id;
  std::string mask;  // as written
};

struct Manifest {
  int format_version = 1;
  std::vector<std::string> class_names;
  std::vector<ModelEntry> models;
  std::map<Split, std::vector<ImageEntry>> splits;
  fs::path base_dir;  // relative paths resolve against this

  std::size_t classes() const { return class_names.size(); }

  const ModelEntry* find_model(std::string_view id) const {
    for (const auto& m : models)
      if (m.model_id == id) return &m;
    return nullptr;
  }

  const std::vector<ImageEntry>& images(Split split) const {
    static const std::vector<ImageEntry> empty;
    const auto it = splits.find(split);
    return it == splits.end() ? empty : it->second;
  }

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  fs::path mask_path(const ImageEntry& image) const { return resolve(image.mask); }

  fs::path prediction_path(const ModelEntry& model, Split split,
                           const std::string& image_id) const {
    const auto it = model.predictions.find(split);
    if (it == model.predictions.end())
      throw validation_error("model '" + model.model_id +
                             "' has no predictions for split " + to_string(split));
    return resolve(it->second) / (image_id + ".cbpm");
  }
};

inline nlohmann::ordered_json manifest_to_json(const Manifest& manifest) {
  nlohmann::ordered_json doc;
  doc["format_version"] = manifest.format_version;
  doc["class_names"] = manifest.class_names;
  auto models = nlohmann::ordered_json::array();
  for (const auto& m : manifest.models) {
    nlohmann::ordered_json preds = nlohmann::ordered_json::object();
    for (const auto& [split, dir] : m.predictions) preds[to_string(split)] = dir;
    models.push_back({{"model_id", m.model_id}, {"predictions", preds}});
  }
  doc["models"] = models;
  nlohmann::ordered_json splits = nlohmann::ordered_json::object();
  for (const auto& [split, images] : manifest.splits) {
    auto list = nlohmann::ordered_json::array();
    for (const auto& img : images)
      list.push_back({{"image_id", img.image_id}, {"mask", img.mask}});
    splits[to_string(split)] = list;
  }
  doc["splits"] = splits;
  return doc;
}

inline void write_manifest(const Manifest& manifest, const fs::path& destination) {
  detail::write_file(destination, manifest_to_json(manifest).dump(2) + "\n");
}

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& obj,
                                     const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw validation_error("manifest: " + where + " is missing key '" + key + "'");
  return obj.at(key);
}

inline std::string require_string(const nlohmann::json& obj, const char* key,
                                  const std::string& where) {
  const auto& v = require(obj, key, where);
  if (!v.is_string() || v.get_ref<const std::string&>().empty())
    throw validation_error("manifest: " + where + "." + key +
                           " must be a non-empty string");
  return v.get<std::string>();
}

// Image ids become file names; keep them to a portable character set.
inline bool valid_identifier(std::string_view id) {
  if (id.empty() || id == "." || id == "..") return false;
  return std::all_of(id.begin(), id.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' ||
           ch == '-' || ch == '.';
  });
}

}  // namespace detail

/// Parses the manifest document without touching referenced files.
inline Manifest parse_manifest(std::string_view text, const fs::path& base_dir) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw validation_error(std::string("manifest: malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) throw validation_error("manifest: top level must be an object");

  Manifest m;
  m.base_dir = base_dir;
  const auto& version = detail::require(doc, "format_version", "document");
  if (!version.is_number_integer() || version.get<int>() != 1)
    throw validation_error("manifest: unsupported format_version (expected 1)");

  const auto& names = detail::require(doc, "class_names", "document");
  if (!names.is_array() || names.size() < 2 || names.size() > kMaxClasses)
    throw validation_error("manifest: class_names must list 2.." +
                           std::to_string(kMaxClasses) + " names");
  for (const auto& n : names) {
    if (!n.is_string()) throw validation_error("manifest: class names must be strings");
    m.class_names.push_back(n.get<std::string>());
  }

  const auto& splits = detail::require(doc, "splits", "document");
  if (!splits.is_object()) throw validation_error("manifest: splits must be an object");
  for (const auto& [name, list] : splits.items()) {
    const auto split = parse_split(name);
    if (!split)
      throw validation_error("manifest: unknown split '" + name +
                             "' (allowed: training, validation, testing)");
    if (!list.is_array())
      throw validation_error("manifest: split '" + name + "' must be an array");
    std::set<std::string> seen;
    auto& images = m.splits[*split];
    for (const auto& item : list) {
      const std::string where = "splits." + name;
      ImageEntry entry{detail::require_string(item, "image_id", where),
                       detail::require_string(item, "mask", where)};
      if (!detail::valid_identifier(entry.image_id))
        throw validation_error("manifest: invalid image_id '" + entry.image_id + "'");
      if (!seen.insert(entry.image_id).second)
        throw validation_error("manifest: duplicate image_id '" + entry.image_id +
                               "' in split " + name);
      images.push_back(std::move(entry));
    }
  }

  const auto& models = detail::require(doc, "models", "document");
  if (!models.is_array() || models.empty())
    throw validation_error("manifest: models must be a non-empty array");
  std::set<std::string> ids;
  for (const auto& item : models) {
    ModelEntry model;
    model.model_id = detail::require_string(item, "model_id", "models[]");
    if (!detail::valid_identifier(model.model_id))
      throw validation_error("manifest: invalid model_id '" + model.model_id + "'");
    if (!ids.insert(model.model_id).second)
      throw validation_error("manifest: duplicate model_id '" + model.model_id + "'");
    const auto& preds = detail::require(item, "predictions", "models[" + model.model_id + "]");
    if (!preds.is_object())
      throw validation_error("manifest: predictions of '" + model.model_id +
                             "' must be an object");
    for (const auto& [name, dir] : preds.items()) {
      const auto split = parse_split(name);
      if (!split)
        throw validation_error("manifest: unknown split '" + name + "' in model '" +
                               model.model_id + "'");
      if (!dir.is_string())
        throw validation_error("manifest: prediction directory must be a string");
      model.predictions[*split] = dir.get<std::string>();
    }
    for (const auto& [split, images] : m.splits) {
      if (!model.predictions.contains(split))
        throw validation_error("manifest: model '" + model.model_id +
                               "' lacks a prediction directory for split " +
                               to_string(split));
    }
    m.models.push_back(std::move(model));
  }
  return m;
}

/// Checks every referenced file exists and that all dimensions agree per image.
inline void verify_manifest_files(const Manifest& m) {
  for (const auto& [split, images] : m.splits) {
    for (const auto& image : images) {
      const auto mask_path = m.mask_path(image);
      if (!fs::is_regular_file(mask_path))
        throw io_error("missing mask for image '" + image.image_id + "' (" +
                       to_string(split) + "): " + mask_path.string());
      const Shape mask_shape = read_mask_shape(mask_path);
      for (const auto& model : m.models) {
        const auto path = m.prediction_path(model, split, image.image_id);
        const std::string who = "(model '" + model.model_id + "', image '" +
                                image.image_id + "')";
        if (!fs::is_regular_file(path))
          throw io_error("missing probability map " + who + ": " + path.string());
        const auto [shape, classes] = read_probmap_shape(path);
        if (shape != mask_shape)
          throw data_error("dimension mismatch " + who + ": probability map " +
                           to_string(shape) + " vs mask " + to_string(mask_shape));
        if (classes != m.classes())
          throw data_error("class count mismatch " + who + ": probability map has " +
                           std::to_string(classes) + ", manifest declares " +
                           std::to_string(m.classes()));
      }
    }
  }
}

inline Manifest load_manifest(const fs::path& source) {
  if (!fs::is_regular_file(source))
    throw io_error("manifest not found: " + source.string());
  auto manifest = parse_manifest(detail::read_file(source),
                                 fs::absolute(source).parent_path());
  verify_manifest_files(manifest);
  return manifest;
}

}  // namespace calfuse
