#include <cmath>
#include <cstring>
#include <random>

#include <gtest/gtest.h>

#include "calfuse/tensor_store.hpp"
#include "scratch.hpp"

using namespace calfuse;
using testing_support::Scratch;
using testing_support::slurp;
using testing_support::spit;

namespace {

// IEEE-754 binary32 bits for a normal float, built from frexp.
std::uint32_t binary32_bits(double v) {
  if (v == 0.0) return 0;
  int exp = 0;
  const double frac = std::frexp(std::abs(v), &exp);  // v = frac * 2^exp, frac in [0.5,1)
  const auto biased = static_cast<std::uint32_t>(exp - 1 + 127);
  const auto mantissa = static_cast<std::uint32_t>(std::ldexp(frac * 2.0 - 1.0, 23));
  return (v < 0 ? 0x80000000u : 0u) | (biased << 23) | mantissa;
}

std::string le_bytes(std::uint32_t bits) {
  std::string s;
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  return s;
}

std::string hex(std::string_view bytes) {
  static const char* digits = "0123456789ABCDEF";
  std::string out;
  for (unsigned char b : bytes) {
    if (!out.empty()) out += ' ';
    out += digits[b >> 4];
    out += digits[b & 15];
  }
  return out;
}

template <typename Fn>
std::string error_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

ProbMap random_map(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t c) {
  ProbMap map(h, w, c);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t i = 0; i < map.pixels(); ++i) {
    auto p = map.pixel(i);
    float rest = 1.0f;
    for (std::size_t k = 0; k + 1 < c; ++k) {
      p[k] = rest * u(rng);
      rest -= p[k];
    }
    p[c - 1] = rest;
  }
  return map;
}

}  // namespace

TEST(Cbpm, QuarterThreeQuartersPayload) {
  const ProbMap map(1, 1, 2, {0.25f, 0.75f});
  const auto bytes = encode_probmap(map);
  ASSERT_EQ(bytes.size(), 34u + 8u);
  EXPECT_EQ(bytes.substr(0, 34), "CBPM 1\nheight=1 width=1 classes=2\n");
  EXPECT_EQ(hex(bytes.substr(34)), "00 00 80 3E 00 00 40 3F");
  EXPECT_EQ(bytes.substr(34), le_bytes(binary32_bits(0.25)) + le_bytes(binary32_bits(0.75)));
}

TEST(Cbpm, OneZeroPayload) {
  const auto bytes = encode_probmap(ProbMap(1, 1, 2, {1.0f, 0.0f}));
  EXPECT_EQ(hex(bytes.substr(34)), "00 00 80 3F 00 00 00 00");
}

TEST(Cbpm, HandConverterAgreesWithBitCast) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(1e-6f, 1.0f);
  for (int i = 0; i < 1000; ++i) {
    const float f = u(rng);
    EXPECT_EQ(binary32_bits(f), std::bit_cast<std::uint32_t>(f));
  }
}

TEST(Cbpm, TwoByOneRoundTripsBitwise) {
  Scratch dir;
  const ProbMap map(2, 1, 2, {0.1f, 0.9f, 0.333f, 0.667f});
  write_probmap(map, dir / "m.cbpm");
  const auto back = read_probmap(dir / "m.cbpm");
  EXPECT_EQ(back.height(), 2u);
  EXPECT_EQ(back.width(), 1u);
  EXPECT_EQ(std::memcmp(back.data().data(), map.data().data(), 16), 0);
}

TEST(Cbpm, RandomRoundTripProperty) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto h = 1 + rng() % 9, w = 1 + rng() % 9, c = 2 + rng() % 4;
    const auto map = random_map(rng, h, w, c);
    const auto bytes = encode_probmap(map);
    EXPECT_EQ(decode_probmap(bytes), map);
    EXPECT_EQ(encode_probmap(decode_probmap(bytes)), bytes);
  }
}

TEST(Cbpm, SumOverOneNamesPixel) {
  Scratch dir;
  std::string bytes = "CBPM 1\nheight=1 width=1 classes=2\n";
  bytes += le_bytes(std::bit_cast<std::uint32_t>(0.6f)) +
           le_bytes(std::bit_cast<std::uint32_t>(0.6f));
  spit(dir / "bad.cbpm", bytes);
  const auto msg = error_of([&] { read_probmap(dir / "bad.cbpm"); });
  EXPECT_NE(msg.find("pixel (0,0)"), std::string::npos) << msg;
  EXPECT_NE(msg.find("sum 1.2"), std::string::npos) << msg;
}

TEST(Cbpm, WriterRejectsBeforeWriting) {
  Scratch dir;
  try {
    write_probmap(ProbMap(1, 1, 2, {0.6f, 0.6f}), dir / "never.cbpm");
    FAIL() << "expected rejection";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
  }
  EXPECT_FALSE(fs::exists(dir / "never.cbpm"));
}

TEST(Cbpm, ValueOutsideUnitIntervalRejected) {
  const auto msg = error_of([] { encode_probmap(ProbMap(1, 2, 2, {0.5f, 0.5f, 1.5f, -0.5f})); });
  EXPECT_NE(msg.find("pixel (0,1)"), std::string::npos) << msg;
  EXPECT_NE(msg.find("outside [0,1]"), std::string::npos) << msg;
}

TEST(Cbpm, NanRejected) {
  EXPECT_THROW(encode_probmap(ProbMap(1, 1, 2, {NAN, 1.0f})), Error);
}

TEST(Cbpm, TruncatedPayload) {
  auto bytes = encode_probmap(ProbMap(2, 2, 2, {0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f}));
  bytes.resize(bytes.size() - 3);
  const auto msg = error_of([&] { decode_probmap(bytes); });
  EXPECT_NE(msg.find("payload length"), std::string::npos) << msg;
}

TEST(Cbpm, TrailingBytesRejected) {
  auto bytes = encode_probmap(ProbMap(1, 1, 2, {0.5f, 0.5f}));
  bytes += "xx";
  EXPECT_THROW(decode_probmap(bytes), Error);
}

TEST(Cbpm, BadMagic) {
  const auto msg = error_of([] { decode_probmap("CBPM 2\nheight=1 width=1 classes=2\n"); });
  EXPECT_NE(msg.find("bad magic"), std::string::npos);
}

TEST(Cbpm, MalformedHeaders) {
  for (std::string header : {"CBPM 1\nheight=1 width=1\n", "CBPM 1\nheight=0 width=1 classes=2\n",
                             "CBPM 1\nheight=1 width=1 classes=1\n",
                             "CBPM 1\nheight=1  width=1 classes=2\n",
                             "CBPM 1\nwidth=1 height=1 classes=2\n",
                             "CBPM 1\nheight=-1 width=1 classes=2\n",
                             "CBPM 1\nheight=1 width=1 classes=2"}) {
    header += std::string(8, '\0');
    EXPECT_THROW(decode_probmap(header), Error) << header;
  }
}

TEST(Cbpm, ZeroExtentRejected) {
  EXPECT_THROW(encode_probmap(ProbMap(0, 3, 2)), Error);
  EXPECT_THROW(encode_probmap(ProbMap(1, 1, 1, {1.0f})), Error);
}

TEST(Cbpm, SumToleranceEdge) {
  EXPECT_NO_THROW(encode_probmap(ProbMap(1, 1, 2, {0.50004f, 0.5f})));
  EXPECT_THROW(encode_probmap(ProbMap(1, 1, 2, {0.5002f, 0.5f})), Error);
}

TEST(Cbpm, MissingFileIsIoError) {
  try {
    read_probmap("/nonexistent/x.cbpm");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
    EXPECT_EQ(e.exit_code(), 2);
  }
}

TEST(Cbpm, ShapeFromHeaderOnly) {
  Scratch dir;
  write_probmap(ProbMap(3, 5, 3, std::vector<float>(45, 1.0f / 3.0f)), dir / "s.cbpm");
  const auto [shape, classes] = read_probmap_shape(dir / "s.cbpm");
  EXPECT_EQ(shape, (Shape{3, 5}));
  EXPECT_EQ(classes, 3u);
}

TEST(Argmax, LowestIndexWinsTies) {
  const float p[] = {0.5f, 0.5f};
  EXPECT_EQ(argmax(p), 0);
  const float q[] = {0.2f, 0.4f, 0.4f};
  EXPECT_EQ(argmax(q), 1);
}

TEST(Mask, AllZeroFourByFour) {
  Scratch dir;
  write_mask(LabelMask(4, 4), dir / "z.png");
  const auto mask = read_mask(dir / "z.png");
  EXPECT_EQ(mask.pixels(), 16u);
  for (auto v : mask.data()) EXPECT_EQ(v, 0);
}

TEST(Mask, RoundTripProperty) {
  Scratch dir;
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    LabelMask mask(1 + rng() % 40, 1 + rng() % 40);
    for (auto& v : mask.data()) v = static_cast<ClassIndex>(rng() % 256);
    write_mask(mask, dir / "m.png");
    EXPECT_EQ(read_mask(dir / "m.png"), mask);
    EXPECT_EQ(read_mask_shape(dir / "m.png"), mask.shape());
  }
}

TEST(Mask, EncodingIsDeterministic) {
  LabelMask mask(5, 7, 1);
  EXPECT_EQ(encode_mask_png(mask), encode_mask_png(mask));
}

TEST(Mask, OutOfRangeValueCaughtAtValidation) {
  Scratch dir;
  LabelMask mask(2, 2);
  mask[3] = 7;
  write_mask(mask, dir / "seven.png");
  const auto back = read_mask(dir / "seven.png");
  const auto msg = error_of([&] { validate_classes(back, 2); });
  EXPECT_NE(msg.find("class 7"), std::string::npos) << msg;
  EXPECT_NE(msg.find("(1,1)"), std::string::npos) << msg;
}

TEST(Mask, MultiChannelRejected) {
  const std::vector<std::uint8_t> rgb(2 * 2 * 3, 9);
  const auto bytes = encode_rgb_png(2, 2, rgb);
  const auto msg = error_of([&] { decode_mask_png(bytes); });
  EXPECT_NE(msg.find("single-channel"), std::string::npos) << msg;
  const auto decoded = decode_png(bytes);
  EXPECT_EQ(decoded.channels, 3);
  EXPECT_EQ(decoded.pixels, rgb);
}

TEST(Mask, SixteenBitRejected) {
  std::string bytes;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_set_write_fn(
      png, &bytes,
      [](png_structp p, png_bytep data, png_size_t n) {
        static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<char*>(data), n);
      },
      nullptr);
  png_set_IHDR(png, info, 2, 1, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::uint8_t row[4] = {0, 1, 0, 0};
  png_write_row(png, row);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);

  const auto msg = error_of([&] { decode_mask_png(bytes); });
  EXPECT_NE(msg.find("16-bit"), std::string::npos) << msg;
  Scratch dir;
  spit(dir / "wide.png", bytes);
  EXPECT_THROW(read_mask_shape(dir / "wide.png"), Error);
}

TEST(Mask, NotAPng) {
  EXPECT_THROW(decode_mask_png("hello world, not a png"), Error);
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

struct Fixture {
  Scratch dir;
  Manifest manifest;

  // models x validation images, every map 4x4 binary.
  Fixture(std::size_t models, std::size_t images) {
    manifest.class_names = {"NonLung", "Lung"};
    for (std::size_t m = 0; m < models; ++m) {
      const std::string id = "m" + std::to_string(m);
      manifest.models.push_back({id, {{Split::validation, "pred/" + id}}});
      fs::create_directories(dir / ("pred/" + id));
    }
    fs::create_directories(dir / "masks");
    for (std::size_t i = 0; i < images; ++i) {
      const std::string id = "img" + std::to_string(i);
      manifest.splits[Split::validation].push_back({id, "masks/" + id + ".png"});
      write_mask(LabelMask(4, 4, 1), dir / ("masks/" + id + ".png"));
      for (std::size_t m = 0; m < models; ++m)
        write_probmap(ProbMap(4, 4, 2, std::vector<float>(32, 0.5f)),
                      dir / ("pred/m" + std::to_string(m) + "/" + id + ".cbpm"));
    }
    write_manifest(manifest, dir / "manifest.json");
  }
  fs::path path() const { return dir / "manifest.json"; }
};

}  // namespace

TEST(Manifest, ResolvesEveryPrediction) {
  Fixture fx(2, 3);
  const auto m = load_manifest(fx.path());
  std::set<fs::path> paths;
  for (const auto& model : m.models)
    for (const auto& img : m.images(Split::validation))
      paths.insert(m.prediction_path(model, Split::validation, img.image_id));
  EXPECT_EQ(paths.size(), 6u);
  for (const auto& p : paths) EXPECT_TRUE(fs::exists(p)) << p;
  EXPECT_EQ(m.classes(), 2u);
  EXPECT_TRUE(m.images(Split::testing).empty());
}

TEST(Manifest, JsonRoundTrip) {
  Fixture fx(2, 2);
  const auto m = load_manifest(fx.path());
  EXPECT_EQ(manifest_to_json(m), manifest_to_json(fx.manifest));
}

TEST(Manifest, MissingProbMapNamesModelAndImage) {
  Fixture fx(2, 3);
  fs::remove(fx.dir / "pred/m1/img2.cbpm");
  try {
    load_manifest(fx.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("m1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("img2"), std::string::npos) << msg;
  }
}

TEST(Manifest, DimensionMismatch) {
  Fixture fx(2, 1);
  write_mask(LabelMask(256, 256), fx.dir / "masks/img0.png");
  write_probmap(ProbMap(128, 128, 2, std::vector<float>(128 * 128 * 2, 0.5f)),
                fx.dir / "pred/m0/img0.cbpm");
  write_probmap(ProbMap(256, 256, 2, std::vector<float>(256 * 256 * 2, 0.5f)),
                fx.dir / "pred/m1/img0.cbpm");
  const auto msg = error_of([&] { load_manifest(fx.path()); });
  EXPECT_NE(msg.find("dimension mismatch"), std::string::npos) << msg;
  EXPECT_NE(msg.find("128x128"), std::string::npos) << msg;
}

TEST(Manifest, ClassCountMismatch) {
  Fixture fx(1, 1);
  write_probmap(ProbMap(4, 4, 3, std::vector<float>(48, 1.0f / 3.0f)),
                fx.dir / "pred/m0/img0.cbpm");
  EXPECT_THROW(load_manifest(fx.path()), Error);
}

TEST(Manifest, MissingManifestIsIo) {
  try {
    load_manifest("/nonexistent/manifest.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

TEST(Manifest, SchemaViolations) {
  const std::string good_models =
      R"("models":[{"model_id":"a","predictions":{"validation":"p"}}])";
  const std::vector<std::pair<std::string, std::string>> cases = {
      {"not json", "malformed"},
      {R"([1,2])", "top level"},
      {R"({"format_version":2,"class_names":["a","b"],"splits":{},)" + good_models + "}",
       "format_version"},
      {R"({"format_version":1,"class_names":["a"],"splits":{},)" + good_models + "}",
       "class_names"},
      {R"({"format_version":1,"class_names":["a","b"],"splits":{"train":[]},)" + good_models +
           "}",
       "unknown split"},
      {R"({"format_version":1,"class_names":["a","b"],"splits":{"validation":[{"image_id":"x","mask":"m"},{"image_id":"x","mask":"n"}]},)" +
           good_models + "}",
       "duplicate image_id"},
      {R"({"format_version":1,"class_names":["a","b"],"splits":{"validation":[{"image_id":"../x","mask":"m"}]},)" +
           good_models + "}",
       "invalid image_id"},
      {R"({"format_version":1,"class_names":["a","b"],"splits":{"validation":[]},"models":[{"model_id":"a","predictions":{"validation":"p"}},{"model_id":"a","predictions":{"validation":"q"}}]})",
       "duplicate model_id"},
      {R"({"format_version":1,"class_names":["a","b"],"splits":{"testing":[]},)" + good_models +
           "}",
       "lacks a prediction directory"},
      {R"({"format_version":1,"class_names":["a","b"],"splits":{}})", "missing key 'models'"},
      {R"({"format_version":1,"class_names":["a","b"],"splits":{"validation":[{"mask":"m"}]},)" +
           good_models + "}",
       "image_id"},
  };
  for (const auto& [text, needle] : cases) {
    try {
      parse_manifest(text, "/");
      ADD_FAILURE() << "accepted: " << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::validation) << text;
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos)
          << e.what() << " / wanted " << needle;
    }
  }
}

TEST(Split, Names) {
  for (auto s : kAllSplits) EXPECT_EQ(parse_split(to_string(s)), s);
  EXPECT_FALSE(parse_split("train").has_value());
}
