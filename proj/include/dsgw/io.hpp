#pragma once

// On-disk formats: PNG images and masks, PFM float images, ASCII PLY point
// clouds, binary field checkpoints, JSON configs and the scene-bundle
// directory layout.

#include "dsgw/core.hpp"
#include "dsgw/image.hpp"
#include "dsgw/optim.hpp"
#include "dsgw/scenegen.hpp"
#include "dsgw/segmentation.hpp"
#include "dsgw/trainer.hpp"

#include <json.hpp>
#include <png.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

namespace dsgw {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never see a partial file.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error(ErrorKind::Io, "write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw Error(ErrorKind::Io, "cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Input, path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// PNG

/// [0, 1] float to 8 bits, rounding half to even.
inline std::uint8_t quantize_unit(double v) {
  const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::nearbyint(c * 255.0));
}

/// Float image with every channel snapped to the 8-bit grid.
inline Image quantized(const Image& img) {
  Image out = img;
  out.data = img.data.unaryExpr([](double v) { return quantize_unit(v) / 255.0; });
  return out;
}

namespace detail {

inline void png_write_to_string(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), len);
}

inline void png_flush_noop(png_structp) {}

[[noreturn]] inline void png_fail(png_structp, png_const_charp msg) { throw Error(ErrorKind::Input, std::string("png: ") + msg); }

inline void png_warn(png_structp, png_const_charp) {}

// Rows of `bytes_per_row` bytes each; bit_depth 8 or 16.
inline std::string encode_png(int w, int h, int color_type, int bit_depth, const std::vector<std::uint8_t>& pixels) {
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  if (!png) throw Error(ErrorKind::Io, "png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  const std::size_t row_bytes = pixels.size() / static_cast<std::size_t>(h);
  try {
    png_set_write_fn(png, &out, png_write_to_string, png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y) {
      png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * row_bytes));
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

struct PngReadState {
  const std::string* data;
  std::size_t pos;
};

inline void png_read_from_string(png_structp png, png_bytep out, png_size_t len) {
  auto* s = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (s->pos + len > s->data->size()) throw Error(ErrorKind::Truncated, "png: unexpected end of data");
  std::memcpy(out, s->data->data() + s->pos, len);
  s->pos += len;
}

struct DecodedPng {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;  // row-major, interleaved
};

inline DecodedPng decode_png(const std::string& bytes, const std::string& name) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw Error(ErrorKind::Input, name + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  if (!png) throw Error(ErrorKind::Io, "png: cannot create read struct");
  png_infop info = png_create_info_struct(png);
  PngReadState st{&bytes, 0};
  DecodedPng d;
  try {
    png_set_read_fn(png, &st, png_read_from_string);
    png_read_info(png, info);
    const int ct = png_get_color_type(png, info);
    d.bit_depth = png_get_bit_depth(png, info);
    if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (ct == PNG_COLOR_TYPE_GRAY && d.bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (d.bit_depth < 8) d.bit_depth = 8;
    if (d.bit_depth == 16) png_set_swap(png);  // host order (little endian)
    png_read_update_info(png, info);
    d.width = static_cast<int>(png_get_image_width(png, info));
    d.height = static_cast<int>(png_get_image_height(png, info));
    d.channels = png_get_channels(png, info);
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    std::vector<std::uint8_t> buf(row_bytes * static_cast<std::size_t>(d.height));
    std::vector<png_bytep> rows(static_cast<std::size_t>(d.height));
    for (int y = 0; y < d.height; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + static_cast<std::size_t>(y) * row_bytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    const std::size_t n = static_cast<std::size_t>(d.width) * d.height * d.channels;
    d.samples.resize(n);
    if (d.bit_depth == 16) {
      std::memcpy(d.samples.data(), buf.data(), n * 2);
    } else {
      for (std::size_t i = 0; i < n; ++i) d.samples[i] = buf[i];
    }
  } catch (const Error& e) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(e.kind(), name + ": " + e.what());
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return d;
}

}  // namespace detail

/// 8-bit RGB; grayscale images are written as gray.
inline void write_png(const fs::path& path, const Image& img) {
  if (img.channels() != 3 && img.channels() != 1) {
    throw Error(ErrorKind::Input, "write_png: expected 1 or 3 channels, got " + std::to_string(img.channels()));
  }
  const int c = img.channels();
  std::vector<std::uint8_t> px(img.pixel_count() * static_cast<std::size_t>(c));
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    for (int k = 0; k < c; ++k) px[p * c + k] = quantize_unit(img.data(k, static_cast<Eigen::Index>(p)));
  }
  write_file_atomic(path, detail::encode_png(img.width, img.height, c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                                             8, px));
}

/// Color image in [0, 1]; alpha is dropped and gray is replicated.
inline Image read_png(const fs::path& path) {
  const auto d = detail::decode_png(read_file(path), path.string());
  const double scale = d.bit_depth == 16 ? 65535.0 : 255.0;
  Image img(3, d.width, d.height);
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    for (int k = 0; k < 3; ++k) {
      const int src = d.channels >= 3 ? k : 0;
      img.data(k, static_cast<Eigen::Index>(p)) = d.samples[p * d.channels + src] / scale;
    }
  }
  return img;
}

/// Label ids as a 16-bit grayscale PNG.
inline void write_mask_png(const fs::path& path, const LabelImage& mask) {
  mask.validate();
  std::vector<std::uint8_t> px(mask.ids.size() * 2);
  for (std::size_t i = 0; i < mask.ids.size(); ++i) {
    const auto v = static_cast<std::uint16_t>(mask.ids[i]);
    px[2 * i] = static_cast<std::uint8_t>(v >> 8);  // PNG stores big endian
    px[2 * i + 1] = static_cast<std::uint8_t>(v & 0xff);
  }
  write_file_atomic(path, detail::encode_png(mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 16, px));
}

inline LabelImage read_mask_png(const fs::path& path) {
  const auto d = detail::decode_png(read_file(path), path.string());
  if (d.channels != 1) throw Error(ErrorKind::Input, path.string() + ": masks must be single-channel");
  LabelImage m(d.width, d.height);
  for (std::size_t i = 0; i < m.ids.size(); ++i) m.ids[i] = d.samples[i];
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// PFM (little endian, rows stored bottom to top)

inline void write_pfm(const fs::path& path, const Image& img) {
  if (img.channels() != 3 && img.channels() != 1) throw Error(ErrorKind::Input, "write_pfm: expected 1 or 3 channels");
  std::string out = (img.channels() == 3 ? "PF\n" : "Pf\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n-1.0\n";
  const std::size_t header = out.size();
  out.resize(header + img.pixel_count() * img.channels() * 4);
  char* dst = out.data() + header;
  for (int y = img.height - 1; y >= 0; --y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels(); ++c) {
        const float f = static_cast<float>(img.at(c, x, y));
        std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
        for (int b = 0; b < 4; ++b) *dst++ = static_cast<char>((bits >> (8 * b)) & 0xff);
      }
    }
  }
  write_file_atomic(path, out);
}

inline Image read_pfm(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::istringstream head(bytes);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  head >> magic >> w >> h >> scale;
  if (!head || (magic != "PF" && magic != "Pf") || w <= 0 || h <= 0 || scale == 0.0) {
    throw Error(ErrorKind::Input, path.string() + ": malformed PFM header");
  }
  head.get();  // single whitespace byte after the scale
  const auto start = static_cast<std::size_t>(head.tellg());
  const int c = magic == "PF" ? 3 : 1;
  const std::size_t need = static_cast<std::size_t>(w) * h * c * 4;
  if (bytes.size() < start + need) throw Error(ErrorKind::Truncated, path.string() + ": PFM pixel data truncated");
  const bool little = scale < 0.0;
  Image img(c, w, h);
  const auto* src = reinterpret_cast<const unsigned char*>(bytes.data() + start);
  for (int y = h - 1; y >= 0; --y) {
    for (int x = 0; x < w; ++x) {
      for (int k = 0; k < c; ++k) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
          const int shift = little ? 8 * b : 8 * (3 - b);
          bits |= static_cast<std::uint32_t>(src[b]) << shift;
        }
        src += 4;
        img.at(k, x, y) = std::bit_cast<float>(bits);
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// PLY (ASCII; x, y, z, r, g, b, label with colors in [0, 1])

inline void write_ply(const fs::path& path, const PointCloud& pc) {
  if (pc.colors.size() != pc.size() || pc.labels.size() != pc.size()) {
    throw Error(ErrorKind::Input, "write_ply: point attribute counts differ");
  }
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\nelement vertex " << pc.size()
      << "\nproperty double x\nproperty double y\nproperty double z\n"
         "property double r\nproperty double g\nproperty double b\nproperty int label\nend_header\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const auto& p = pc.positions[i];
    const auto& c = pc.colors[i];
    out << p.x() << ' ' << p.y() << ' ' << p.z() << ' ' << c.x() << ' ' << c.y() << ' ' << c.z() << ' '
        << pc.labels[i] << '\n';
  }
  write_file_atomic(path, out.str());
}

inline PointCloud read_ply(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  if (line != "ply") throw Error(ErrorKind::Input, path.string() + ": not a PLY file");
  std::size_t count = 0;
  std::vector<std::string> props;
  bool ascii = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (word == "element") {
      std::string name;
      ls >> name >> count;
      if (name != "vertex") throw Error(ErrorKind::Input, path.string() + ": only vertex elements are supported");
    } else if (word == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    } else if (word == "end_header") {
      break;
    }
  }
  if (!ascii) throw Error(ErrorKind::Input, path.string() + ": only ASCII PLY is supported");
  auto find = [&](const std::string& n) -> std::size_t {
    for (std::size_t i = 0; i < props.size(); ++i) {
      if (props[i] == n) return i;
    }
    throw Error(ErrorKind::Input, path.string() + ": missing vertex property '" + n + "'");
  };
  const std::size_t ix = find("x"), iy = find("y"), iz = find("z"), ir = find("r"), ig = find("g"), ib = find("b"),
                    il = find("label");
  PointCloud pc;
  std::vector<double> vals(props.size());
  for (std::size_t i = 0; i < count; ++i) {
    for (auto& v : vals) {
      if (!(in >> v)) throw Error(ErrorKind::Truncated, path.string() + ": vertex " + std::to_string(i) + " is incomplete");
    }
    pc.positions.emplace_back(vals[ix], vals[iy], vals[iz]);
    pc.colors.emplace_back(vals[ir], vals[ig], vals[ib]);
    pc.labels.push_back(static_cast<int>(vals[il]));
  }
  return pc;
}

// ---------------------------------------------------------------------------
// Field checkpoints
//
// "DSGW", u32 version, then tagged sections: 4-byte tag, u64 payload length,
// payload. All numbers are little endian; parameter arrays are f64, column
// major (one column per primitive). Unknown tags are skipped.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct FieldCheckpoint {
  GaussianField field;
  Classifier classifier = Classifier::zeros();
  std::optional<AdamState> adam;
  std::optional<AdamState> classifier_adam;
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (sizeof(T) == 8) {
      write_le(std::bit_cast<std::uint64_t>(v), 8);
    } else if constexpr (sizeof(T) == 4) {
      write_le(std::bit_cast<std::uint32_t>(v), 4);
    } else {
      static_assert(sizeof(T) == 8 || sizeof(T) == 4);
    }
  }
  void put_matrix(const Eigen::MatrixXd& m) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) put(m(i, j));
    }
  }
  std::string& bytes() { return buf_; }

 private:
  void write_le(std::uint64_t bits, int n) {
    for (int b = 0; b < n; ++b) buf_.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const char* data, std::size_t size, std::string section)
      : data_(data), size_(size), section_(std::move(section)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + b])) << (8 * b);
    }
    pos_ += sizeof(T);
    if constexpr (sizeof(T) == 8) {
      return std::bit_cast<T>(bits);
    } else {
      return std::bit_cast<T>(static_cast<std::uint32_t>(bits));
    }
  }
  Eigen::MatrixXd get_matrix(Eigen::Index rows, Eigen::Index cols) {
    need(static_cast<std::size_t>(rows * cols) * 8);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = get<double>();
    }
    return m;
  }
  void expect_end() const {
    if (pos_ != size_) throw Error(ErrorKind::Input, "checkpoint section " + section_ + " has trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > size_) throw Error(ErrorKind::Truncated, "checkpoint truncated in section " + section_);
  }
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string section_;
};

inline void put_section(std::string& out, const char tag[5], const std::string& payload) {
  out.append(tag, 4);
  ByteWriter w;
  w.put(static_cast<std::uint64_t>(payload.size()));
  out += w.bytes();
  out += payload;
}

inline std::string encode_adam(const AdamState& a) {
  ByteWriter w;
  w.put(static_cast<std::int64_t>(a.step));
  w.put(a.config.beta1);
  w.put(a.config.beta2);
  w.put(a.config.eps);
  w.put(static_cast<std::uint32_t>(a.groups.size()));
  for (const auto& g : a.groups) {
    w.put(static_cast<std::uint64_t>(g.m.rows()));
    w.put(static_cast<std::uint64_t>(g.m.cols()));
    w.put_matrix(g.m);
    w.put_matrix(g.v);
  }
  return std::move(w.bytes());
}

inline AdamState decode_adam(ByteReader& r) {
  AdamState a;
  a.step = r.get<std::int64_t>();
  a.config.beta1 = r.get<double>();
  a.config.beta2 = r.get<double>();
  a.config.eps = r.get<double>();
  const auto groups = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < groups; ++k) {
    const auto rows = static_cast<Eigen::Index>(r.get<std::uint64_t>());
    const auto cols = static_cast<Eigen::Index>(r.get<std::uint64_t>());
    AdamMoments m;
    m.m = r.get_matrix(rows, cols);
    m.v = r.get_matrix(rows, cols);
    a.groups.push_back(std::move(m));
  }
  r.expect_end();
  return a;
}

}  // namespace detail

inline std::string encode_checkpoint(const FieldCheckpoint& ck) {
  const FieldArrays a = pack_field(ck.field);
  std::string out = "DSGW";
  {
    detail::ByteWriter w;
    w.put(kCheckpointVersion);
    out += w.bytes();
  }
  {
    detail::ByteWriter w;
    w.put(static_cast<std::uint64_t>(a.size()));
    w.put(static_cast<std::int32_t>(a.object_count));
    detail::put_section(out, "HEAD", w.bytes());
  }
  const std::pair<const char*, const Eigen::MatrixXd*> arrays[] = {
      {"CENT", &a.center}, {"ROTN", &a.rotation}, {"LSCL", &a.log_scale},
      {"OPAC", &a.opacity}, {"COLR", &a.color},   {"IDEN", &a.identity}};
  for (const auto& [tag, m] : arrays) {
    detail::ByteWriter w;
    w.put_matrix(*m);
    detail::put_section(out, tag, w.bytes());
  }
  {
    detail::ByteWriter w;
    for (int l : a.labels) w.put(static_cast<std::int32_t>(l));
    detail::put_section(out, "LABL", w.bytes());
  }
  {
    detail::ByteWriter w;
    w.put_matrix(ck.classifier.weights);
    w.put_matrix(ck.classifier.bias);
    detail::put_section(out, "CLSF", w.bytes());
  }
  if (ck.adam) detail::put_section(out, "ADAM", detail::encode_adam(*ck.adam));
  if (ck.classifier_adam) detail::put_section(out, "CADM", detail::encode_adam(*ck.classifier_adam));
  return out;
}

inline FieldCheckpoint decode_checkpoint(const std::string& bytes, const std::string& name = "checkpoint") {
  if (bytes.size() < 4 || bytes.compare(0, 4, "DSGW") != 0) {
    throw Error(ErrorKind::BadMagic, name + ": bad magic (not a DSGW checkpoint)");
  }
  detail::ByteReader vr(bytes.data() + 4, bytes.size() - 4, "header");
  const auto version = vr.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::Version, name + ": checkpoint format version " + std::to_string(version) +
                                        " is not supported (this build reads version " +
                                        std::to_string(kCheckpointVersion) + ")");
  }
  FieldCheckpoint ck;
  FieldArrays a;
  std::optional<std::uint64_t> n;
  bool seen[8] = {};
  std::size_t pos = 8;
  while (pos < bytes.size()) {
    if (pos + 12 > bytes.size()) throw Error(ErrorKind::Truncated, name + ": checkpoint truncated in a section header");
    const std::string tag = bytes.substr(pos, 4);
    detail::ByteReader lr(bytes.data() + pos + 4, 8, tag);
    const auto len = lr.get<std::uint64_t>();
    pos += 12;
    if (len > bytes.size() - pos) throw Error(ErrorKind::Truncated, name + ": checkpoint truncated in section " + tag);
    detail::ByteReader r(bytes.data() + pos, static_cast<std::size_t>(len), tag);
    pos += static_cast<std::size_t>(len);
    auto cols = [&]() -> Eigen::Index {
      if (!n) throw Error(ErrorKind::Input, name + ": section " + tag + " precedes HEAD");
      return static_cast<Eigen::Index>(*n);
    };
    if (tag == "HEAD") {
      n = r.get<std::uint64_t>();
      a.object_count = r.get<std::int32_t>();
      seen[0] = true;
    } else if (tag == "CENT") {
      a.center = r.get_matrix(3, cols());
      seen[1] = true;
    } else if (tag == "ROTN") {
      a.rotation = r.get_matrix(4, cols());
      seen[2] = true;
    } else if (tag == "LSCL") {
      a.log_scale = r.get_matrix(3, cols());
      seen[3] = true;
    } else if (tag == "OPAC") {
      a.opacity = r.get_matrix(1, cols());
      seen[4] = true;
    } else if (tag == "COLR") {
      a.color = r.get_matrix(3, cols());
      seen[5] = true;
    } else if (tag == "IDEN") {
      a.identity = r.get_matrix(kIdentityDim, cols());
      seen[6] = true;
    } else if (tag == "LABL") {
      a.labels.resize(static_cast<std::size_t>(cols()));
      for (auto& l : a.labels) l = r.get<std::int32_t>();
      seen[7] = true;
    } else if (tag == "CLSF") {
      ck.classifier.weights = r.get_matrix(kNumClasses, kIdentityDim);
      ck.classifier.bias = r.get_matrix(kNumClasses, 1);
    } else if (tag == "ADAM") {
      ck.adam = detail::decode_adam(r);
      continue;
    } else if (tag == "CADM") {
      ck.classifier_adam = detail::decode_adam(r);
      continue;
    } else {
      continue;  // unknown section
    }
    r.expect_end();
  }
  static const char* names[] = {"HEAD", "CENT", "ROTN", "LSCL", "OPAC", "COLR", "IDEN", "LABL"};
  for (int k = 0; k < 8; ++k) {
    if (!seen[k]) throw Error(ErrorKind::Truncated, name + ": checkpoint truncated, section " + names[k] + " missing");
  }
  ck.field = unpack_field(a);
  return ck;
}

inline void save_field(const fs::path& path, const FieldCheckpoint& ck) { write_file_atomic(path, encode_checkpoint(ck)); }

inline FieldCheckpoint load_field(const fs::path& path) { return decode_checkpoint(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// JSON conversions

namespace detail {

inline json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline Vec3 json_vec3(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorKind::Input, what + " must be an array of 3 numbers");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

// Reads `key` into `out` when present.
template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& what) {
  if (!j.is_object()) throw Error(ErrorKind::Input, what + " must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* known : keys) ok = ok || k == known;
    if (!ok) throw Error(ErrorKind::Input, what + ": unknown key '" + k + "'");
  }
}

// Wraps nlohmann type errors as input errors.
template <class F>
auto json_guard(const std::string& what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Input, what + ": " + e.what());
  }
}

}  // namespace detail

inline json to_json(const RigidTransform& t) {
  return {{"rotation", {t.rotation.w(), t.rotation.x(), t.rotation.y(), t.rotation.z()}},
          {"translation", detail::vec_json(t.translation)}};
}

inline RigidTransform rigid_from_json(const json& j) {
  return detail::json_guard("rigid transform", [&] {
    detail::reject_unknown(j, {"rotation", "translation"}, "rigid transform");
    const auto& q = j.at("rotation");
    if (!q.is_array() || q.size() != 4) throw Error(ErrorKind::Input, "rotation must be [w, x, y, z]");
    RigidTransform t;
    t.rotation = Quat(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(), q[3].get<double>());
    if (std::abs(t.rotation.norm() - 1.0) > 1e-6) throw Error(ErrorKind::Input, "rotation quaternion is not unit length");
    t.translation = detail::json_vec3(j.at("translation"), "translation");
    return t;
  });
}

/// {"objects": [{"label": 1, "rotation": [w,x,y,z], "translation": [x,y,z]}, ...]}
inline json to_json(const SceneTransform& t) {
  json objs = json::array();
  for (const auto& [label, rt] : t.per_object()) {
    json o = to_json(rt);
    o["label"] = label;
    objs.push_back(o);
  }
  return {{"objects", objs}};
}

inline SceneTransform scene_transform_from_json(const json& j) {
  return detail::json_guard("scene transform", [&] {
    detail::reject_unknown(j, {"objects"}, "scene transform");
    SceneTransform t;
    for (const auto& o : j.at("objects")) {
      json rt = o;
      const int label = rt.at("label").get<int>();
      rt.erase("label");
      if (t.contains(label)) throw Error(ErrorKind::Input, "object " + std::to_string(label) + " listed twice");
      t.set(label, rigid_from_json(rt));
    }
    return t;
  });
}

inline json to_json(const Camera& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height},
          {"world_to_cam", to_json(c.world_to_cam)}};
}

inline Camera camera_from_json(const json& j) {
  return detail::json_guard("camera", [&] {
    detail::reject_unknown(j, {"fx", "fy", "cx", "cy", "width", "height", "world_to_cam"}, "camera");
    Camera c;
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.world_to_cam = rigid_from_json(j.at("world_to_cam"));
    c.validate();
    return c;
  });
}

inline json to_json(const SceneSpec& s) {
  return {{"object_count", s.object_count},
          {"shapes", s.shapes},
          {"ground_half_extent", s.ground_half_extent},
          {"ground_spacing", s.ground_spacing},
          {"object_point_spacing", s.object_point_spacing},
          {"placement_half_extent", s.placement_half_extent},
          {"sphere_radius_min", s.sphere_radius_min},
          {"sphere_radius_max", s.sphere_radius_max},
          {"box_half_min", s.box_half_min},
          {"box_half_max", s.box_half_max},
          {"checker_period", s.checker_period},
          {"checker_sharpness", s.checker_sharpness},
          {"checker_contrast", s.checker_contrast},
          {"noise_amplitude", s.noise_amplitude},
          {"noise_scale", s.noise_scale},
          {"train_views", s.train_views},
          {"test_views", s.test_views},
          {"camera_radius", s.camera_radius},
          {"elevation_deg", s.elevation_deg},
          {"fov_deg", s.fov_deg},
          {"width", s.width},
          {"height", s.height},
          {"supersample", s.supersample},
          {"mask_noise_px", s.mask_noise_px},
          {"footprint_margin", s.footprint_margin},
          {"max_attempts", s.max_attempts},
          {"seed", s.seed}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline SceneSpec scene_spec_from_json(const json& j) {
  return detail::json_guard("scene spec", [&] {
    const json defaults = to_json(SceneSpec{});
    for (const auto& [k, _] : j.items()) {
      if (!defaults.contains(k)) throw Error(ErrorKind::Input, "scene spec: unknown key '" + k + "'");
    }
    SceneSpec s;
    using detail::read_opt;
    read_opt(j, "object_count", s.object_count);
    read_opt(j, "shapes", s.shapes);
    read_opt(j, "ground_half_extent", s.ground_half_extent);
    read_opt(j, "ground_spacing", s.ground_spacing);
    read_opt(j, "object_point_spacing", s.object_point_spacing);
    read_opt(j, "placement_half_extent", s.placement_half_extent);
    read_opt(j, "sphere_radius_min", s.sphere_radius_min);
    read_opt(j, "sphere_radius_max", s.sphere_radius_max);
    read_opt(j, "box_half_min", s.box_half_min);
    read_opt(j, "box_half_max", s.box_half_max);
    read_opt(j, "checker_period", s.checker_period);
    read_opt(j, "checker_sharpness", s.checker_sharpness);
    read_opt(j, "checker_contrast", s.checker_contrast);
    read_opt(j, "noise_amplitude", s.noise_amplitude);
    read_opt(j, "noise_scale", s.noise_scale);
    read_opt(j, "train_views", s.train_views);
    read_opt(j, "test_views", s.test_views);
    read_opt(j, "camera_radius", s.camera_radius);
    read_opt(j, "elevation_deg", s.elevation_deg);
    read_opt(j, "fov_deg", s.fov_deg);
    read_opt(j, "width", s.width);
    read_opt(j, "height", s.height);
    read_opt(j, "supersample", s.supersample);
    read_opt(j, "mask_noise_px", s.mask_noise_px);
    read_opt(j, "footprint_margin", s.footprint_margin);
    read_opt(j, "max_attempts", s.max_attempts);
    read_opt(j, "seed", s.seed);
    s.validate();
    return s;
  });
}

inline json to_json(const TrainConfig& c) {
  return {{"phase1_iters", c.phase1_iters},
          {"phase2_iters", c.phase2_iters},
          {"desk_scale", c.desk_scale},
          {"lr",
           {{"center", c.lr.center},
            {"rotation", c.lr.rotation},
            {"log_scale", c.lr.log_scale},
            {"opacity", c.lr.opacity},
            {"color", c.lr.color},
            {"identity", c.lr.identity},
            {"classifier", c.lr.classifier}}},
          {"loss",
           {{"lambda_ssim", c.loss.lambda_ssim},
            {"lambda_id", c.loss.lambda_id},
            {"lambda_3d", c.loss.lambda_3d},
            {"knn_k", c.loss.knn_k},
            {"lambda_a", c.loss.lambda_a},
            {"lambda_p", c.loss.lambda_p},
            {"soft_ce", c.loss.soft_mode == SoftCeMode::Symmetric ? "symmetric" : "a_to_b"}}},
          {"tau", c.tau},
          {"tau_paste", c.tau_paste},
          {"seed", c.seed},
          {"prune", c.prune},
          {"paste", c.paste},
          {"paste_before_joint", c.paste_before_joint},
          {"relabel_interval", c.relabel_interval},
          {"relabel_confidence", c.relabel_confidence},
          {"prune_interval", c.prune_interval},
          {"pseudo_interval", c.pseudo_interval},
          {"pseudo_full_rotation", c.pseudo.full_rotation},
          {"pseudo_max_attempts", c.pseudo.max_attempts_per_object},
          {"pseudo_seed_retries", c.pseudo_seed_retries}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig train_config_from_json(const json& j) {
  return detail::json_guard("train config", [&] {
    const json defaults = to_json(TrainConfig{});
    for (const auto& [k, v] : j.items()) {
      if (!defaults.contains(k)) throw Error(ErrorKind::Input, "train config: unknown key '" + k + "'");
      if (defaults[k].is_object()) {
        for (const auto& [kk, _] : v.items()) {
          if (!defaults[k].contains(kk)) throw Error(ErrorKind::Input, "train config: unknown key '" + k + "." + kk + "'");
        }
      }
    }
    TrainConfig c;
    using detail::read_opt;
    read_opt(j, "phase1_iters", c.phase1_iters);
    read_opt(j, "phase2_iters", c.phase2_iters);
    read_opt(j, "desk_scale", c.desk_scale);
    if (j.contains("lr")) {
      const auto& l = j["lr"];
      read_opt(l, "center", c.lr.center);
      read_opt(l, "rotation", c.lr.rotation);
      read_opt(l, "log_scale", c.lr.log_scale);
      read_opt(l, "opacity", c.lr.opacity);
      read_opt(l, "color", c.lr.color);
      read_opt(l, "identity", c.lr.identity);
      read_opt(l, "classifier", c.lr.classifier);
    }
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      read_opt(l, "lambda_ssim", c.loss.lambda_ssim);
      read_opt(l, "lambda_id", c.loss.lambda_id);
      read_opt(l, "lambda_3d", c.loss.lambda_3d);
      read_opt(l, "knn_k", c.loss.knn_k);
      read_opt(l, "lambda_a", c.loss.lambda_a);
      read_opt(l, "lambda_p", c.loss.lambda_p);
      if (l.contains("soft_ce")) {
        const auto m = l["soft_ce"].get<std::string>();
        if (m == "symmetric") {
          c.loss.soft_mode = SoftCeMode::Symmetric;
        } else if (m == "a_to_b") {
          c.loss.soft_mode = SoftCeMode::AToB;
        } else {
          throw Error(ErrorKind::Input, "loss.soft_ce must be 'symmetric' or 'a_to_b'");
        }
      }
    }
    read_opt(j, "tau", c.tau);
    read_opt(j, "tau_paste", c.tau_paste);
    read_opt(j, "seed", c.seed);
    read_opt(j, "prune", c.prune);
    read_opt(j, "paste", c.paste);
    read_opt(j, "paste_before_joint", c.paste_before_joint);
    read_opt(j, "relabel_interval", c.relabel_interval);
    read_opt(j, "relabel_confidence", c.relabel_confidence);
    read_opt(j, "prune_interval", c.prune_interval);
    read_opt(j, "pseudo_interval", c.pseudo_interval);
    read_opt(j, "pseudo_full_rotation", c.pseudo.full_rotation);
    read_opt(j, "pseudo_max_attempts", c.pseudo.max_attempts_per_object);
    read_opt(j, "pseudo_seed_retries", c.pseudo_seed_retries);
    c.validate();
    return c;
  });
}

// ---------------------------------------------------------------------------
// Scene bundle directory
//
//   manifest.json    scene description, poses, bounds and the file index
//   cameras.json     {"train": [...], "test": [...]}
//   transforms.json  {"t_12": ..., "t_1t": ...}
//   points1.ply, points2.ply
//   state1/{train,test}/NNN.png, NNN.pfm, NNN_mask.png   (same for state2)
//   test/NNN.png, NNN.pfm, NNN_mask.png                  (held-out state)
//
// PNGs are the 8-bit images; the PFMs carry the float renders that metrics
// use.

namespace detail {

inline std::string view_stem(std::size_t i) {
  std::ostringstream ss;
  ss << std::setw(3) << std::setfill('0') << i;
  return ss.str();
}

inline json pose_list_json(const std::vector<Pose>& poses) {
  json a = json::array();
  for (const auto& p : poses) a.push_back({{"x", p.x}, {"y", p.y}, {"yaw", p.yaw}});
  return a;
}

inline std::vector<Pose> pose_list_from_json(const json& a) {
  std::vector<Pose> out;
  for (const auto& p : a) out.push_back({p.at("x").get<double>(), p.at("y").get<double>(), p.at("yaw").get<double>()});
  return out;
}

inline json write_views(const fs::path& root, const std::string& rel, const std::vector<Observation>& views) {
  json files = json::array();
  for (std::size_t i = 0; i < views.size(); ++i) {
    const std::string stem = rel + "/" + view_stem(i);
    write_png(root / (stem + ".png"), views[i].image);
    write_pfm(root / (stem + ".pfm"), views[i].image);
    write_mask_png(root / (stem + "_mask.png"), views[i].mask);
    files.push_back({{"image", stem + ".png"}, {"float_image", stem + ".pfm"}, {"mask", stem + "_mask.png"}});
  }
  return files;
}

inline void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw Error(ErrorKind::Io, "bundle file missing: " + p.string());
}

inline std::vector<Observation> read_views(const fs::path& root, const json& files) {
  std::vector<Observation> out;
  for (const auto& f : files) {
    Observation obs;
    const fs::path img = root / f.at("image").get<std::string>();
    const fs::path mask = root / f.at("mask").get<std::string>();
    require_file(img);
    require_file(mask);
    if (f.contains("float_image") && fs::is_regular_file(root / f["float_image"].get<std::string>())) {
      obs.image = read_pfm(root / f["float_image"].get<std::string>());
    } else {
      obs.image = read_png(img);
    }
    obs.mask = read_mask_png(mask);
    out.push_back(std::move(obs));
  }
  return out;
}

}  // namespace detail

inline void save_bundle(const fs::path& dir, const DualSceneBundle& b) {
  fs::create_directories(dir);
  json objects = json::array();
  for (const auto& o : b.scene.objects) {
    objects.push_back({{"kind", to_string(o.kind)},
                       {"size", detail::vec_json(o.size)},
                       {"albedo", detail::vec_json(o.albedo)},
                       {"phase", o.phase}});
  }
  json files;
  files["state1"] = {{"train", detail::write_views(dir, "state1/train", b.state1.train)},
                     {"test", detail::write_views(dir, "state1/test", b.state1.test)}};
  files["state2"] = {{"train", detail::write_views(dir, "state2/train", b.state2.train)},
                     {"test", detail::write_views(dir, "state2/test", b.state2.test)}};
  files["test"] = detail::write_views(dir, "test", b.test_views);
  files["points1"] = "points1.ply";
  files["points2"] = "points2.ply";
  files["cameras"] = "cameras.json";
  files["transforms"] = "transforms.json";
  write_ply(dir / "points1.ply", b.points1);
  write_ply(dir / "points2.ply", b.points2);

  json cams = {{"train", json::array()}, {"test", json::array()}};
  for (const auto& c : b.train_cameras) cams["train"].push_back(to_json(c));
  for (const auto& c : b.test_cameras) cams["test"].push_back(to_json(c));
  write_json(dir / "cameras.json", cams);
  write_json(dir / "transforms.json", {{"t_12", to_json(b.t_12)}, {"t_1t", to_json(b.t_1t)}});

  json manifest = {{"format", "dsgw-bundle"},
                   {"version", 1},
                   {"spec", to_json(b.scene.spec)},
                   {"objects", objects},
                   {"poses",
                    {{"state1", detail::pose_list_json(b.poses1)},
                     {"state2", detail::pose_list_json(b.poses2)},
                     {"test", detail::pose_list_json(b.poses_test)}}},
                   {"bounds", {{"lo", detail::vec_json(b.bounds.lo)}, {"hi", detail::vec_json(b.bounds.hi)}}},
                   {"files", files}};
  write_json(dir / "manifest.json", manifest);
}

inline DualSceneBundle load_bundle(const fs::path& dir) {
  detail::require_file(dir / "manifest.json");
  const json m = read_json(dir / "manifest.json");
  return detail::json_guard("manifest " + (dir / "manifest.json").string(), [&] {
    if (m.value("format", "") != "dsgw-bundle") throw Error(ErrorKind::Input, "manifest.json is not a dsgw bundle manifest");
    if (m.value("version", 0) != 1) {
      throw Error(ErrorKind::Version, "bundle version " + m.at("version").dump() + " is not supported");
    }
    DualSceneBundle b;
    b.scene.spec = scene_spec_from_json(m.at("spec"));
    for (const auto& o : m.at("objects")) {
      ObjectShape s;
      s.kind = shape_from_string(o.at("kind").get<std::string>());
      s.size = detail::json_vec3(o.at("size"), "object size");
      s.albedo = detail::json_vec3(o.at("albedo"), "object albedo");
      s.phase = o.at("phase").get<double>();
      b.scene.objects.push_back(s);
    }
    b.poses1 = detail::pose_list_from_json(m.at("poses").at("state1"));
    b.poses2 = detail::pose_list_from_json(m.at("poses").at("state2"));
    b.poses_test = detail::pose_list_from_json(m.at("poses").at("test"));
    b.bounds.lo = detail::json_vec3(m.at("bounds").at("lo"), "bounds.lo");
    b.bounds.hi = detail::json_vec3(m.at("bounds").at("hi"), "bounds.hi");

    const auto& files = m.at("files");
    const fs::path cams_path = dir / files.at("cameras").get<std::string>();
    const fs::path tr_path = dir / files.at("transforms").get<std::string>();
    detail::require_file(cams_path);
    detail::require_file(tr_path);
    const json cams = read_json(cams_path);
    for (const auto& c : cams.at("train")) b.train_cameras.push_back(camera_from_json(c));
    for (const auto& c : cams.at("test")) b.test_cameras.push_back(camera_from_json(c));
    const json tr = read_json(tr_path);
    b.t_12 = scene_transform_from_json(tr.at("t_12"));
    b.t_1t = scene_transform_from_json(tr.at("t_1t"));

    b.state1.train = detail::read_views(dir, files.at("state1").at("train"));
    b.state1.test = detail::read_views(dir, files.at("state1").at("test"));
    b.state2.train = detail::read_views(dir, files.at("state2").at("train"));
    b.state2.test = detail::read_views(dir, files.at("state2").at("test"));
    b.test_views = detail::read_views(dir, files.at("test"));
    for (const char* key : {"points1", "points2"}) detail::require_file(dir / files.at(key).get<std::string>());
    b.points1 = read_ply(dir / files.at("points1").get<std::string>());
    b.points2 = read_ply(dir / files.at("points2").get<std::string>());

    if (b.state1.train.size() != b.train_cameras.size() || b.state2.train.size() != b.train_cameras.size()) {
      throw Error(ErrorKind::Input, "bundle: training views and cameras disagree in count");
    }
    // Every object moved by t_12 must be visible in some state-1 mask.
    std::set<int> seen;
    for (const auto& obs : b.state1.train) seen.insert(obs.mask.ids.begin(), obs.mask.ids.end());
    for (const auto& [label, _] : b.t_12.per_object()) {
      if (!seen.count(label)) {
        throw Error(ErrorKind::LabelDomain, "bundle: t_12 moves object " + std::to_string(label) +
                                                " which no state-1 mask contains");
      }
    }
    return b;
  });
}

}  // namespace dsgw
