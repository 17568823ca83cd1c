#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "mvsa/detail/binary_io.hpp"
#include "mvsa/errors.hpp"
#include "mvsa/fusion.hpp"

namespace mvsa {

enum class PlyFormat { kAscii, kBinaryLittleEndian };

/// Vertices as float32 x/y/z, faces as uchar count + int32 indices.
inline std::vector<unsigned char> encode_ply(const TriangleMesh& mesh, PlyFormat format) {
  mesh.validate();
  std::string header = "ply\n";
  header += format == PlyFormat::kAscii ? "format ascii 1.0\n" : "format binary_little_endian 1.0\n";
  header += "element vertex " + std::to_string(mesh.vertices.size()) + "\n";
  header += "property float x\nproperty float y\nproperty float z\n";
  header += "element face " + std::to_string(mesh.triangles.size()) + "\n";
  header += "property list uchar int vertex_indices\nend_header\n";

  std::vector<unsigned char> out(header.begin(), header.end());
  if (format == PlyFormat::kAscii) {
    char line[128];
    for (const Vec3& v : mesh.vertices) {
      const int n = std::snprintf(line, sizeof line, "%.9g %.9g %.9g\n", static_cast<double>(static_cast<float>(v.x())),
                                  static_cast<double>(static_cast<float>(v.y())),
                                  static_cast<double>(static_cast<float>(v.z())));
      out.insert(out.end(), line, line + n);
    }
    for (const auto& t : mesh.triangles) {
      const int n = std::snprintf(line, sizeof line, "3 %d %d %d\n", t[0], t[1], t[2]);
      out.insert(out.end(), line, line + n);
    }
    return out;
  }
  detail::ByteWriter w;
  for (const Vec3& v : mesh.vertices) {
    w.put<float>(static_cast<float>(v.x()));
    w.put<float>(static_cast<float>(v.y()));
    w.put<float>(static_cast<float>(v.z()));
  }
  for (const auto& t : mesh.triangles) {
    w.put<std::uint8_t>(3);
    for (int i : t) w.put<std::int32_t>(i);
  }
  out.insert(out.end(), w.bytes().begin(), w.bytes().end());
  return out;
}

namespace detail {

enum class PlyType { kInt8, kUInt8, kInt16, kUInt16, kInt32, kUInt32, kFloat32, kFloat64 };

inline bool parse_ply_type(const std::string& s, PlyType& t) {
  if (s == "char" || s == "int8") t = PlyType::kInt8;
  else if (s == "uchar" || s == "uint8") t = PlyType::kUInt8;
  else if (s == "short" || s == "int16") t = PlyType::kInt16;
  else if (s == "ushort" || s == "uint16") t = PlyType::kUInt16;
  else if (s == "int" || s == "int32") t = PlyType::kInt32;
  else if (s == "uint" || s == "uint32") t = PlyType::kUInt32;
  else if (s == "float" || s == "float32") t = PlyType::kFloat32;
  else if (s == "double" || s == "float64") t = PlyType::kFloat64;
  else return false;
  return true;
}

inline std::size_t ply_type_size(PlyType t) {
  switch (t) {
    case PlyType::kInt8:
    case PlyType::kUInt8: return 1;
    case PlyType::kInt16:
    case PlyType::kUInt16: return 2;
    case PlyType::kInt32:
    case PlyType::kUInt32:
    case PlyType::kFloat32: return 4;
    case PlyType::kFloat64: return 8;
  }
  return 0;
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::kFloat32;
  bool is_list = false;
  PlyType count_type = PlyType::kUInt8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

class PlyValueSource {
 public:
  PlyValueSource(const std::vector<unsigned char>& bytes, std::size_t pos, bool ascii)
      : bytes_(bytes), pos_(pos), ascii_(ascii) {}

  double next(PlyType t) {
    if (ascii_) return next_ascii();
    const std::size_t n = ply_type_size(t);
    if (pos_ + n > bytes_.size())
      throw FormatError("PLY: truncated binary body, expected " + std::to_string(n) + " more bytes, got " +
                            std::to_string(bytes_.size() - pos_),
                        pos_);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    switch (t) {
      case PlyType::kInt8: return static_cast<std::int8_t>(*p);
      case PlyType::kUInt8: return *p;
      case PlyType::kInt16: return load<std::int16_t>(p);
      case PlyType::kUInt16: return load<std::uint16_t>(p);
      case PlyType::kInt32: return load<std::int32_t>(p);
      case PlyType::kUInt32: return load<std::uint32_t>(p);
      case PlyType::kFloat32: return load<float>(p);
      case PlyType::kFloat64: return load<double>(p);
    }
    return 0.0;
  }

  std::size_t position() const { return pos_; }

 private:
  template <typename T>
  static double load(const unsigned char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return static_cast<double>(v);
  }

  double next_ascii() {
    while (pos_ < bytes_.size() && std::isspace(bytes_[pos_])) ++pos_;
    if (pos_ >= bytes_.size()) throw FormatError("PLY: truncated ASCII body", pos_);
    const char* first = reinterpret_cast<const char*>(bytes_.data() + pos_);
    const char* last = reinterpret_cast<const char*>(bytes_.data() + bytes_.size());
    // Parse as float first so float32 data round-trips bit-exactly.
    const char* end = first;
    while (end < last && !std::isspace(static_cast<unsigned char>(*end))) ++end;
    const std::string tok(first, end);
    char* stop = nullptr;
    const double v = std::strtod(tok.c_str(), &stop);
    if (stop == tok.c_str() || *stop != '\0') throw FormatError("PLY: malformed number '" + tok + "'", pos_);
    pos_ += tok.size();
    return v;
  }

  const std::vector<unsigned char>& bytes_;
  std::size_t pos_;
  bool ascii_;
};

}  // namespace detail

inline TriangleMesh decode_ply(const std::vector<unsigned char>& bytes) {
  using namespace detail;
  auto read_line = [&](std::size_t& pos, std::string& line) {
    if (pos >= bytes.size()) return false;
    const std::size_t start = pos;
    while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    line.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.begin() + static_cast<std::ptrdiff_t>(pos));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (pos < bytes.size()) ++pos;
    return true;
  };

  std::size_t pos = 0;
  std::string line;
  if (!read_line(pos, line) || line != "ply") throw FormatError("PLY: bad magic, expected \"ply\"", 0);

  bool ascii = false;
  bool have_format = false;
  std::vector<PlyElement> elements;
  for (;;) {
    const std::size_t line_start = pos;
    if (!read_line(pos, line)) throw FormatError("PLY: header not terminated by end_header", pos);
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "end_header") break;
    if (kw == "comment" || kw == "obj_info" || kw.empty()) continue;
    if (kw == "format") {
      std::string f;
      ls >> f;
      if (f == "ascii") ascii = true;
      else if (f == "binary_little_endian") ascii = false;
      else throw FormatError("PLY: unsupported format '" + f + "'", line_start);
      have_format = true;
    } else if (kw == "element") {
      PlyElement e;
      long long count = -1;
      ls >> e.name >> count;
      if (e.name.empty() || count < 0) throw FormatError("PLY: malformed element line", line_start);
      e.count = static_cast<std::size_t>(count);
      elements.push_back(std::move(e));
    } else if (kw == "property") {
      if (elements.empty()) throw FormatError("PLY: property before any element", line_start);
      PlyProperty p;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string ct, it;
        ls >> ct >> it >> p.name;
        p.is_list = true;
        if (!parse_ply_type(ct, p.count_type) || !parse_ply_type(it, p.type))
          throw FormatError("PLY: unknown list types '" + ct + " " + it + "'", line_start);
      } else {
        ls >> p.name;
        if (!parse_ply_type(type, p.type)) throw FormatError("PLY: unknown property type '" + type + "'", line_start);
      }
      elements.back().props.push_back(std::move(p));
    } else {
      throw FormatError("PLY: unexpected header keyword '" + kw + "'", line_start);
    }
  }
  if (!have_format) throw FormatError("PLY: missing format line", pos);

  TriangleMesh mesh;
  PlyValueSource src(bytes, pos, ascii);
  for (const PlyElement& e : elements) {
    int ix = -1, iy = -1, iz = -1, iface = -1;
    for (std::size_t i = 0; i < e.props.size(); ++i) {
      if (e.props[i].name == "x") ix = static_cast<int>(i);
      if (e.props[i].name == "y") iy = static_cast<int>(i);
      if (e.props[i].name == "z") iz = static_cast<int>(i);
      if (e.props[i].is_list && (e.props[i].name == "vertex_indices" || e.props[i].name == "vertex_index"))
        iface = static_cast<int>(i);
    }
    const bool is_vertex = e.name == "vertex";
    const bool is_face = e.name == "face";
    if (is_vertex && (ix < 0 || iy < 0 || iz < 0)) throw FormatError("PLY: vertex element lacks x/y/z", pos);
    if (is_face && iface < 0) throw FormatError("PLY: face element lacks vertex_indices", pos);
    for (std::size_t r = 0; r < e.count; ++r) {
      Vec3 v = Vec3::Zero();
      std::vector<int> poly;
      for (std::size_t pi = 0; pi < e.props.size(); ++pi) {
        const PlyProperty& p = e.props[pi];
        if (p.is_list) {
          const double n = src.next(p.count_type);
          if (n < 0 || n > 1e6) throw FormatError("PLY: implausible list length", src.position());
          for (int q = 0; q < static_cast<int>(n); ++q) {
            const double idx = src.next(p.type);
            if (static_cast<int>(pi) == iface) poly.push_back(static_cast<int>(idx));
          }
        } else {
          double val = src.next(p.type);
          if (ascii && p.type == PlyType::kFloat32) val = static_cast<float>(val);
          if (static_cast<int>(pi) == ix) v.x() = val;
          if (static_cast<int>(pi) == iy) v.y() = val;
          if (static_cast<int>(pi) == iz) v.z() = val;
        }
      }
      if (is_vertex) mesh.vertices.push_back(v);
      if (is_face)
        for (std::size_t q = 1; q + 1 < poly.size(); ++q) mesh.triangles.push_back({poly[0], poly[q], poly[q + 1]});
    }
  }
  try {
    mesh.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("PLY: ") + e.what());
  }
  return mesh;
}

inline void save_ply(const std::string& path, const TriangleMesh& mesh, PlyFormat format = PlyFormat::kBinaryLittleEndian) {
  detail::write_file_bytes(path, encode_ply(mesh, format));
}

inline TriangleMesh load_ply(const std::string& path) { return decode_ply(detail::read_file_bytes(path)); }

}  // namespace mvsa
