#include "roadseg/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace roadseg::data {

using nlohmann::json;

const std::vector<std::string>& default_classes() {
  static const std::vector<std::string> names{"crack", "pothole", "damaged_marking", "guardrail"};
  return names;
}

// ---- manifest ----------------------------------------------------------------

namespace {

std::string record_name(std::size_t i, const std::string& path) {
  return "image " + std::to_string(i) + (path.empty() ? "" : " (" + path + ")");
}

template <class T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw SchemaError(where + ": missing \"" + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw SchemaError(where + ": \"" + key + "\" has the wrong type");
  }
}

}  // namespace

void validate(DatasetManifest& m) {
  if (m.version != 1) throw SchemaError("unsupported manifest version " + std::to_string(m.version));
  if (m.classes.empty()) throw SchemaError("manifest has no classes");
  std::set<std::string> paths;
  for (std::size_t i = 0; i < m.images.size(); ++i) {
    auto& r = m.images[i];
    const std::string where = record_name(i, r.path);
    if (r.path.empty()) throw SchemaError(where + ": empty path");
    if (!paths.insert(r.path).second) throw SchemaError(where + ": duplicate path");
    if (r.width == 0 || r.height == 0) throw SchemaError(where + ": width and height must be positive");
    if (r.orientation < 1 || r.orientation > 8)
      throw SchemaError(where + ": orientation " + std::to_string(r.orientation) + " not in 1..8");
    for (std::size_t a = 0; a < r.annotations.size(); ++a) {
      auto& ann = r.annotations[a];
      if (ann.class_id < 0 || static_cast<std::size_t>(ann.class_id) >= m.classes.size())
        throw ClassIdError(where + ", annotation " + std::to_string(a) + ": class_id " + std::to_string(ann.class_id) +
                           " with " + std::to_string(m.classes.size()) + " classes");
      if (ann.polygon.size() < 3)
        throw SchemaError(where + ", annotation " + std::to_string(a) + ": polygon needs at least 3 vertices");
      for (auto& p : ann.polygon) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y))
          throw SchemaError(where + ", annotation " + std::to_string(a) + ": non-finite vertex");
        p.x = std::clamp(p.x, 0.0, static_cast<double>(r.width));
        p.y = std::clamp(p.y, 0.0, static_cast<double>(r.height));
      }
    }
  }
}

DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("manifest is not valid JSON: ") + e.what());
  }
  DatasetManifest m;
  m.base_dir = base_dir;
  m.version = field<int>(j, "version", "manifest");
  if (j.contains("classes")) m.classes = field<std::vector<std::string>>(j, "classes", "manifest");
  const json images = j.contains("images") ? j.at("images") : json::array();
  if (!images.is_array()) throw SchemaError("manifest: \"images\" must be an array");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const json& r = images[i];
    ImageRecord rec;
    rec.path = field<std::string>(r, "path", record_name(i, ""));
    const std::string where = record_name(i, rec.path);
    const auto w = field<long long>(r, "width", where), h = field<long long>(r, "height", where);
    if (w <= 0 || h <= 0) throw SchemaError(where + ": width and height must be positive");
    rec.width = static_cast<std::size_t>(w);
    rec.height = static_cast<std::size_t>(h);
    if (r.contains("orientation")) rec.orientation = field<int>(r, "orientation", where);
    const json anns = r.contains("annotations") ? r.at("annotations") : json::array();
    if (!anns.is_array()) throw SchemaError(where + ": \"annotations\" must be an array");
    for (std::size_t a = 0; a < anns.size(); ++a) {
      const std::string aw = where + ", annotation " + std::to_string(a);
      PolygonAnnotation ann;
      ann.class_id = field<int>(anns[a], "class_id", aw);
      for (const auto& v : field<std::vector<std::vector<double>>>(anns[a], "polygon", aw)) {
        if (v.size() != 2) throw SchemaError(aw + ": vertices must be [x, y] pairs");
        ann.polygon.push_back({v[0], v[1]});
      }
      rec.annotations.push_back(std::move(ann));
    }
    m.images.push_back(std::move(rec));
  }
  validate(m);
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ManifestNotFound("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), path.parent_path());
}

std::string manifest_json(const DatasetManifest& m) {
  json images = json::array();
  for (const auto& r : m.images) {
    json anns = json::array();
    for (const auto& a : r.annotations) {
      json poly = json::array();
      for (const auto& p : a.polygon) poly.push_back({p.x, p.y});
      anns.push_back({{"class_id", a.class_id}, {"polygon", poly}});
    }
    images.push_back({{"path", r.path},
                      {"width", r.width},
                      {"height", r.height},
                      {"orientation", r.orientation},
                      {"annotations", anns}});
  }
  json j{{"version", m.version}, {"classes", m.classes}, {"images", images}};
  return j.dump(2) + "\n";
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << manifest_json(m);
  if (!out) throw DataError("failed writing manifest " + path.string());
}

// ---- image files -------------------------------------------------------------

namespace {

std::vector<char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::string& header, const std::uint8_t* data,
                 std::size_t n) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << header;
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw DataError("failed writing " + path.string());
}

// Parses "P5"/"P6" headers with comments; returns the offset of the pixel data.
std::size_t parse_pnm_header(const std::vector<char>& b, const char* magic, std::size_t& w, std::size_t& h,
                             const std::string& name) {
  if (b.size() < 2 || b[0] != magic[0] || b[1] != magic[1])
    throw DataError(name + ": not a binary " + std::string(magic, 2) + " file");
  std::size_t pos = 2;
  long vals[3];
  for (long& v : vals) {
    while (pos < b.size() && (std::isspace(static_cast<unsigned char>(b[pos])) || b[pos] == '#')) {
      if (b[pos] == '#')
        while (pos < b.size() && b[pos] != '\n') ++pos;
      else
        ++pos;
    }
    if (pos >= b.size() || !std::isdigit(static_cast<unsigned char>(b[pos]))) throw DataError(name + ": bad header");
    v = 0;
    while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
      v = v * 10 + (b[pos++] - '0');
      if (v > 1 << 20) throw DataError(name + ": header value too large");
    }
  }
  if (pos >= b.size() || !std::isspace(static_cast<unsigned char>(b[pos]))) throw DataError(name + ": bad header");
  ++pos;
  if (vals[0] <= 0 || vals[1] <= 0) throw DataError(name + ": empty image");
  if (vals[2] != 255) throw DataError(name + ": only maxval 255 is supported");
  w = static_cast<std::size_t>(vals[0]);
  h = static_cast<std::size_t>(vals[1]);
  return pos;
}

Image read_ppm_bytes(const std::vector<char>& b, const std::string& name) {
  Image img;
  const std::size_t off = parse_pnm_header(b, "P6", img.width, img.height, name);
  const std::size_t n = img.width * img.height * 3;
  if (b.size() - off < n) throw DataError(name + ": truncated pixel data");
  img.pixels.assign(b.begin() + static_cast<long>(off), b.begin() + static_cast<long>(off + n));
  return img;
}

Image read_png_file(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw DataError(path.string() + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  Image img(png.width, png.height);
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw DataError(path.string() + ": " + png.message);
  }
  return img;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), sig, 8) == 0) return read_png_file(path);
  return read_ppm_bytes(bytes, path.string());
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  write_bytes(path, "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n",
              image.pixels.data(), image.pixels.size());
}

void write_png(const std::filesystem::path& path, const Image& image) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr))
    throw DataError(path.string() + ": " + png.message);
}

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() != width * height) throw DimensionError("PGM data does not match " + std::to_string(width) + "x" +
                                                           std::to_string(height));
  write_bytes(path, "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n", bytes.data(),
              bytes.size());
}

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& width, std::size_t& height) {
  const auto b = read_bytes(path);
  const std::size_t off = parse_pnm_header(b, "P5", width, height, path.string());
  if (b.size() - off < width * height) throw DataError(path.string() + ": truncated pixel data");
  return {b.begin() + static_cast<long>(off), b.begin() + static_cast<long>(off + width * height)};
}

void write_label_map(const std::filesystem::path& path, const LabelMap& labels) {
  write_pgm(path, labels.width, labels.height, labels.labels);
}

LabelMap read_label_map(const std::filesystem::path& path) {
  LabelMap m;
  m.labels = read_pgm(path, m.width, m.height);
  return m;
}

Tensor to_tensor(const Image& image) {
  const std::size_t hw = image.width * image.height;
  Tensor t({3, image.height, image.width});
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) t[c * hw + i] = image.pixels[i * 3 + c] / 255.0;
  return t;
}

Image from_tensor(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw DimensionError("expected a [3, H, W] tensor, got " + shape_str(t.shape()));
  Image img(t.dim(2), t.dim(1));
  const std::size_t hw = img.width * img.height;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(t[c * hw + i], 0.0, 1.0) * 255.0));
  return img;
}

// ---- rasterization -------------------------------------------------------------

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

bool point_in_polygon(const std::vector<Point>& poly, Point p) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[j];
    const Point& b = poly[i];
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (p.x < x) inside = !inside;
    }
  }
  return inside;
}

BinaryMask rasterize_polygon(const std::vector<Point>& poly, std::size_t height, std::size_t width) {
  if (poly.size() < 3) throw ArgumentError("polygon needs at least 3 vertices, got " + std::to_string(poly.size()));
  BinaryMask m{height, width, std::vector<std::uint8_t>(height * width, 0)};
  std::vector<double> xs;
  for (std::size_t y = 0; y < height; ++y) {
    const double yc = static_cast<double>(y) + 0.5;
    xs.clear();
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
      const Point& a = poly[j];
      const Point& b = poly[i];
      if ((a.y > yc) != (b.y > yc)) xs.push_back(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(xs.begin(), xs.end());
    // Centre x + 0.5 is inside when an odd number of crossings lie strictly right of it.
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      auto first = [&](double edge) {
        long x = std::max(0L, static_cast<long>(std::floor(edge)) - 1);
        while (static_cast<double>(x) + 0.5 < edge) ++x;
        return x;
      };
      const long lo = first(xs[k]);
      const long hi = std::min(static_cast<long>(width), first(xs[k + 1]));
      for (long x = lo; x < hi; ++x) m.bits[y * width + static_cast<std::size_t>(x)] = 1;
    }
  }
  return m;
}

LabelMap label_map(const ImageRecord& record) {
  LabelMap out(record.height, record.width);
  for (const auto& a : record.annotations) {
    const auto m = rasterize_polygon(a.polygon, record.height, record.width);
    for (std::size_t i = 0; i < m.bits.size(); ++i)
      if (m.bits[i]) out.labels[i] = static_cast<std::uint8_t>(a.class_id);
  }
  return out;
}

// ---- split -------------------------------------------------------------------

Split split_dataset(const DatasetManifest& manifest, std::array<double, 3> ratios, std::uint64_t seed) {
  for (double r : ratios)
    if (!(r >= 0)) throw ArgumentError("split ratios must be non-negative");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ArgumentError("split ratios must sum to 1");
  const std::size_t n = manifest.images.size();
  auto take = [&](double r) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9)); };
  const std::size_t nv = take(ratios[1]), nt = take(ratios[2]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  shuffle(order, rng);

  Split s{manifest, manifest, manifest};
  for (auto* part : {&s.train, &s.valid, &s.test}) part->images.clear();
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < nv ? s.valid : i < nv + nt ? s.test : s.train;
    dst.images.push_back(manifest.images[order[i]]);
  }
  return s;
}

// ---- samples -----------------------------------------------------------------

Sample load_sample(const DatasetManifest& manifest, const ImageRecord& record) {
  Sample s{read_image(manifest.base_dir / record.path), record};
  if (s.image.width != record.width || s.image.height != record.height)
    throw DataError(record.path + ": image is " + std::to_string(s.image.width) + "x" +
                    std::to_string(s.image.height) + ", manifest says " + std::to_string(record.width) + "x" +
                    std::to_string(record.height));
  return s;
}

Image resize_bilinear(const Image& src, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw ArgumentError("resize target must be positive");
  if (src.width == width && src.height == height) return src;
  Image out(width, height);
  const double sx = static_cast<double>(src.width) / static_cast<double>(width);
  const double sy = static_cast<double>(src.height) / static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        const double bottom = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(top * (1 - wy) + bottom * wy, 0.0, 255.0)));
      }
    }
  }
  return out;
}

Sample resize_with_annotations(const Sample& sample, std::size_t width, std::size_t height) {
  Sample out{resize_bilinear(sample.image, width, height), sample.record};
  const double fx = static_cast<double>(width) / static_cast<double>(sample.image.width);
  const double fy = static_cast<double>(height) / static_cast<double>(sample.image.height);
  out.record.width = width;
  out.record.height = height;
  if (fx != 1.0 || fy != 1.0)
    for (auto& a : out.record.annotations)
      for (auto& p : a.polygon) p = {p.x * fx, p.y * fy};
  return out;
}

Sample auto_orient(const Sample& s) {
  const int tag = s.record.orientation;
  if (tag < 1 || tag > 8) throw ArgumentError("unknown orientation tag " + std::to_string(tag));
  if (tag == 1) return s;
  const std::size_t w = s.image.width, h = s.image.height;
  const bool swap = tag >= 5;
  Sample out{Image(swap ? h : w, swap ? w : h), s.record};
  const double W = static_cast<double>(w), H = static_cast<double>(h);
  auto map_point = [&](Point p) -> Point {
    switch (tag) {
      case 2: return {W - p.x, p.y};
      case 3: return {W - p.x, H - p.y};
      case 4: return {p.x, H - p.y};
      case 5: return {p.y, p.x};
      case 6: return {H - p.y, p.x};
      case 7: return {H - p.y, W - p.x};
      default: return {p.y, W - p.x};
    }
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t nx = x, ny = y;
      switch (tag) {
        case 2: nx = w - 1 - x; break;
        case 3: nx = w - 1 - x; ny = h - 1 - y; break;
        case 4: ny = h - 1 - y; break;
        case 5: nx = y; ny = x; break;
        case 6: nx = h - 1 - y; ny = x; break;
        case 7: nx = h - 1 - y; ny = w - 1 - x; break;
        default: nx = y; ny = w - 1 - x; break;
      }
      for (std::size_t c = 0; c < 3; ++c) out.image.at(ny, nx, c) = s.image.at(y, x, c);
    }
  for (auto& a : out.record.annotations)
    for (auto& p : a.polygon) p = map_point(p);
  out.record.width = out.image.width;
  out.record.height = out.image.height;
  out.record.orientation = 1;
  return out;
}

double polygon_area(const std::vector<Point>& poly) {
  double a = 0;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) a += poly[j].x * poly[i].y - poly[i].x * poly[j].y;
  return std::abs(a) / 2;
}

std::vector<Point> clip_polygon(const std::vector<Point>& poly, double x0, double y0, double x1, double y1) {
  std::vector<Point> out = poly;
  // Each clip edge: inside test and intersection with the boundary line.
  auto clip = [&](auto inside, auto cross) {
    if (out.empty()) return;
    std::vector<Point> in = std::move(out);
    out.clear();
    Point prev = in.back();
    for (const Point& cur : in) {
      if (inside(cur)) {
        if (!inside(prev)) out.push_back(cross(prev, cur));
        out.push_back(cur);
      } else if (inside(prev)) {
        out.push_back(cross(prev, cur));
      }
      prev = cur;
    }
  };
  auto at_x = [](double x) {
    return [x](Point a, Point b) { return Point{x, a.y + (x - a.x) * (b.y - a.y) / (b.x - a.x)}; };
  };
  auto at_y = [](double y) {
    return [y](Point a, Point b) { return Point{a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y), y}; };
  };
  clip([=](Point p) { return p.x >= x0; }, at_x(x0));
  clip([=](Point p) { return p.x <= x1; }, at_x(x1));
  clip([=](Point p) { return p.y >= y0; }, at_y(y0));
  clip([=](Point p) { return p.y <= y1; }, at_y(y1));
  return out;
}

Sample augment_crop_zoom(const Sample& s, double zoom, Rng& rng) {
  if (!(zoom >= 0 && zoom <= 0.2)) throw ArgumentError("zoom must be in [0, 0.2]");
  const std::size_t w = s.image.width, h = s.image.height;
  const auto cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround((1 - zoom) * static_cast<double>(w))));
  const auto ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround((1 - zoom) * static_cast<double>(h))));
  const auto x0 = static_cast<std::size_t>(uniform_index(rng, w - cw + 1));
  const auto y0 = static_cast<std::size_t>(uniform_index(rng, h - ch + 1));
  if (zoom == 0) return s;

  Image crop(cw, ch);
  for (std::size_t y = 0; y < ch; ++y)
    std::copy_n(&s.image.pixels[((y0 + y) * w + x0) * 3], cw * 3, &crop.pixels[y * cw * 3]);
  Sample out{resize_bilinear(crop, w, h), s.record};
  out.record.annotations.clear();
  const double fx = static_cast<double>(w) / static_cast<double>(cw);
  const double fy = static_cast<double>(h) / static_cast<double>(ch);
  const double X0 = static_cast<double>(x0), Y0 = static_cast<double>(y0);
  for (const auto& a : s.record.annotations) {
    auto poly = clip_polygon(a.polygon, X0, Y0, X0 + static_cast<double>(cw), Y0 + static_cast<double>(ch));
    if (poly.size() < 3 || polygon_area(poly) <= 1e-9) continue;
    for (auto& p : poly) p = {(p.x - X0) * fx, (p.y - Y0) * fy};
    out.record.annotations.push_back({a.class_id, std::move(poly)});
  }
  return out;
}

namespace {

void check_delta(double d) {
  if (!(d >= -0.25 && d <= 0.25)) throw ArgumentError("delta must be in [-0.25, 0.25]");
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

}  // namespace

Sample augment_brightness(const Sample& s, double delta) {
  check_delta(delta);
  Sample out = s;
  for (auto& p : out.image.pixels) p = to_byte(p * (1 + delta));
  return out;
}

Sample augment_saturation(const Sample& s, double delta) {
  check_delta(delta);
  Sample out = s;
  for (std::size_t i = 0; i < out.image.pixels.size(); i += 3) {
    std::uint8_t* px = &out.image.pixels[i];
    const double luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
    for (int c = 0; c < 3; ++c) px[c] = to_byte(luma + (px[c] - luma) * (1 + delta));
  }
  return out;
}

// ---- statistics --------------------------------------------------------------

std::vector<std::size_t> class_histogram(const DatasetManifest& manifest) {
  std::vector<std::size_t> counts(manifest.classes.size(), 0);
  for (const auto& r : manifest.images)
    for (const auto& a : r.annotations) ++counts.at(static_cast<std::size_t>(a.class_id));
  return counts;
}

namespace {

struct Overlap {
  std::size_t cell;
  double weight;
};

// For each source pixel, the grid cells it overlaps and the overlap length.
std::vector<std::vector<Overlap>> axis_overlaps(std::size_t pixels, std::size_t cells) {
  std::vector<std::vector<Overlap>> out(pixels);
  const double cell = static_cast<double>(pixels) / static_cast<double>(cells);
  for (std::size_t p = 0; p < pixels; ++p) {
    const double lo = static_cast<double>(p), hi = lo + 1;
    auto c = static_cast<std::size_t>(std::floor(lo / cell));
    for (; c < cells; ++c) {
      const double cl = static_cast<double>(c) * cell, cr = cl + cell;
      if (cl >= hi) break;
      const double len = std::min(hi, cr) - std::max(lo, cl);
      if (len > 0) out[p].push_back({c, len / cell});
    }
  }
  return out;
}

}  // namespace

std::vector<double> annotation_heatmap(const DatasetManifest& manifest, int class_id, std::size_t grid_h,
                                       std::size_t grid_w, bool normalize) {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= manifest.classes.size())
    throw ArgumentError("class id " + std::to_string(class_id) + " outside the manifest classes");
  if (grid_h == 0 || grid_w == 0) throw ArgumentError("heatmap grid must be non-empty");
  std::vector<double> grid(grid_h * grid_w, 0.0);
  for (const auto& r : manifest.images) {
    std::vector<std::uint32_t> sum;
    for (const auto& a : r.annotations) {
      if (a.class_id != class_id) continue;
      const auto m = rasterize_polygon(a.polygon, r.height, r.width);
      if (sum.empty()) sum.assign(m.bits.size(), 0);
      for (std::size_t i = 0; i < m.bits.size(); ++i) sum[i] += m.bits[i];
    }
    if (sum.empty()) continue;
    const auto ox = axis_overlaps(r.width, grid_w), oy = axis_overlaps(r.height, grid_h);
    std::vector<double> rows(grid_w);
    for (std::size_t y = 0; y < r.height; ++y) {
      std::fill(rows.begin(), rows.end(), 0.0);
      bool any = false;
      for (std::size_t x = 0; x < r.width; ++x) {
        const auto v = sum[y * r.width + x];
        if (!v) continue;
        any = true;
        for (const auto& o : ox[x]) rows[o.cell] += v * o.weight;
      }
      if (!any) continue;
      for (const auto& o : oy[y])
        for (std::size_t c = 0; c < grid_w; ++c) grid[o.cell * grid_w + c] += rows[c] * o.weight;
    }
  }
  if (normalize) {
    const double mx = *std::max_element(grid.begin(), grid.end());
    if (mx > 0)
      for (auto& v : grid) v /= mx;
  }
  return grid;
}

// ---- synthetic data ------------------------------------------------------------

namespace {

constexpr std::uint8_t kClassColors[4][3] = {{35, 35, 35}, {95, 60, 30}, {230, 225, 185}, {120, 150, 200}};

std::vector<Point> synthetic_shape(int cls, double w, double h, Rng& rng) {
  const double s = std::min(w, h);
  switch (cls) {
    case 0: {  // thin slanted ribbon
      const double cx = uniform(rng, 0.3, 0.7) * w, cy = uniform(rng, 0.3, 0.7) * h;
      const double ang = uniform(rng, 0, std::numbers::pi), len = uniform(rng, 0.5, 0.8) * s / 2;
      const double half = std::max(1.0, 0.05 * s);
      const double dx = std::cos(ang), dy = std::sin(ang);
      return {{cx - dx * len - dy * half, cy - dy * len + dx * half},
              {cx + dx * len - dy * half, cy + dy * len + dx * half},
              {cx + dx * len + dy * half, cy + dy * len - dx * half},
              {cx - dx * len + dy * half, cy - dy * len - dx * half}};
    }
    case 1: {  // irregular blob
      const double r = uniform(rng, 0.14, 0.22) * s;
      const double cx = uniform(rng, r, w - r), cy = uniform(rng, r, h - r);
      std::vector<Point> p;
      for (int k = 0; k < 8; ++k) {
        const double a = 2 * std::numbers::pi * k / 8, rr = r * uniform(rng, 0.75, 1.0);
        p.push_back({cx + rr * std::cos(a), cy + rr * std::sin(a)});
      }
      return p;
    }
    case 2: {  // lane marking segment
      const double mw = 0.12 * w, mh = uniform(rng, 0.3, 0.6) * h;
      const double x = uniform(rng, 0, w - mw), y = uniform(rng, 0, h - mh);
      return {{x, y}, {x + mw, y}, {x + mw, y + mh}, {x, y + mh}};
    }
    default: {  // guardrail band along the top or bottom edge
      const double bh = uniform(rng, 0.14, 0.2) * h;
      const double y = uniform01(rng) < 0.5 ? 0.0 : h - bh;
      return {{0, y}, {w, y}, {w, y + bh}, {0, y + bh}};
    }
  }
}

}  // namespace

SyntheticDataset make_synthetic(std::size_t count, std::size_t width, std::size_t height, std::uint64_t seed) {
  if (width < 8 || height < 8) throw ArgumentError("synthetic images must be at least 8x8");
  SyntheticDataset ds;
  Rng rng(seed);
  const double W = static_cast<double>(width), H = static_cast<double>(height);
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%04zu.ppm", i);
    ImageRecord rec{name, width, height, 1, {}};
    Image img(width, height);
    const auto base = static_cast<int>(90 + uniform_index(rng, 21));
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(base + static_cast<int>(uniform_index(rng, 17)) - 8);
    const std::size_t shapes = 1 + uniform_index(rng, 3);
    for (std::size_t k = 0; k < shapes; ++k) {
      const int cls = static_cast<int>(uniform_index(rng, 4));
      auto poly = synthetic_shape(cls, W, H, rng);
      for (auto& p : poly) p = {std::clamp(p.x, 0.0, W), std::clamp(p.y, 0.0, H)};
      const auto mask = rasterize_polygon(poly, height, width);
      for (std::size_t px = 0; px < mask.bits.size(); ++px) {
        if (!mask.bits[px]) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          const int v = kClassColors[cls][c] + static_cast<int>(uniform_index(rng, 21)) - 10;
          img.pixels[px * 3 + c] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
        }
      }
      rec.annotations.push_back({cls, std::move(poly)});
    }
    ds.manifest.images.push_back(std::move(rec));
    ds.images.push_back(std::move(img));
  }
  return ds;
}

void write_synthetic(const SyntheticDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < ds.images.size(); ++i) write_ppm(dir / ds.manifest.images[i].path, ds.images[i]);
  save_manifest(dir / "manifest.json", ds.manifest);
}

}  // namespace roadseg::data
