#pragma once

// Dataset manifests, image files, polygon rasterization, splitting,
// augmentation and dataset statistics.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "roadseg/error.hpp"
#include "roadseg/label_map.hpp"
#include "roadseg/random.hpp"
#include "roadseg/tensor.hpp"

namespace roadseg::data {

const std::vector<std::string>& default_classes();

struct Point {
  double x = 0, y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

struct PolygonAnnotation {
  int class_id = 0;
  std::vector<Point> polygon;
  friend bool operator==(const PolygonAnnotation&, const PolygonAnnotation&) = default;
};

struct ImageRecord {
  std::string path;
  std::size_t width = 0;
  std::size_t height = 0;
  /// EXIF orientation tag, 1..8.
  int orientation = 1;
  std::vector<PolygonAnnotation> annotations;
  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct DatasetManifest {
  int version = 1;
  std::vector<std::string> classes = default_classes();
  std::vector<ImageRecord> images;
  /// Directory image paths are relative to; not serialized.
  std::filesystem::path base_dir;

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.version == b.version && a.classes == b.classes && a.images == b.images;
  }
};

class ManifestError : public DataError {
 public:
  using DataError::DataError;
};
class ManifestNotFound : public ManifestError {
 public:
  using ManifestError::ManifestError;
};
class SchemaError : public ManifestError {
 public:
  using ManifestError::ManifestError;
};
class ClassIdError : public ManifestError {
 public:
  using ManifestError::ManifestError;
};

/// Checks class ids, orientation tags, vertex counts, positive sizes and
/// unique paths; clamps vertices into the image bounds.
void validate(DatasetManifest& manifest);
DatasetManifest parse_manifest(const std::string& json, const std::filesystem::path& base_dir = {});
DatasetManifest load_manifest(const std::filesystem::path& path);
std::string manifest_json(const DatasetManifest& manifest);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// ---- images ----------------------------------------------------------------

/// 8-bit RGB, row-major, interleaved.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h * 3, fill) {}
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Reads PNG or binary PPM (P6), chosen by file signature.
Image read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);
void write_png(const std::filesystem::path& path, const Image& image);
/// Binary PGM (P5), maxval 255.
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& width, std::size_t& height);
void write_label_map(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_label_map(const std::filesystem::path& path);

/// [3, H, W] in [0, 1].
Tensor to_tensor(const Image& image);
/// Rounds and clamps a [3, H, W] tensor in [0, 1] to bytes.
Image from_tensor(const Tensor& t);

// ---- rasterization ---------------------------------------------------------

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;
  std::size_t count() const;
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// Even-odd rule: pixel (x, y) is set when (x + 0.5, y + 0.5) is inside.
/// Throws ArgumentError for fewer than 3 vertices.
BinaryMask rasterize_polygon(const std::vector<Point>& polygon, std::size_t height, std::size_t width);
/// Even-odd point-in-polygon test.
bool point_in_polygon(const std::vector<Point>& polygon, Point p);
/// Annotations painted in order (later ones win), background elsewhere.
LabelMap label_map(const ImageRecord& record);

// ---- split -----------------------------------------------------------------

struct Split {
  DatasetManifest train, valid, test;
};

/// Seeded shuffle, then floor(n * ratio) for valid and test and the rest for
/// train. Ratios must be non-negative and sum to 1.
Split split_dataset(const DatasetManifest& manifest, std::array<double, 3> ratios = {0.85, 0.10, 0.05},
                    std::uint64_t seed = 42);

// ---- samples and augmentation ----------------------------------------------

struct Sample {
  Image image;
  ImageRecord record;
};

/// Reads the record's image relative to the manifest directory; the size must
/// match the record.
Sample load_sample(const DatasetManifest& manifest, const ImageRecord& record);

/// Bilinear resize (pixel centers aligned) with vertices scaled by the same factors.
Sample resize_with_annotations(const Sample& sample, std::size_t width = 640, std::size_t height = 640);
Image resize_bilinear(const Image& image, std::size_t width, std::size_t height);

/// Transforms pixels and vertices to orientation 1. Vertices map as continuous
/// coordinates, e.g. tag 6 sends (x, y) to (H - y, x).
Sample auto_orient(const Sample& sample);

/// Crops a random window of side fraction (1 - zoom) and resizes it back.
/// Polygons are clipped to the window; empty ones are dropped. zoom in [0, 0.2].
Sample augment_crop_zoom(const Sample& sample, double zoom, Rng& rng);
/// pixel * (1 + delta), rounded and clamped. delta in [-0.25, 0.25].
Sample augment_brightness(const Sample& sample, double delta);
/// Scales chroma around BT.601 luma by (1 + delta). delta in [-0.25, 0.25].
Sample augment_saturation(const Sample& sample, double delta);

/// Sutherland-Hodgman clip of a polygon to an axis-aligned rectangle.
std::vector<Point> clip_polygon(const std::vector<Point>& polygon, double x0, double y0, double x1, double y1);
double polygon_area(const std::vector<Point>& polygon);

// ---- statistics ------------------------------------------------------------

/// Annotation instances per class.
std::vector<std::size_t> class_histogram(const DatasetManifest& manifest);

/// Sum of rasterized masks of one class, area-averaged onto a grid (row-major,
/// grid_h x grid_w) and divided by its maximum (all-zero stays zero).
std::vector<double> annotation_heatmap(const DatasetManifest& manifest, int class_id, std::size_t grid_h = 64,
                                       std::size_t grid_w = 64, bool normalize = true);

// ---- synthetic data --------------------------------------------------------

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<Image> images;
};

/// Road-like scenes on a noisy asphalt background with 1-3 polygons each,
/// one colour per class. Paths are "img_0000.ppm", ...
SyntheticDataset make_synthetic(std::size_t count, std::size_t width, std::size_t height, std::uint64_t seed);
/// Writes the images and manifest.json into dir.
void write_synthetic(const SyntheticDataset& ds, const std::filesystem::path& dir);

}  // namespace roadseg::data
