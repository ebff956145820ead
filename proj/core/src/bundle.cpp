#include "layercake/bundle.hpp"

#include "json.hpp"

#include "layercake/png_io.hpp"
#include "layercake/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

namespace layercake {
namespace {

using nlohmann::json;

// Tolerance for composite-vs-flatten checks on documents that passed through
// 8-bit PNG quantization (a few stacked over() applications of +-1/510).
constexpr float kQuantizedCompositeTol = 0.02f;

constexpr int kManifestSchemaVersion = 1;

struct NamedColor {
  const char* name;
  float r, g, b;
};

constexpr NamedColor kPalette[] = {
    {"red", 0.85f, 0.16f, 0.16f},    {"blue", 0.20f, 0.36f, 0.86f},
    {"green", 0.16f, 0.66f, 0.30f},  {"yellow", 0.94f, 0.84f, 0.22f},
    {"purple", 0.58f, 0.26f, 0.70f}, {"orange", 0.94f, 0.56f, 0.16f},
    {"teal", 0.12f, 0.64f, 0.64f},   {"pink", 0.94f, 0.56f, 0.70f},
};
constexpr int kPaletteSize = static_cast<int>(std::size(kPalette));

constexpr const char* kShapeNames[] = {"disk", "rectangle", "ring"};
constexpr const char* kPositionNames[] = {"left", "center", "right"};

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

}  // namespace

std::string to_string(LayerRole role) {
  switch (role) {
    case LayerRole::text: return "text";
    case LayerRole::foreground: return "foreground";
    case LayerRole::midground: return "midground";
    case LayerRole::background: return "background";
  }
  throw std::logic_error("unreachable layer role");
}

LayerRole layer_role_from_string(const std::string& s) {
  if (s == "text") return LayerRole::text;
  if (s == "foreground") return LayerRole::foreground;
  if (s == "midground") return LayerRole::midground;
  if (s == "background") return LayerRole::background;
  throw std::runtime_error("unknown layer role: " + s);
}

std::string to_string(TripletTask task) {
  switch (task) {
    case TripletTask::text_extract: return "text_extract";
    case TripletTask::text_erase: return "text_erase";
    case TripletTask::fg_extract: return "fg_extract";
    case TripletTask::fg_erase: return "fg_erase";
  }
  throw std::logic_error("unreachable triplet task");
}

BBox tight_bbox(const RgbaImage& img, float alpha_threshold) {
  int minx = img.width, miny = img.height, maxx = -1, maxy = -1;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (img.at(x, y)[3] > alpha_threshold) {
        minx = std::min(minx, x);
        miny = std::min(miny, y);
        maxx = std::max(maxx, x);
        maxy = std::max(maxy, y);
      }
    }
  }
  if (maxx < 0) return {0, 0, 0, 0};
  return {minx, miny, maxx - minx + 1, maxy - miny + 1};
}

void validate_document(const LayerDocument& doc, float composite_tol) {
  if (doc.width <= 0 || doc.height <= 0) {
    throw std::runtime_error("document: non-positive dimensions");
  }
  if (doc.layers.empty()) throw std::runtime_error("document: no layers");

  int backgrounds = 0;
  for (std::size_t i = 0; i < doc.layers.size(); ++i) {
    const LayerRecord& l = doc.layers[i];
    if (l.z_order != static_cast<int>(i)) {
      throw std::runtime_error(
          "document: z_order values must be unique and contiguous from 0 "
          "(layer " + std::to_string(i) + " has z_order " +
          std::to_string(l.z_order) + ")");
    }
    if (l.image.width != doc.width || l.image.height != doc.height) {
      throw std::runtime_error("document: layer " + std::to_string(i) +
                               " size differs from document size");
    }
    if (l.bbox.x < 0 || l.bbox.y < 0 || l.bbox.w < 0 || l.bbox.h < 0 ||
        l.bbox.x + l.bbox.w > doc.width || l.bbox.y + l.bbox.h > doc.height) {
      throw std::runtime_error("document: layer " + std::to_string(i) +
                               " bbox outside document bounds");
    }
    if (l.role == LayerRole::background) {
      ++backgrounds;
      if (l.z_order != 0) {
        throw std::runtime_error("document: background layer must have z_order 0");
      }
    }
  }
  if (backgrounds != 1) {
    throw std::runtime_error("document: expected exactly one background layer, found " +
                             std::to_string(backgrounds));
  }

  if (doc.prompt.poster.empty() || doc.prompt.foreground.empty() ||
      doc.prompt.midground.empty() || doc.prompt.background.empty()) {
    throw std::runtime_error("document: all four prompt fields must be non-empty");
  }

  if (doc.composite.width != doc.width || doc.composite.height != doc.height) {
    throw std::runtime_error("document: composite size differs from document size");
  }
  std::vector<RgbaImage> visible;
  for (const LayerRecord& l : doc.layers) {
    if (l.visible) visible.push_back(l.image);
  }
  if (visible.empty()) throw std::runtime_error("document: no visible layers");
  const RgbaImage flat = flatten(visible);
  for (std::size_t i = 0; i < flat.px.size(); ++i) {
    if (std::fabs(flat.px[i] - doc.composite.px[i]) > composite_tol) {
      throw std::runtime_error(
          "document: composite does not match flatten(visible layers) "
          "(channel deviation " +
          std::to_string(std::fabs(flat.px[i] - doc.composite.px[i])) + ")");
    }
  }
}

// ------------------------------------------------------------- generator

namespace {

struct ShapeParams {
  int shape = 0;     // 0 disk, 1 rectangle, 2 ring
  int color = 0;
  int position = 0;  // 0 left, 1 center, 2 right
  float cx = 0, cy = 0;
  float radius = 0;        // disk/ring
  float hx = 0, hy = 0;    // rectangle half extents
  float thickness = 0;     // ring band width
  float opacity = 1;
  float edge = 1;          // soft-edge width in px
};

ShapeParams sample_shape(Rng rng, int size) {
  ShapeParams p;
  const float s = static_cast<float>(size);
  p.shape = rng.uniform_int(0, 2);
  p.color = rng.uniform_int(0, kPaletteSize - 1);
  p.position = rng.uniform_int(0, 2);
  const float base_cx[3] = {0.30f, 0.50f, 0.70f};
  p.cx = s * (base_cx[p.position] + static_cast<float>(rng.uniform(-0.05, 0.05)));
  p.cy = s * static_cast<float>(rng.uniform(0.35, 0.65));
  p.radius = s * static_cast<float>(rng.uniform(0.14, 0.26));
  p.hx = s * static_cast<float>(rng.uniform(0.12, 0.22));
  p.hy = s * static_cast<float>(rng.uniform(0.12, 0.22));
  p.thickness = p.radius * static_cast<float>(rng.uniform(0.30, 0.50));
  p.opacity = static_cast<float>(rng.uniform(0.80, 1.00));
  p.edge = static_cast<float>(rng.uniform(1.0, 1.8));
  return p;
}

float shape_sdf(const ShapeParams& p, float x, float y) {
  const float dx = x - p.cx, dy = y - p.cy;
  switch (p.shape) {
    case 0:
      return std::sqrt(dx * dx + dy * dy) - p.radius;
    case 1: {
      const float qx = std::fabs(dx) - p.hx;
      const float qy = std::fabs(dy) - p.hy;
      const float ox = std::max(qx, 0.0f), oy = std::max(qy, 0.0f);
      return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0f);
    }
    default:
      return std::fabs(std::sqrt(dx * dx + dy * dy) - p.radius) - 0.5f * p.thickness;
  }
}

RgbaImage draw_shape(const ShapeParams& p, int size) {
  RgbaImage img(size, size);
  const NamedColor& c = kPalette[p.color];
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const float d = shape_sdf(p, static_cast<float>(x) + 0.5f,
                                static_cast<float>(y) + 0.5f);
      const float a = clamp01(0.5f - d / p.edge) * p.opacity;
      if (a <= 0.0f) continue;
      float* px = img.at(x, y);
      px[0] = c.r;
      px[1] = c.g;
      px[2] = c.b;
      px[3] = a;
    }
  }
  return img;
}

std::string shape_desc(const ShapeParams& p) {
  return std::string("a ") + kPalette[p.color].name + " " + kShapeNames[p.shape] +
         " on the " + kPositionNames[p.position];
}

struct BackgroundParams {
  int style = 0;  // 0 gradient, 1 split
  int c1 = 0, c2 = 1;
  int dir = 0;  // gradient only: 0 vertical, 1 horizontal
};

BackgroundParams sample_background(Rng rng) {
  BackgroundParams p;
  p.style = rng.uniform_int(0, 1);
  p.c1 = rng.uniform_int(0, kPaletteSize - 1);
  p.c2 = rng.uniform_int(0, kPaletteSize - 2);
  if (p.c2 >= p.c1) ++p.c2;  // distinct second color
  p.dir = rng.uniform_int(0, 1);
  return p;
}

RgbaImage draw_background(const BackgroundParams& p, int size) {
  RgbaImage img(size, size);
  const NamedColor& a = kPalette[p.c1];
  const NamedColor& b = kPalette[p.c2];
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      float t;
      if (p.style == 0) {
        const int coord = (p.dir == 0) ? y : x;
        t = static_cast<float>(coord) / static_cast<float>(size - 1);
      } else {
        t = (x < size / 2) ? 0.0f : 1.0f;
      }
      float* px = img.at(x, y);
      px[0] = (1 - t) * a.r + t * b.r;
      px[1] = (1 - t) * a.g + t * b.g;
      px[2] = (1 - t) * a.b + t * b.b;
      px[3] = 1.0f;
    }
  }
  return img;
}

std::string background_desc(const BackgroundParams& p) {
  const std::string c1 = kPalette[p.c1].name, c2 = kPalette[p.c2].name;
  if (p.style == 0) {
    return "a " + c1 + " to " + c2 + (p.dir == 0 ? " vertical" : " horizontal") +
           " gradient background";
  }
  return "a " + c1 + " and " + c2 + " split background";
}

RgbaImage draw_text_marks(Rng rng, int size) {
  RgbaImage img(size, size);
  const float s = static_cast<float>(size);
  const int bars = rng.uniform_int(3, 5);
  const float bar_w = std::max(1.0f, s / 24.0f);
  const float gap = bar_w;
  const float total_w = static_cast<float>(bars) * bar_w +
                        static_cast<float>(bars - 1) * gap;
  const float x0 = 0.5f * (s - total_w) +
                   s * static_cast<float>(rng.uniform(-0.08, 0.08));
  const float baseline = (rng.uniform() < 0.5) ? s * 0.18f : s * 0.85f;
  const bool dark = rng.uniform() < 0.5;
  const float shade = dark ? 0.05f : 0.98f;

  for (int k = 0; k < bars; ++k) {
    ShapeParams bar;
    bar.shape = 1;
    bar.cx = x0 + (bar_w + gap) * static_cast<float>(k) + 0.5f * bar_w;
    bar.hx = 0.5f * bar_w;
    bar.hy = 0.5f * s * static_cast<float>(rng.uniform(0.06, 0.12));
    bar.cy = baseline - bar.hy;
    bar.edge = 0.75f;
    bar.opacity = 1.0f;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const float d = shape_sdf(bar, static_cast<float>(x) + 0.5f,
                                  static_cast<float>(y) + 0.5f);
        const float a = clamp01(0.5f - d / bar.edge);
        if (a <= 0.0f) continue;
        float* px = img.at(x, y);
        px[0] = shade;
        px[1] = shade;
        px[2] = shade;
        px[3] = std::max(px[3], a);
      }
    }
  }
  return img;
}

}  // namespace

LayerDocument synth_poster(std::uint64_t seed, int size) {
  if (size < 16 || size % 2 != 0) {
    throw std::invalid_argument("synth_poster: size must be even and >= 16, got " +
                                std::to_string(size));
  }
  Rng root(seed);
  Rng plan = root.derive("plan");
  const int n_shapes = 1 + (plan.uniform() < 0.5 ? 1 : 0);
  const bool has_text = plan.uniform() < 0.5;

  const BackgroundParams bg = sample_background(root.derive("background"));
  const ShapeParams fg = sample_shape(root.derive("foreground"), size);
  const ShapeParams mid = sample_shape(root.derive("midground"), size);

  LayerDocument doc;
  doc.width = size;
  doc.height = size;

  auto push_layer = [&doc](LayerRole role, RgbaImage img) {
    LayerRecord rec;
    rec.role = role;
    rec.bbox = tight_bbox(img);
    rec.image = std::move(img);
    rec.visible = true;
    rec.z_order = static_cast<int>(doc.layers.size());
    doc.layers.push_back(std::move(rec));
  };

  push_layer(LayerRole::background, draw_background(bg, size));
  if (n_shapes == 2) push_layer(LayerRole::midground, draw_shape(mid, size));
  push_layer(LayerRole::foreground, draw_shape(fg, size));
  if (has_text) push_layer(LayerRole::text, draw_text_marks(root.derive("text"), size));

  std::vector<RgbaImage> images;
  for (const LayerRecord& l : doc.layers) images.push_back(l.image);
  doc.composite = flatten(images);

  doc.prompt.foreground = shape_desc(fg);
  doc.prompt.midground =
      (n_shapes == 2) ? shape_desc(mid) : std::string("empty midground layer");
  doc.prompt.background = background_desc(bg);
  doc.prompt.poster = "a poster of " + doc.prompt.foreground + " over " +
                      doc.prompt.background +
                      (has_text ? " with title marks" : "");
  return doc;
}

const std::vector<std::string>& prompt_vocabulary() {
  static const std::vector<std::string> vocab = [] {
    std::set<std::string> words = {"a",        "poster",   "of",    "on",
                                   "the",      "over",     "to",    "and",
                                   "with",     "title",    "marks", "empty",
                                   "midground", "layer",   "gradient",
                                   "split",    "background", "vertical",
                                   "horizontal"};
    for (const NamedColor& c : kPalette) words.insert(c.name);
    for (const char* s : kShapeNames) words.insert(s);
    for (const char* s : kPositionNames) words.insert(s);
    return std::vector<std::string>(words.begin(), words.end());
  }();
  return vocab;
}

// ------------------------------------------------------------- bundle I/O

namespace {

std::string layer_filename(int z_order) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "layer_%02d.png", z_order);
  return buf;
}

void require_exact_keys(const json& j, const std::set<std::string>& keys,
                        const std::string& context) {
  for (const auto& item : j.items()) {
    if (!keys.count(item.key())) {
      throw std::runtime_error("bundle: unknown key \"" + item.key() + "\" in " +
                               context);
    }
  }
  for (const std::string& k : keys) {
    if (!j.contains(k)) {
      throw std::runtime_error("bundle: missing key \"" + k + "\" in " + context);
    }
  }
}

}  // namespace

void save_bundle(const LayerDocument& doc, const std::filesystem::path& dir) {
  validate_document(doc, kQuantizedCompositeTol);
  std::filesystem::create_directories(dir);

  json manifest;
  manifest["schema_version"] = kManifestSchemaVersion;
  manifest["width"] = doc.width;
  manifest["height"] = doc.height;
  manifest["prompt"] = {{"poster", doc.prompt.poster},
                        {"foreground", doc.prompt.foreground},
                        {"midground", doc.prompt.midground},
                        {"background", doc.prompt.background}};
  manifest["layers"] = json::array();
  for (const LayerRecord& l : doc.layers) {
    manifest["layers"].push_back(
        {{"role", to_string(l.role)},
         {"bbox", {{"x", l.bbox.x}, {"y", l.bbox.y}, {"w", l.bbox.w}, {"h", l.bbox.h}}},
         {"visible", l.visible},
         {"z_order", l.z_order},
         {"filename", layer_filename(l.z_order)}});
  }

  std::ofstream os(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("bundle: cannot write manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
  os.close();

  for (const LayerRecord& l : doc.layers) {
    write_png(dir / layer_filename(l.z_order), l.image);
  }
  write_png(dir / "composite.png", doc.composite);
}

LayerDocument load_bundle(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream is(manifest_path, std::ios::binary);
  if (!is) {
    throw std::runtime_error("bundle: missing manifest " + manifest_path.string());
  }

  LayerDocument doc;
  try {
    const json manifest = json::parse(is);
    require_exact_keys(manifest,
                       {"schema_version", "width", "height", "prompt", "layers"},
                       "manifest");
    if (manifest.at("schema_version").get<int>() != kManifestSchemaVersion) {
      throw std::runtime_error("bundle: unsupported schema_version");
    }
    doc.width = manifest.at("width").get<int>();
    doc.height = manifest.at("height").get<int>();

    const json& prompt = manifest.at("prompt");
    require_exact_keys(prompt, {"poster", "foreground", "midground", "background"},
                       "prompt");
    doc.prompt.poster = prompt.at("poster").get<std::string>();
    doc.prompt.foreground = prompt.at("foreground").get<std::string>();
    doc.prompt.midground = prompt.at("midground").get<std::string>();
    doc.prompt.background = prompt.at("background").get<std::string>();

    for (const json& jl : manifest.at("layers")) {
      require_exact_keys(jl, {"role", "bbox", "visible", "z_order", "filename"},
                         "layer entry");
      const json& jb = jl.at("bbox");
      require_exact_keys(jb, {"x", "y", "w", "h"}, "bbox");

      LayerRecord rec;
      rec.role = layer_role_from_string(jl.at("role").get<std::string>());
      rec.bbox = {jb.at("x").get<int>(), jb.at("y").get<int>(),
                  jb.at("w").get<int>(), jb.at("h").get<int>()};
      rec.visible = jl.at("visible").get<bool>();
      rec.z_order = jl.at("z_order").get<int>();
      const std::string filename = jl.at("filename").get<std::string>();
      if (filename.find('/') != std::string::npos ||
          filename.find('\\') != std::string::npos) {
        throw std::runtime_error("bundle: layer filename must not contain paths");
      }
      rec.image = read_png(dir / filename);
      doc.layers.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("bundle: malformed manifest " + manifest_path.string() +
                             ": " + e.what());
  }

  std::sort(doc.layers.begin(), doc.layers.end(),
            [](const LayerRecord& a, const LayerRecord& b) {
              return a.z_order < b.z_order;
            });
  doc.composite = read_png(dir / "composite.png");
  validate_document(doc, kQuantizedCompositeTol);
  return doc;
}

// ------------------------------------------------------------- triplets, grid

namespace {

Tensor make_mask(const RgbaImage& layer, bool bbox_mask) {
  const int w = layer.width, h = layer.height;
  Tensor mask({h, w});
  if (bbox_mask) {
    const BBox box = tight_bbox(layer);
    for (int y = box.y; y < box.y + box.h; ++y) {
      for (int x = box.x; x < box.x + box.w; ++x) mask.v[y * w + x] = 1.0;
    }
    return mask;
  }
  Tensor support({h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      support.v[y * w + x] = (layer.at(x, y)[3] > 0.0f) ? 1.0 : 0.0;
    }
  }
  // 1-px dilation with a 3x3 structuring element
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double any = 0.0;
      for (int dy = -1; dy <= 1 && any == 0.0; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = x + dx, ny = y + dy;
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          if (support.v[ny * w + nx] > 0.0) {
            any = 1.0;
            break;
          }
        }
      }
      mask.v[y * w + x] = any;
    }
  }
  return mask;
}

RgbaImage flatten_records(const std::vector<const LayerRecord*>& records) {
  std::vector<RgbaImage> images;
  images.reserve(records.size());
  for (const LayerRecord* r : records) images.push_back(r->image);
  return flatten(images);
}

}  // namespace

std::vector<TripletSample> make_triplets(const LayerDocument& doc, bool bbox_mask) {
  std::vector<const LayerRecord*> working;
  for (const LayerRecord& l : doc.layers) {
    if (l.visible) working.push_back(&l);
  }

  // Peel order mirrors the inference loop: text layers first, then the
  // remaining non-background layers, each group top-down.
  std::vector<const LayerRecord*> order;
  for (auto it = working.rbegin(); it != working.rend(); ++it) {
    if ((*it)->role == LayerRole::text) order.push_back(*it);
  }
  for (auto it = working.rbegin(); it != working.rend(); ++it) {
    if ((*it)->role != LayerRole::text && (*it)->role != LayerRole::background) {
      order.push_back(*it);
    }
  }

  std::vector<TripletSample> out;
  for (const LayerRecord* layer : order) {
    TripletSample s;
    s.input = flatten_records(working);
    s.fg_target = layer->image;
    working.erase(std::find(working.begin(), working.end(), layer));
    s.bg_target = flatten_records(working);
    s.mask = make_mask(layer->image, bbox_mask);
    s.task = (layer->role == LayerRole::text) ? TripletTask::text_extract
                                              : TripletTask::fg_extract;
    out.push_back(std::move(s));
  }
  return out;
}

std::pair<GridSample, HierarchicalPrompt> make_grid_sample(const LayerDocument& doc) {
  std::vector<const LayerRecord*> non_text;
  std::vector<const LayerRecord*> shapes;  // non-text, non-background, top first
  const LayerRecord* background = nullptr;
  for (const LayerRecord& l : doc.layers) {
    if (!l.visible || l.role == LayerRole::text) continue;
    non_text.push_back(&l);
    if (l.role == LayerRole::background) background = &l;
  }
  for (auto it = non_text.rbegin(); it != non_text.rend(); ++it) {
    if ((*it)->role != LayerRole::background) shapes.push_back(*it);
  }
  if (shapes.empty() || background == nullptr) {
    throw std::invalid_argument(
        "make_grid_sample: document needs a background and at least one "
        "non-text layer");
  }

  const RgbaImage text_free_composite = flatten_records(non_text);
  const RgbaImage& layer_a = shapes[0]->image;
  const RgbaImage layer_b =
      (shapes.size() > 1) ? shapes[1]->image : RgbaImage(doc.width, doc.height);

  return {assemble_grid(text_free_composite, layer_a, layer_b, background->image),
          doc.prompt};
}

}  // namespace layercake
