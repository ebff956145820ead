#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "layercake/image.hpp"
#include "layercake/tensor.hpp"

namespace layercake {

enum class LayerRole { text, foreground, midground, background };

std::string to_string(LayerRole role);
LayerRole layer_role_from_string(const std::string& s);

struct BBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool operator==(const BBox&) const = default;
};

// Tight box of pixels with A > threshold; (0,0,0,0) when none qualify.
BBox tight_bbox(const RgbaImage& img, float alpha_threshold = 0.0f);

struct LayerRecord {
  LayerRole role = LayerRole::background;
  RgbaImage image;  // full document size; alpha 0 outside the element
  BBox bbox;
  bool visible = true;
  int z_order = 0;  // 0 = bottom
};

// Four-field text record: the whole poster plus each semantic layer.
struct HierarchicalPrompt {
  std::string poster;
  std::string foreground;
  std::string midground;
  std::string background;
};

struct LayerDocument {
  int width = 0;
  int height = 0;
  std::vector<LayerRecord> layers;  // sorted by z_order
  RgbaImage composite;
  HierarchicalPrompt prompt;
};

// Throws std::runtime_error naming the first violated invariant: unique
// contiguous z_order, exactly one background at z 0, bboxes inside bounds,
// non-empty prompt fields, and composite == flatten(visible layers) within
// `composite_tol` per channel.
void validate_document(const LayerDocument& doc, float composite_tol = 1e-6f);

// Deterministic procedural poster: one background (gradient or two-tone
// split), 1-2 soft-edged shape layers, an optional glyph-mark text layer,
// and template prompts describing the sampled parameters.
LayerDocument synth_poster(std::uint64_t seed, int size);

// Every word a generated prompt can contain, sorted ascending; the text
// embedding vocabulary is built from this list.
const std::vector<std::string>& prompt_vocabulary();

// Directory format: manifest.json + layer_NN.png (NN = z_order) +
// composite.png. Manifests serialize with 2-space indentation and
// lexicographic keys so consecutive saves are byte-identical.
void save_bundle(const LayerDocument& doc, const std::filesystem::path& dir);
LayerDocument load_bundle(const std::filesystem::path& dir);

enum class TripletTask { text_extract, text_erase, fg_extract, fg_erase };

std::string to_string(TripletTask task);

// One extract/erase training sample: peel one layer off a flattened stack.
struct TripletSample {
  RgbaImage input;      // flattened stack before the peel
  Tensor mask;          // [H,W] in {0,1}: layer alpha support, dilated 1 px
  RgbaImage fg_target;  // the peeled layer's RGBA (extraction target)
  RgbaImage bg_target;  // flatten of everything beneath (erasure target)
  TripletTask task;     // extraction task implied by the peeled layer's role
};

// One triplet per non-background layer, in peel order (text layers first,
// then the rest top-down); each triplet's input is the previous bg_target.
// `bbox_mask` switches the mask from alpha support to the filled bbox.
std::vector<TripletSample> make_triplets(const LayerDocument& doc,
                                         bool bbox_mask = false);

// 2x2 in-context sample: text layers dropped, composite recomputed without
// them; quadrants = (text-free composite, top shape layer, second shape
// layer or transparent placeholder, background).
std::pair<GridSample, HierarchicalPrompt> make_grid_sample(
    const LayerDocument& doc);

}  // namespace layercake
