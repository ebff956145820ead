#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "layercake/bundle.hpp"
#include "layercake/flow.hpp"
#include "layercake/image.hpp"
#include "layercake/vae.hpp"

namespace layercake {

// Model stack driven by the decomposition loop: one editing task applied to
// the current canvas. The loop supplies the mask (all-ones at inference).
class ModelSet {
 public:
  virtual ~ModelSet() = default;
  virtual bool supports(TripletTask task) const = 0;
  virtual RgbaImage run(TripletTask task, const RgbaImage& input,
                        const RgbaImage& mask) = 0;
};

// Replays recorded ground-truth triplets: a request is answered by the
// recorded target whose (task, input) matches, giving an exact closure
// oracle. Erase requests read the background target of the sample recorded
// for the matching extract peel. An extraction request with no matching
// recorded input yields a fully transparent layer, which ends the loop; an
// unmatched erase throws.
class OracleModelSet : public ModelSet {
 public:
  explicit OracleModelSet(std::vector<TripletSample> triplets);
  bool supports(TripletTask task) const override;
  RgbaImage run(TripletTask task, const RgbaImage& input,
                const RgbaImage& mask) override;

 private:
  std::vector<TripletSample> triplets_;
};

// Runs the trained VAE + flow adapters: encode the canvas, Euler-integrate
// the edit flow for the task's adapter, decode the endpoint. Edit tasks are
// conditioned on the task token and mask only (no prompt text is available
// when decomposing an arbitrary image).
class FlowModelSet : public ModelSet {
 public:
  FlowModelSet(VaeModel vae, FlowModel flow,
               std::map<FlowTask, LoraSet> adapters, int sampler_steps = 8);
  bool supports(TripletTask task) const override;
  RgbaImage run(TripletTask task, const RgbaImage& input,
                const RgbaImage& mask) override;

 private:
  VaeModel vae_;
  FlowModel flow_;
  std::map<FlowTask, LoraSet> adapters_;
  int sampler_steps_;
};

// Working state of the peeling loop; `iteration` counts completed
// extract+erase rounds and layers are recorded in peel (top-down) order.
struct DecompositionState {
  RgbaImage current;
  std::vector<std::pair<LayerRecord, TripletTask>> extracted;
  int iteration = 0;
};

struct DecomposeOptions {
  int k_max = 4;         // foreground rounds
  double stop_tau = 0.01;  // stop when extracted mean alpha falls below this
};

// Iterative decomposition: one text round, then foreground rounds until the
// extraction is empty or k_max is reached; the remaining canvas becomes the
// background layer. Deterministic given the image and models.
LayerDocument decompose(const RgbaImage& img, ModelSet& models,
                        const DecomposeOptions& opts);

// Mean of the alpha channel; the loop's stop statistic.
double mean_alpha(const RgbaImage& img);

// Flattens the document's visible stack, composites both sides on a white
// matte, and returns the mean squared error over RGB.
double recompose_error(const LayerDocument& doc, const RgbaImage& original);

// Editable-text recovery plug-in contract (interface only; real OCR/font
// engines are out of scope).
struct TextSpan {
  std::string content;
  BBox bbox;
  std::string font_id = "unknown";
};

class TextRecovery {
 public:
  virtual ~TextRecovery() = default;
  virtual std::string name() const = 0;
  virtual std::vector<TextSpan> recover(const LayerRecord& layer) = 0;
};

// Checks the layer role, delegates to the engine, and validates the returned
// spans; engine failures surface as errors naming the engine.
std::vector<TextSpan> recover_text(const LayerRecord& layer,
                                   TextRecovery& engine);

// Name-based engine registry. "passthrough" is always available: it returns
// one "unknown" span covering the layer bbox, or none for empty alpha.
std::unique_ptr<TextRecovery> make_text_recovery(const std::string& name);
void register_text_recovery(
    const std::string& name,
    std::function<std::unique_ptr<TextRecovery>()> factory);
std::vector<std::string> text_recovery_engine_names();

}  // namespace layercake
