#pragma once

#include <memory>
#include <vector>

#include "lpcr/image.hpp"
#include "lpcr/nn.hpp"

namespace lpcr {

struct Rect {
  int y0 = 0, y1 = 0, x0 = 0, x1 = 0;  // half-open
  bool empty() const { return y0 >= y1 || x0 >= x1; }
};

// Re-scores localized pixel edits against a frozen eval-mode net. The clean
// activations of the image are computed once; each score call recomputes only
// the region of every layer a patch can reach, then restores the touched
// regions. Results are identical to running the plain forward pass on the
// patched image (same kernels, same accumulation order).
//
// Supported net layout: [conv3x3 | batchnorm | relu | maxpool2]* followed by
// [fc | relu | dropout]* and an optional trailing softmax. Anything else
// falls back to a full forward per call.
class PatchedEval {
 public:
  PatchedEval(Net& net, const Image& image);

  // `edit` is the image-space bounding box of the changed pixels, which must
  // already be written into `patched`. Returns logits (not probabilities).
  const std::vector<float>& score_rect(const Image& patched, const Rect& edit);

  const std::vector<float>& clean_logits() const { return clean_logits_; }

 private:
  void run_flat(const float* flat_in);
  void restore(const std::vector<Rect>& rects);

  Net& net_;
  Image image_;
  int first_flat_ = 0;  // layer index where the flat stack starts
  bool fallback_full_ = false;

  std::vector<Tensor> clean_;    // clean_[0] = input, clean_[i+1] = layer i output
  std::vector<Tensor> scratch_;  // same layout, restored to clean after each call
  std::vector<float> logits_;
  std::vector<float> clean_logits_;
  std::vector<float> flat_tmp_a_, flat_tmp_b_;
};

}  // namespace lpcr
