#pragma once

#include <optional>
#include <string>
#include <vector>

#include "clip/clip.h"
#include "core/tensor.h"

namespace ipc {

// W_t^+ with small singular directions zeroed out
struct pseudo_inverse {
    tensor matrix; // [d_t, d_c]
    float threshold = 0.3f;
    int64_t retained_rank = 0;
    std::vector<float> singular_values; // of the source matrix, descending
    std::string source_tag;
};

struct converter_config {
    float kappa = 27.0f;   // the near-constant caption embedding norm
    float threshold = 0.3f;
};

// f_cnvrt: the converted stand-in for the end-of-sentence token embedding
struct converted_token {
    tensor embedding; // [d_t]
    std::string source_id;
};

enum class prompt_provenance { text, converted, combined };

struct prompt_sequence {
    tensor vectors; // [77, d_t]
    prompt_provenance provenance = prompt_provenance::converted;
    std::optional<float> alpha;
};

const char * provenance_name(prompt_provenance p);

// SVD-based pseudo-inverse; singular values below tau are treated as zero
// (values equal to tau are kept). Throws degenerate_error when nothing
// survives the threshold.
pseudo_inverse thresholded_pseudo_inverse(const projection_matrix & W, float tau);

// (kappa / ||f||) * W^+ f ; invariant under positive rescaling of f
converted_token convert_image_embedding(const tensor & f_projected, const pseudo_inverse & inv,
                                        const converter_config & cfg, const std::string & source_id = "");

// d(convert)/d(f) applied to an output gradient, for the tuning path; the
// inverse matrix itself never receives gradient
tensor convert_backward(const tensor & f_projected, const pseudo_inverse & inv,
                        const converter_config & cfg, const tensor & d_out);

// [sos, cnvrt, cnvrt, ..., cnvrt] ; pads kept on purpose, they shift
// attention mass away from the start token
prompt_sequence assemble_pseudo_prompt(const tensor & sos, const converted_token & cnvrt);

// f_comb = cnvrt + alpha * f_eos; word tokens stay, positions >= eos_index
// all get f_comb
prompt_sequence combine_edit(const converted_token & cnvrt, const text_encoding & text, float alpha);

} // namespace ipc
