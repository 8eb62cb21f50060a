#include <cstring>
#include "converter/converter.h"

#include <cmath>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "core/errors.h"

namespace ipc {

const char * provenance_name(prompt_provenance p) {
    switch (p) {
        case prompt_provenance::text: return "text";
        case prompt_provenance::converted: return "converted";
        case prompt_provenance::combined: return "combined";
    }
    return "?";
}

pseudo_inverse thresholded_pseudo_inverse(const projection_matrix & W, float tau) {
    if (tau < 0.0f) throw input_error("pseudo_inverse: threshold must be >= 0");
    if (!all_finite(W.matrix)) throw input_error("pseudo_inverse: non-finite projection matrix");

    const int64_t rows = W.matrix.shape[0]; // d_c
    const int64_t cols = W.matrix.shape[1]; // d_t

    Eigen::MatrixXd M(rows, cols);
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) M((Eigen::Index) i, (Eigen::Index) j) = W.matrix.at2(i, j);
    }

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto & sv = svd.singularValues();

    pseudo_inverse out;
    out.threshold = tau;
    out.source_tag = W.model_tag;
    out.singular_values.reserve((size_t) sv.size());
    for (Eigen::Index i = 0; i < sv.size(); ++i) out.singular_values.push_back((float) sv(i));

    Eigen::VectorXd inv_s(sv.size());
    int64_t rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        if ((float) sv(i) >= tau) {
            inv_s(i) = 1.0 / sv(i);
            ++rank;
        } else {
            inv_s(i) = 0.0;
        }
    }
    if (rank == 0) {
        throw degenerate_error(strf("pseudo_inverse: all %lld singular values below threshold %g, conversion would be identically zero",
                                    (long long) sv.size(), (double) tau));
    }
    out.retained_rank = rank;

    Eigen::MatrixXd P = svd.matrixV() * inv_s.asDiagonal() * svd.matrixU().transpose(); // [d_t, d_c]
    out.matrix = tensor({cols, rows});
    for (int64_t i = 0; i < cols; ++i) {
        for (int64_t j = 0; j < rows; ++j) out.matrix.at2(i, j) = (float) P((Eigen::Index) i, (Eigen::Index) j);
    }
    return out;
}

converted_token convert_image_embedding(const tensor & f_projected, const pseudo_inverse & inv,
                                        const converter_config & cfg, const std::string & source_id) {
    if (f_projected.numel() != inv.matrix.shape[1]) {
        throw input_error(strf("convert: embedding dim %lld does not match inverse cols %lld",
                               (long long) f_projected.numel(), (long long) inv.matrix.shape[1]));
    }
    const float n = norm2(f_projected);
    if (!(n > 0.0f) || !all_finite(f_projected)) {
        throw input_error("convert: zero-norm or non-finite input embedding");
    }
    converted_token t;
    t.source_id = source_id;
    t.embedding = tensor({inv.matrix.shape[0]});
    matvec(inv.matrix, f_projected.data(), t.embedding.data());
    scale_(t.embedding, cfg.kappa / n);
    return t;
}

tensor convert_backward(const tensor & f_projected, const pseudo_inverse & inv,
                        const converter_config & cfg, const tensor & d_out) {
    const int64_t d_t = inv.matrix.shape[0];
    const int64_t d_c = inv.matrix.shape[1];
    const float n = norm2(f_projected);

    // out = (kappa/||f||) M f
    // df  = (kappa/||f||) M^T d  -  kappa <Mf, d> / ||f||^3 * f
    tensor mtd({d_c});
    for (int64_t c = 0; c < d_c; ++c) {
        double s = 0.0;
        for (int64_t r = 0; r < d_t; ++r) s += (double) inv.matrix.at2(r, c) * d_out.v[(size_t) r];
        mtd.v[(size_t) c] = (float) s;
    }
    tensor mf({d_t});
    matvec(inv.matrix, f_projected.data(), mf.data());
    const float mfd = dot(mf, d_out);

    tensor df = mtd;
    scale_(df, cfg.kappa / n);
    axpy_(df, -cfg.kappa * mfd / (n * n * n), f_projected);
    return df;
}

prompt_sequence assemble_pseudo_prompt(const tensor & sos, const converted_token & cnvrt) {
    const int64_t d = sos.numel();
    if (cnvrt.embedding.numel() != d) throw input_error("assemble: sos/converted dim mismatch");
    if (!all_finite(sos) || !all_finite(cnvrt.embedding)) throw input_error("assemble: non-finite inputs");

    prompt_sequence seq;
    seq.provenance = prompt_provenance::converted;
    seq.vectors = tensor({N_CTX, d});
    std::memcpy(seq.vectors.data(), sos.data(), (size_t) d * sizeof(float));
    for (int64_t i = 1; i < N_CTX; ++i) {
        std::memcpy(seq.vectors.data() + i * d, cnvrt.embedding.data(), (size_t) d * sizeof(float));
    }
    return seq;
}

prompt_sequence combine_edit(const converted_token & cnvrt, const text_encoding & text, float alpha) {
    if (!std::isfinite(alpha)) throw input_error("combine_edit: non-finite alpha");
    if (alpha < 0.0f) throw input_error("combine_edit: alpha must be >= 0");
    if (alpha > 1.0f) {
        fprintf(stderr, "combine_edit: alpha %.3f above the usual [0, 0.9] range\n", (double) alpha);
    }
    const int64_t d = cnvrt.embedding.numel();
    if (text.tokens.shape[1] != d) throw input_error("combine_edit: text/converted dim mismatch");

    tensor comb = cnvrt.embedding;
    const float * eos = text.tokens.data() + text.eos_index * d;
    for (int64_t j = 0; j < d; ++j) comb.v[(size_t) j] += alpha * eos[j];

    prompt_sequence seq;
    seq.provenance = prompt_provenance::combined;
    seq.alpha = alpha;
    seq.vectors = tensor({N_CTX, d});
    std::memcpy(seq.vectors.data(), text.tokens.data(), (size_t) (text.eos_index * d) * sizeof(float));
    for (int64_t i = text.eos_index; i < N_CTX; ++i) {
        std::memcpy(seq.vectors.data() + i * d, comb.data(), (size_t) d * sizeof(float));
    }
    return seq;
}

} // namespace ipc
