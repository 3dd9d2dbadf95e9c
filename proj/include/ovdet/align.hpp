#pragma once

#include <stdexcept>
#include <vector>

#include "ovdet/common.hpp"

namespace ovdet::align {

struct AlignConfig {
  double tau = 0.07;
  double image_loss_weight = 1.0;
};

template <class S>
struct AlignBatch {
  MatX<S> region_features;     // N x d
  std::vector<int> positives;  // length N, index into candidates
  MatX<S> candidates;          // L x d, frozen text side
  MatX<S> image_features;      // B x d
  MatX<S> text_features;       // B x d, frozen text side
};

template <class S>
MatX<S> row_normalized(const MatX<S>& m) {
  MatX<S> out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const S n = out.row(i).norm();
    if (!(n > S(0))) throw std::invalid_argument("cannot normalize a zero row");
    out.row(i) /= n;
  }
  return out;
}

/// Cosine similarity of every row of A against every row of B.
template <class S>
MatX<S> cosine_similarity(const MatX<S>& a, const MatX<S>& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("cosine: dimension mismatch");
  return row_normalized(a) * row_normalized(b).transpose();
}

namespace detail {

template <class S>
void check_finite(const MatX<S>& m, const char* what) {
  if (!m.allFinite()) throw std::invalid_argument(std::string("non-finite input: ") + what);
}

/// Row-wise log-softmax bookkeeping: given logits Z (n x m), fills P with
/// softmax rows and returns sum over rows of (logsumexp(Z_i) - Z_i,target_i).
template <class S>
S softmax_ce_rows(const MatX<S>& z, const std::vector<int>& targets, MatX<S>& p) {
  const Eigen::Index n = z.rows(), m = z.cols();
  p.resize(n, m);
  S total = S(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S zmax = z.row(i).maxCoeff();
    VecX<S> e = (z.row(i).array() - zmax).exp().matrix().transpose();
    const S denom = e.sum();
    p.row(i) = (e / denom).transpose();
    const S lse = zmax + std::log(denom);
    total += lse - z(i, targets[static_cast<std::size_t>(i)]);
  }
  return total;
}

}  // namespace detail

/// Mean cross entropy of a cosine-similarity softmax: rows of `features`
/// scored against rows of `candidates` at temperature `tau`, targets giving
/// the positive column per row. Optional gradients w.r.t. the raw (not yet
/// normalized) features and candidate rows.
template <class S>
S cosine_softmax_ce(const MatX<S>& features, const MatX<S>& candidates,
                    const std::vector<int>& targets, S tau,
                    MatX<S>* grad_features = nullptr, MatX<S>* grad_candidates = nullptr) {
  if (!(tau > S(0)) || !std::isfinite(static_cast<double>(tau))) {
    throw std::invalid_argument("temperature must be finite and positive");
  }
  detail::check_finite(features, "features");
  detail::check_finite(candidates, "candidates");
  if (features.cols() != candidates.cols()) {
    throw std::invalid_argument("feature/candidate dimension mismatch");
  }
  const Eigen::Index n = features.rows(), m = candidates.rows();
  if (n < 1 || m < 1) throw std::invalid_argument("empty batch");
  if (static_cast<Eigen::Index>(targets.size()) != n) {
    throw std::invalid_argument("targets length mismatch");
  }
  for (int t : targets) {
    if (t < 0 || t >= m) throw std::invalid_argument("target index out of range");
  }

  VecX<S> fnorm(n), cnorm(m);
  MatX<S> fhat(n, features.cols()), chat(m, candidates.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    fnorm[i] = features.row(i).norm();
    if (!(fnorm[i] > S(0))) throw std::invalid_argument("zero feature row");
    fhat.row(i) = features.row(i) / fnorm[i];
  }
  for (Eigen::Index l = 0; l < m; ++l) {
    cnorm[l] = candidates.row(l).norm();
    if (!(cnorm[l] > S(0))) throw std::invalid_argument("zero candidate row");
    chat.row(l) = candidates.row(l) / cnorm[l];
  }

  const MatX<S> sim = fhat * chat.transpose();  // n x m
  MatX<S> probs;
  const S total = detail::softmax_ce_rows<S>(sim / tau, targets, probs);
  const S loss = total / static_cast<S>(n);

  if (grad_features != nullptr || grad_candidates != nullptr) {
    // dL/dsim = (p - onehot) / (n * tau)
    MatX<S> dsim = probs;
    for (Eigen::Index i = 0; i < n; ++i) {
      dsim(i, targets[static_cast<std::size_t>(i)]) -= S(1);
    }
    dsim /= static_cast<S>(n) * tau;

    if (grad_features != nullptr) {
      // dsim_il/dv_i = (chat_l - sim_il * fhat_i) / |v_i|
      grad_features->resize(features.rows(), features.cols());
      for (Eigen::Index i = 0; i < n; ++i) {
        VecX<S> g = chat.transpose() * dsim.row(i).transpose();
        const S coef = dsim.row(i).dot(sim.row(i));
        g -= coef * fhat.row(i).transpose();
        grad_features->row(i) = (g / fnorm[i]).transpose();
      }
    }
    if (grad_candidates != nullptr) {
      // dsim_il/dt_l = (fhat_i - sim_il * chat_l) / |t_l|
      grad_candidates->resize(candidates.rows(), candidates.cols());
      for (Eigen::Index l = 0; l < m; ++l) {
        VecX<S> g = fhat.transpose() * dsim.col(l);
        const S coef = dsim.col(l).dot(sim.col(l));
        g -= coef * chat.row(l).transpose();
        grad_candidates->row(l) = (g / cnorm[l]).transpose();
      }
    }
  }
  return loss;
}

/// Per-region contrastive loss: softmax over candidate conceptions at
/// temperature tau, positive given per region. The candidate side is frozen;
/// gradient flows to the region features only.
template <class S>
S region_contrastive_loss(const AlignBatch<S>& batch, const AlignConfig& config,
                          MatX<S>* grad_regions = nullptr) {
  return cosine_softmax_ce<S>(batch.region_features, batch.candidates, batch.positives,
                              static_cast<S>(config.tau), grad_regions, nullptr);
}

/// Symmetric in-batch contrastive loss over matched image/text rows: the
/// image-to-text and text-to-image cross entropies are averaged. Gradient
/// flows to the image features only (text side frozen).
template <class S>
S image_contrastive_loss(const MatX<S>& image_features, const MatX<S>& text_features,
                         const AlignConfig& config, MatX<S>* grad_images = nullptr) {
  const S tau = static_cast<S>(config.tau);
  if (!(tau > S(0)) || !std::isfinite(static_cast<double>(tau))) {
    throw std::invalid_argument("temperature must be finite and positive");
  }
  detail::check_finite(image_features, "image_features");
  detail::check_finite(text_features, "text_features");
  const Eigen::Index b = image_features.rows();
  if (b < 1) throw std::invalid_argument("empty image batch");
  if (text_features.rows() != b) throw std::invalid_argument("image/text row count mismatch");
  if (text_features.cols() != image_features.cols()) {
    throw std::invalid_argument("image/text dimension mismatch");
  }

  VecX<S> inorm(b);
  MatX<S> ihat(b, image_features.cols());
  for (Eigen::Index i = 0; i < b; ++i) {
    inorm[i] = image_features.row(i).norm();
    if (!(inorm[i] > S(0))) throw std::invalid_argument("zero image feature row");
    ihat.row(i) = image_features.row(i) / inorm[i];
  }
  const MatX<S> that = row_normalized(text_features);
  const MatX<S> sim = ihat * that.transpose();  // b x b
  const MatX<S> z = sim / tau;

  std::vector<int> diag(static_cast<std::size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) diag[static_cast<std::size_t>(i)] = static_cast<int>(i);

  MatX<S> prow, pcol;
  const S loss_i2t = detail::softmax_ce_rows<S>(z, diag, prow) / static_cast<S>(b);
  const MatX<S> zt = z.transpose();
  const S loss_t2i = detail::softmax_ce_rows<S>(zt, diag, pcol) / static_cast<S>(b);
  const S loss = (loss_i2t + loss_t2i) / S(2);

  if (grad_images != nullptr) {
    MatX<S> dsim = prow;
    for (Eigen::Index i = 0; i < b; ++i) dsim(i, i) -= S(1);
    MatX<S> dsim_col = pcol.transpose();
    for (Eigen::Index i = 0; i < b; ++i) dsim_col(i, i) -= S(1);
    dsim = (dsim + dsim_col) / (S(2) * static_cast<S>(b) * tau);

    grad_images->resize(image_features.rows(), image_features.cols());
    for (Eigen::Index i = 0; i < b; ++i) {
      VecX<S> g = that.transpose() * dsim.row(i).transpose();
      const S coef = dsim.row(i).dot(sim.row(i));
      g -= coef * ihat.row(i).transpose();
      grad_images->row(i) = (g / inorm[i]).transpose();
    }
  }
  return loss;
}

/// Pre-training objective: region term plus weighted image term.
template <class S>
S pretrain_loss(const AlignBatch<S>& batch, const AlignConfig& config,
                MatX<S>* grad_regions = nullptr, MatX<S>* grad_images = nullptr) {
  const S region = region_contrastive_loss<S>(batch, config, grad_regions);
  const S w = static_cast<S>(config.image_loss_weight);
  if (w < S(0)) throw std::invalid_argument("image_loss_weight must be >= 0");
  S image = S(0);
  if (grad_images != nullptr || w != S(0)) {
    image = image_contrastive_loss<S>(batch.image_features, batch.text_features, config,
                                      grad_images);
    if (grad_images != nullptr) *grad_images *= w;
  }
  return region + w * image;
}

}  // namespace ovdet::align
