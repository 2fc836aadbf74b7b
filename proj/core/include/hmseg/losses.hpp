#pragma once

#include <vector>

#include "hmseg/modality_mask.hpp"
#include "hmseg/tensor.hpp"

namespace hmseg {

// Smoothing added to the Dice denominator only; guards the division when a
// class is absent from both prediction and ground truth while keeping the
// exact-overlap loss below 1e-6 even for few-voxel regions.
constexpr double kDiceEps = 1e-7;
// Probability clamp for log-domain safety in BCE.
constexpr double kBceClamp = 1e-7;

struct LossWeights {
    double lambda1 = 0.8;
    double lambda2 = 0.2;
    double disc_scale = 0.5;
};

// Soft Dice loss: 1 - (2/V) sum_v [ sum_u G P / (sum_u G^2 + sum_u P^2 + eps) ].
// pred in [0,1], gt binary, identical shapes with the class dim first.
double dice_loss(const Tensor<double>& pred, const Tensor<double>& gt);

// Mean over components of -[t ln p + (1-t) ln(1-p)] with p clamped to
// [kBceClamp, 1-kBceClamp].
double bce(const Tensor<double>& pred, const Tensor<double>& target);

// All-ones dummy code and true availability code as target vectors.
Tensor<double> availability_code(const ModalityMask& mask);
Tensor<double> dummy_code(int modalities);

// disc_scale * sum over the batch of bce(d_hat_z, t_real_z).
double discriminator_loss(const std::vector<Tensor<double>>& d_hat_batch,
                          const std::vector<Tensor<double>>& t_real_batch, double disc_scale);

struct GeneratorLoss {
    double total = 0.0;
    double seg_term = 0.0;  // lambda1 * dice
    double adv_term = 0.0;  // lambda2 * sum_z bce(d_hat_z, ones)
};

// lambda1 * dice_loss(seg_pred, seg_gt) + lambda2 * sum_z bce(d_hat_z, 1).
// total is computed as seg_term + adv_term so the decomposition is exact.
GeneratorLoss generator_loss(const Tensor<double>& seg_pred, const Tensor<double>& seg_gt,
                             const std::vector<Tensor<double>>& d_hat_batch,
                             const LossWeights& weights);

}  // namespace hmseg
