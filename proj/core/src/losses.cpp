#include "hmseg/losses.hpp"

#include <algorithm>
#include <cmath>

namespace hmseg {

double dice_loss(const Tensor<double>& pred, const Tensor<double>& gt) {
    require(pred.same_shape(gt), ErrClass::precondition, "dice_loss shape mismatch");
    require(pred.rank() >= 1, ErrClass::precondition, "dice_loss needs a class dim");
    const int v = pred.dim(0);
    const int64_t u = pred.size() / v;
    double acc = 0.0;
    for (int c = 0; c < v; ++c) {
        const double* p = pred.ptr() + c * u;
        const double* g = gt.ptr() + c * u;
        double num = 0.0, gg = 0.0, pp = 0.0;
        for (int64_t i = 0; i < u; ++i) {
            require(g[i] == 0.0 || g[i] == 1.0, ErrClass::precondition, "gt not binary");
            num += g[i] * p[i];
            gg += g[i] * g[i];
            pp += p[i] * p[i];
        }
        acc += num / (gg + pp + kDiceEps);
    }
    return 1.0 - (2.0 / v) * acc;
}

double bce(const Tensor<double>& pred, const Tensor<double>& target) {
    require(pred.same_shape(target), ErrClass::precondition, "bce shape mismatch");
    require(pred.size() > 0, ErrClass::precondition, "bce on empty vector");
    double acc = 0.0;
    for (int64_t i = 0; i < pred.size(); ++i) {
        double p = std::clamp(pred[i], kBceClamp, 1.0 - kBceClamp);
        double t = target[i];
        acc += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
    }
    return acc / static_cast<double>(pred.size());
}

Tensor<double> availability_code(const ModalityMask& mask) {
    Tensor<double> t({mask.m});
    for (int j = 0; j < mask.m; ++j) t[j] = mask.test(j) ? 1.0 : 0.0;
    return t;
}

Tensor<double> dummy_code(int modalities) {
    Tensor<double> t({modalities});
    t.fill(1.0);
    return t;
}

double discriminator_loss(const std::vector<Tensor<double>>& d_hat_batch,
                          const std::vector<Tensor<double>>& t_real_batch, double disc_scale) {
    require(d_hat_batch.size() == t_real_batch.size(), ErrClass::precondition,
            "discriminator_loss batch length mismatch");
    double acc = 0.0;
    for (size_t z = 0; z < d_hat_batch.size(); ++z) acc += bce(d_hat_batch[z], t_real_batch[z]);
    return disc_scale * acc;
}

GeneratorLoss generator_loss(const Tensor<double>& seg_pred, const Tensor<double>& seg_gt,
                             const std::vector<Tensor<double>>& d_hat_batch,
                             const LossWeights& weights) {
    GeneratorLoss out;
    out.seg_term = weights.lambda1 * dice_loss(seg_pred, seg_gt);
    double adv = 0.0;
    for (const Tensor<double>& d : d_hat_batch) adv += bce(d, dummy_code(d.dim(0)));
    out.adv_term = weights.lambda2 * adv;
    out.total = out.seg_term + out.adv_term;
    return out;
}

}  // namespace hmseg
