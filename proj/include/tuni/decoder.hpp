#pragma once

#include "tuni/encoder.hpp"

namespace tuni {

/// All-MLP segmentation head: per-stage linear to decoder_dim, bilinear
/// restore to the stage-1 grid, channel concat, linear fuse, linear classify,
/// then a final x4 restore to the padded input resolution.
template <typename T>
Val<T> mlp_decode(Graph<T>& g, ParamRegistry<T>& reg, const ModelConfig& cfg,
                  const EncoderOutVals<T>& enc) {
    const Shape& s1 = g.value(enc.rgb[0]).shape;
    const int h1 = s1[2], w1 = s1[3];

    std::vector<Val<T>> ups;
    for (int s = 0; s < 4; ++s) {
        Val<T> p = linear_forward(g, enc.rgb[std::size_t(s)], reg,
                                  "decoder.proj" + std::to_string(s + 1));
        ups.push_back(s == 0 ? p : bilinear_upsample(p, h1, w1));
    }
    Val<T> fused = linear_forward(g, concat(ups, 1), reg, "decoder.fuse");
    Val<T> logits = linear_forward(g, fused, reg, "decoder.classify");
    return bilinear_upsample(logits, h1 * 4, w1 * 4);
}

/// Classification head for pre-training: global average pool on the stage-4
/// RGB map, then a linear classifier.
template <typename T>
Val<T> cls_head(Graph<T>& g, ParamRegistry<T>& reg, const EncoderOutVals<T>& enc) {
    Val<T> pooled = reduce(reduce(enc.rgb[3], 3, ReduceKind::Mean, false),
                           2, ReduceKind::Mean, false); // [N, C4]
    return linear_forward(g, pooled, reg, "head.fc");
}

} // namespace tuni
