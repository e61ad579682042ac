#pragma once

#include <algorithm>
#include <cstdlib>
#include <vector>

#include "cropmae/propeval.hpp"

namespace cropmae::prop {

/// Exhaustive propagation for small test instances: every location of every
/// context frame is scored, filtered by distance, fully sorted and cut to
/// top_k. No windowing or partial selection.
inline std::vector<LabelField> propagate_reference(std::span<const FeatureGrid> frames, const LabelField& first_labels,
                                                   const PropagationConfig& cfg = {}) {
    detail::check_inputs(frames, first_labels, cfg);
    const std::size_t h = first_labels.h, w = first_labels.w, k = first_labels.k, d = frames[0].d;
    std::vector<LabelField> out{first_labels};
    for (std::size_t t = 1; t < frames.size(); ++t) {
        std::vector<std::size_t> ctx{0};
        for (std::size_t f = 1; f < t; ++f)
            if (t - f <= cfg.queue_len) ctx.push_back(f);
        std::vector<const LabelField*> ctx_labels;
        for (std::size_t c : ctx) ctx_labels.push_back(&out[c]);
        LabelField pred(h, w, k);
        for (std::size_t q = 0; q < h * w; ++q) {
            const auto qy = static_cast<long>(q / w), qx = static_cast<long>(q % w);
            std::vector<detail::Candidate> all;
            for (std::size_t ci = 0; ci < ctx.size(); ++ci) {
                for (std::size_t loc = 0; loc < h * w; ++loc) {
                    const auto y = static_cast<long>(loc / w), x = static_cast<long>(loc % w);
                    if (std::max(std::labs(y - qy), std::labs(x - qx)) > static_cast<long>(cfg.radius)) continue;
                    all.push_back({detail::dot(frames[t].at(q), frames[ctx[ci]].at(loc), d), static_cast<std::uint32_t>(ci),
                                   static_cast<std::uint32_t>(loc)});
                }
            }
            std::sort(all.begin(), all.end(), detail::ranks_before);
            all.resize(std::min(all.size(), cfg.top_k));
            detail::vote(all, ctx_labels, cfg.temperature, pred.at(q), k);
        }
        out.push_back(std::move(pred));
    }
    return out;
}

}  // namespace cropmae::prop
