#pragma once

#include <string>
#include <string_view>

#include "grl/tensor.hpp"

namespace grl {

// How query-key affinity is scored before the softmax.
//   dot:                    q·k / √d
//   negative_sq_euclidean:  −‖q − k‖² / √d
enum class SimilarityMeasure { dot, negative_sq_euclidean };

std::string to_string(SimilarityMeasure m);
SimilarityMeasure parse_similarity(std::string_view s);

// Logits for [n_q×d]·[n_k×d] or batched [B×n_q×d]·[B×n_k×d].
template <typename T>
Tensor<T> similarity_logits(const Tensor<T>& q, const Tensor<T>& k, SimilarityMeasure measure);

}  // namespace grl
