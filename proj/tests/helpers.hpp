#pragma once

#include <vector>

#include "neurodim/core.hpp"

namespace testing_util {

inline neurodim::Architecture arch(std::vector<int> dims, std::vector<int> attn, int tokens,
                                   neurodim::Model model = neurodim::Model::lightning) {
  neurodim::Architecture a;
  a.layers = static_cast<int>(attn.size());
  a.dims = std::move(dims);
  a.attn_dims = std::move(attn);
  a.tokens = tokens;
  a.model = model;
  a.validate();
  return a;
}

inline neurodim::TokenMatrix random_tokens(int d, int t, std::uint64_t seed, std::uint64_t index = 0) {
  return neurodim::TokenMatrix(neurodim::sample_gaussian_matrix(d, t, neurodim::stream_key(seed, "test-x", index)));
}

inline neurodim::Matrix gaussian(int r, int c, std::uint64_t seed, std::uint64_t index = 0) {
  return neurodim::sample_gaussian_matrix(r, c, neurodim::stream_key(seed, "test-m", index));
}

}  // namespace testing_util
