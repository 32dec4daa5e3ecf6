#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fern/common.hpp"
#include "fern/tensor.hpp"

namespace fern {

constexpr int kNumPatchPerms = 24;  // 4! orderings of the 2x2 grid

// mapping[slot] = source patch placed at that slot; patches are numbered
// left-to-right, top-to-bottom: 0 TL, 1 TR, 2 BL, 3 BR. index is the
// lexicographic rank of mapping among all 24 orderings (0 = identity).
struct PatchPermutation {
  int index = 0;
  std::array<int, 4> mapping{0, 1, 2, 3};
};

const std::array<PatchPermutation, kNumPatchPerms>& enumerate_permutations();
const PatchPermutation& permutation_at(int index);
PatchPermutation inverse_of(const PatchPermutation& perm);
// applying a then b equals applying compose(a, b)
PatchPermutation compose(const PatchPermutation& a, const PatchPermutation& b);

struct PermutedSample {
  Tensor image;  // [C,H,W]
  int class_label = 0;
  int perm_label = 0;
};

enum class AugmentMode { identity_only, online_uniform, offline_expand };

// Quadrants of a [C,H,W] image; H and W must be even.
std::array<Tensor, 4> split_into_patches(const Tensor& image);
PermutedSample apply_permutation(const Tensor& image, const PatchPermutation& perm,
                                 int class_label = 0);
// online_uniform draws one of the 24 permutations from rng; identity_only
// always applies index 0.
PermutedSample augment_sample(const Tensor& image, int class_label, Rng& rng, AugmentMode mode);

// Raw byte variant used by the data pipeline (CHW u8, permuted in place-free
// copy). dst and src must not alias.
void permute_patches_u8(const uint8_t* src, uint8_t* dst, int channels, int height, int width,
                        const PatchPermutation& perm);

}  // namespace fern
