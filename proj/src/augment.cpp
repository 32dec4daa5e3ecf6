#include "fern/augment.hpp"

#include <algorithm>
#include <cstring>

namespace fern {

namespace {

std::array<PatchPermutation, kNumPatchPerms> build_table() {
  std::array<PatchPermutation, kNumPatchPerms> table;
  std::array<int, 4> m{0, 1, 2, 3};
  int idx = 0;
  do {
    table[static_cast<size_t>(idx)] = PatchPermutation{idx, m};
    ++idx;
  } while (std::next_permutation(m.begin(), m.end()));
  return table;
}

// copies one quadrant; slot/src in {0..3}, row-major quadrant numbering
template <class T>
void copy_patch(const T* src_img, T* dst_img, int channels, int height, int width, int dst_slot,
                int src_patch) {
  const int ph = height / 2, pw = width / 2;
  const int dr = (dst_slot / 2) * ph, dc = (dst_slot % 2) * pw;
  const int sr = (src_patch / 2) * ph, sc = (src_patch % 2) * pw;
  for (int c = 0; c < channels; ++c) {
    const T* splane = src_img + static_cast<int64_t>(c) * height * width;
    T* dplane = dst_img + static_cast<int64_t>(c) * height * width;
    for (int r = 0; r < ph; ++r)
      std::memcpy(dplane + static_cast<int64_t>(dr + r) * width + dc,
                  splane + static_cast<int64_t>(sr + r) * width + sc,
                  static_cast<size_t>(pw) * sizeof(T));
  }
}

void check_even_image(const Tensor& image) {
  if (image.ndim() != 3)
    contract_fail("patch permutation: image must be [C,H,W], got " + shape_str(image.shape()));
  if (image.dim(1) % 2 != 0 || image.dim(2) % 2 != 0)
    contract_fail("patch permutation: H and W must be even, got " + shape_str(image.shape()));
}

}  // namespace

const std::array<PatchPermutation, kNumPatchPerms>& enumerate_permutations() {
  static const std::array<PatchPermutation, kNumPatchPerms> table = build_table();
  return table;
}

const PatchPermutation& permutation_at(int index) {
  if (index < 0 || index >= kNumPatchPerms)
    contract_fail("permutation_at: index " + std::to_string(index) + " out of range");
  return enumerate_permutations()[static_cast<size_t>(index)];
}

namespace {

int rank_of(const std::array<int, 4>& mapping) {
  const auto& table = enumerate_permutations();
  for (const PatchPermutation& p : table)
    if (p.mapping == mapping) return p.index;
  contract_fail("rank_of: not a permutation of {0,1,2,3}");
}

}  // namespace

PatchPermutation inverse_of(const PatchPermutation& perm) {
  std::array<int, 4> inv{};
  for (int s = 0; s < 4; ++s) inv[static_cast<size_t>(perm.mapping[static_cast<size_t>(s)])] = s;
  return PatchPermutation{rank_of(inv), inv};
}

PatchPermutation compose(const PatchPermutation& a, const PatchPermutation& b) {
  // slot s of the final image holds patch b.mapping[s] of the intermediate,
  // which holds source patch a.mapping[b.mapping[s]]
  std::array<int, 4> m{};
  for (int s = 0; s < 4; ++s)
    m[static_cast<size_t>(s)] =
        a.mapping[static_cast<size_t>(b.mapping[static_cast<size_t>(s)])];
  return PatchPermutation{rank_of(m), m};
}

std::array<Tensor, 4> split_into_patches(const Tensor& image) {
  check_even_image(image);
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const int ph = H / 2, pw = W / 2;
  std::array<Tensor, 4> patches;
  for (int p = 0; p < 4; ++p) {
    Tensor out = Tensor::zeros({C, ph, pw});
    const int sr = (p / 2) * ph, sc = (p % 2) * pw;
    for (int c = 0; c < C; ++c)
      for (int r = 0; r < ph; ++r)
        std::memcpy(out.data() + (static_cast<int64_t>(c) * ph + r) * pw,
                    image.data() + (static_cast<int64_t>(c) * H + sr + r) * W + sc,
                    static_cast<size_t>(pw) * sizeof(double));
    patches[static_cast<size_t>(p)] = out;
  }
  return patches;
}

PermutedSample apply_permutation(const Tensor& image, const PatchPermutation& perm,
                                 int class_label) {
  check_even_image(image);
  Tensor out = Tensor::zeros(image.shape());
  for (int slot = 0; slot < 4; ++slot)
    copy_patch(image.data(), out.data(), image.dim(0), image.dim(1), image.dim(2), slot,
               perm.mapping[static_cast<size_t>(slot)]);
  return PermutedSample{out, class_label, perm.index};
}

PermutedSample augment_sample(const Tensor& image, int class_label, Rng& rng, AugmentMode mode) {
  switch (mode) {
    case AugmentMode::identity_only:
      return apply_permutation(image, permutation_at(0), class_label);
    case AugmentMode::online_uniform:
      return apply_permutation(image, permutation_at(static_cast<int>(rng.below(kNumPatchPerms))),
                               class_label);
    case AugmentMode::offline_expand:
      break;
  }
  contract_fail("augment_sample: offline_expand applies to whole datasets, not single samples");
}

void permute_patches_u8(const uint8_t* src, uint8_t* dst, int channels, int height, int width,
                        const PatchPermutation& perm) {
  if (height % 2 != 0 || width % 2 != 0)
    contract_fail("permute_patches_u8: H and W must be even");
  for (int slot = 0; slot < 4; ++slot)
    copy_patch(src, dst, channels, height, width, slot, perm.mapping[static_cast<size_t>(slot)]);
}

}  // namespace fern
