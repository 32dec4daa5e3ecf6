#pragma once

// Blocked, packed matrix multiply used by conv2d and linear. Single-threaded
// and bit-deterministic: the reduction order over k is fixed by the blocking
// and never depends on data or environment.
//
// C[M x N] (+)= A[M x K] * B[K x N], all row-major. A and B are supplied as
// element-fetch functors so convolution can lower itself lazily (implicit
// im2col) without materializing the patch matrix.

#include <cstddef>
#include <cstring>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#elif defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace fern::detail {

#if defined(__AVX512F__)
constexpr int kMR = 8;
constexpr int kNR = 16;
#elif defined(__AVX2__) && defined(__FMA__)
constexpr int kMR = 4;
constexpr int kNR = 8;
#else
constexpr int kMR = 4;
constexpr int kNR = 4;
#endif

constexpr int kKC = 256;   // k-block: A/B panel depth
constexpr int kNC = 1024;  // n-block: B panel width
constexpr int kMC = 256;   // m-block: A panel height

// Ap: [kc][kMR] per row strip; Bp: [kc][kNR] per column strip.
inline void micro_kernel(int kc, const double* Ap, const double* Bp, double* C, int ldc,
                         bool acc) {
#if defined(__AVX512F__)
  __m512d c[kMR][2];
  for (int i = 0; i < kMR; ++i) {
    c[i][0] = _mm512_setzero_pd();
    c[i][1] = _mm512_setzero_pd();
  }
  for (int k = 0; k < kc; ++k) {
    const double* b = Bp + static_cast<size_t>(k) * kNR;
    __m512d b0 = _mm512_loadu_pd(b);
    __m512d b1 = _mm512_loadu_pd(b + 8);
    const double* a = Ap + static_cast<size_t>(k) * kMR;
    for (int i = 0; i < kMR; ++i) {
      __m512d ai = _mm512_set1_pd(a[i]);
      c[i][0] = _mm512_fmadd_pd(ai, b0, c[i][0]);
      c[i][1] = _mm512_fmadd_pd(ai, b1, c[i][1]);
    }
  }
  for (int i = 0; i < kMR; ++i) {
    double* cp = C + static_cast<size_t>(i) * ldc;
    if (acc) {
      c[i][0] = _mm512_add_pd(_mm512_loadu_pd(cp), c[i][0]);
      c[i][1] = _mm512_add_pd(_mm512_loadu_pd(cp + 8), c[i][1]);
    }
    _mm512_storeu_pd(cp, c[i][0]);
    _mm512_storeu_pd(cp + 8, c[i][1]);
  }
#elif defined(__AVX2__) && defined(__FMA__)
  __m256d c[kMR][2];
  for (int i = 0; i < kMR; ++i) {
    c[i][0] = _mm256_setzero_pd();
    c[i][1] = _mm256_setzero_pd();
  }
  for (int k = 0; k < kc; ++k) {
    const double* b = Bp + static_cast<size_t>(k) * kNR;
    __m256d b0 = _mm256_loadu_pd(b);
    __m256d b1 = _mm256_loadu_pd(b + 4);
    const double* a = Ap + static_cast<size_t>(k) * kMR;
    for (int i = 0; i < kMR; ++i) {
      __m256d ai = _mm256_set1_pd(a[i]);
      c[i][0] = _mm256_fmadd_pd(ai, b0, c[i][0]);
      c[i][1] = _mm256_fmadd_pd(ai, b1, c[i][1]);
    }
  }
  for (int i = 0; i < kMR; ++i) {
    double* cp = C + static_cast<size_t>(i) * ldc;
    if (acc) {
      c[i][0] = _mm256_add_pd(_mm256_loadu_pd(cp), c[i][0]);
      c[i][1] = _mm256_add_pd(_mm256_loadu_pd(cp + 4), c[i][1]);
    }
    _mm256_storeu_pd(cp, c[i][0]);
    _mm256_storeu_pd(cp + 4, c[i][1]);
  }
#else
  double c[kMR][kNR] = {};
  for (int k = 0; k < kc; ++k) {
    const double* b = Bp + static_cast<size_t>(k) * kNR;
    const double* a = Ap + static_cast<size_t>(k) * kMR;
    for (int i = 0; i < kMR; ++i)
      for (int j = 0; j < kNR; ++j) c[i][j] += a[i] * b[j];
  }
  for (int i = 0; i < kMR; ++i) {
    double* cp = C + static_cast<size_t>(i) * ldc;
    for (int j = 0; j < kNR; ++j) cp[j] = acc ? cp[j] + c[i][j] : c[i][j];
  }
#endif
}

struct GemmScratch {
  std::vector<double> a_panel;
  std::vector<double> b_panel;
  double c_tmp[kMR * kNR];
};

inline GemmScratch& gemm_scratch() {
  thread_local GemmScratch s;
  return s;
}

// fetch_a(i, k) and fetch_b(k, j) give A and B elements in global coordinates.
template <class FA, class FB>
void gemm_generic(int M, int N, int K, FA&& fetch_a, FB&& fetch_b, double* C, int ldc,
                  bool accumulate) {
  if (M <= 0 || N <= 0) return;
  if (K <= 0) {
    if (!accumulate)
      for (int i = 0; i < M; ++i) std::memset(C + static_cast<size_t>(i) * ldc, 0, sizeof(double) * N);
    return;
  }
  GemmScratch& s = gemm_scratch();

  for (int n0 = 0; n0 < N; n0 += kNC) {
    const int nc = (N - n0 < kNC) ? (N - n0) : kNC;
    const int nstrips = (nc + kNR - 1) / kNR;
    for (int k0 = 0, kb = 0; k0 < K; k0 += kKC, ++kb) {
      const int kc = (K - k0 < kKC) ? (K - k0) : kKC;
      const bool acc = accumulate || kb > 0;

      s.b_panel.resize(static_cast<size_t>(nstrips) * kc * kNR);
      for (int js = 0; js < nstrips; ++js) {
        double* panel = s.b_panel.data() + static_cast<size_t>(js) * kc * kNR;
        const int j0 = n0 + js * kNR;
        const int jn = (nc - js * kNR < kNR) ? (nc - js * kNR) : kNR;
        for (int k = 0; k < kc; ++k) {
          double* row = panel + static_cast<size_t>(k) * kNR;
          for (int j = 0; j < jn; ++j) row[j] = fetch_b(k0 + k, j0 + j);
          for (int j = jn; j < kNR; ++j) row[j] = 0.0;
        }
      }

      for (int m0 = 0; m0 < M; m0 += kMC) {
        const int mc = (M - m0 < kMC) ? (M - m0) : kMC;
        const int mstrips = (mc + kMR - 1) / kMR;
        s.a_panel.resize(static_cast<size_t>(mstrips) * kc * kMR);
        for (int is = 0; is < mstrips; ++is) {
          double* panel = s.a_panel.data() + static_cast<size_t>(is) * kc * kMR;
          const int i0 = m0 + is * kMR;
          const int im = (mc - is * kMR < kMR) ? (mc - is * kMR) : kMR;
          for (int k = 0; k < kc; ++k) {
            double* row = panel + static_cast<size_t>(k) * kMR;
            for (int i = 0; i < im; ++i) row[i] = fetch_a(i0 + i, k0 + k);
            for (int i = im; i < kMR; ++i) row[i] = 0.0;
          }
        }

        for (int is = 0; is < mstrips; ++is) {
          const int i0 = m0 + is * kMR;
          const int im = (mc - is * kMR < kMR) ? (mc - is * kMR) : kMR;
          const double* ap = s.a_panel.data() + static_cast<size_t>(is) * kc * kMR;
          for (int js = 0; js < nstrips; ++js) {
            const int j0 = n0 + js * kNR;
            const int jn = (nc - js * kNR < kNR) ? (nc - js * kNR) : kNR;
            const double* bp = s.b_panel.data() + static_cast<size_t>(js) * kc * kNR;
            double* cp = C + static_cast<size_t>(i0) * ldc + j0;
            if (im == kMR && jn == kNR) {
              micro_kernel(kc, ap, bp, cp, ldc, acc);
            } else {
              micro_kernel(kc, ap, bp, s.c_tmp, kNR, false);
              for (int i = 0; i < im; ++i)
                for (int j = 0; j < jn; ++j) {
                  double v = s.c_tmp[i * kNR + j];
                  double* out = cp + static_cast<size_t>(i) * ldc + j;
                  *out = acc ? *out + v : v;
                }
            }
          }
        }
      }
    }
  }
}

// Plain row-major matrices.
inline void gemm(int M, int N, int K, const double* A, int lda, const double* B, int ldb,
                 double* C, int ldc, bool accumulate) {
  gemm_generic(
      M, N, K, [=](int i, int k) { return A[static_cast<size_t>(i) * lda + k]; },
      [=](int k, int j) { return B[static_cast<size_t>(k) * ldb + j]; }, C, ldc, accumulate);
}

}  // namespace fern::detail
