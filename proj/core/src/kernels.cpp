#include "kernels.hpp"

#include <algorithm>

#include <Eigen/Core>

namespace mspcaps::kernels {

namespace {

constexpr std::size_t kEigenThreshold = 16384;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void gemm_eigen(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
                const T* b, T* c, bool accumulate) {
    using Index = Eigen::Index;
    Eigen::Map<const RowMat<T>> am(a, static_cast<Index>(trans_a ? k : m), static_cast<Index>(trans_a ? m : k));
    Eigen::Map<const RowMat<T>> bm(b, static_cast<Index>(trans_b ? n : k), static_cast<Index>(trans_b ? k : n));
    Eigen::Map<RowMat<T>> cm(c, static_cast<Index>(m), static_cast<Index>(n));
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate) {
            cm.noalias() += lhs * rhs;
        } else {
            cm.noalias() = lhs * rhs;
        }
    };
    if (trans_a && trans_b) {
        run(am.transpose(), bm.transpose());
    } else if (trans_a) {
        run(am.transpose(), bm);
    } else if (trans_b) {
        run(am, bm.transpose());
    } else {
        run(am, bm);
    }
}

}  // namespace

template <typename T>
void gemm_naive(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                const T* a, const T* b, T* c, bool accumulate) {
    if (!accumulate) {
        std::fill(c, c + m * n, T(0));
    }
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = trans_a ? a[p * m + i] : a[i * k + p];
            if (trans_b) {
                for (std::size_t j = 0; j < n; ++j) {
                    crow[j] += av * b[j * k + p];
                }
            } else {
                const T* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
    if (m * n * k >= kEigenThreshold) {
        gemm_eigen(trans_a, trans_b, m, n, k, a, b, c, accumulate);
    } else {
        gemm_naive(trans_a, trans_b, m, n, k, a, b, c, accumulate);
    }
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, const float*,
                          const float*, float*, bool);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, const double*,
                           const double*, double*, bool);
template void gemm_naive<float>(bool, bool, std::size_t, std::size_t, std::size_t, const float*,
                                const float*, float*, bool);
template void gemm_naive<double>(bool, bool, std::size_t, std::size_t, std::size_t, const double*,
                                 const double*, double*, bool);

}  // namespace mspcaps::kernels
