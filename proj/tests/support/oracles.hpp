#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace mspcaps::testkit {

// Plain nested-loop references over flat row-major arrays. They evaluate
// every expression in the same order as the library so float64 results
// can be compared for equality.

struct CarOracleInput {
    std::size_t batch = 1;
    std::size_t n1 = 0, d1 = 0, h1 = 0, w1 = 0;  // fine capsules on an h1 x w1 grid
    std::size_t n2 = 0, d2 = 0, h2 = 0, w2 = 0;  // coarse capsules on an h2 x w2 grid
    std::size_t n_out = 0, d_out = 0;
    bool shared = true;
    bool softmax_over_outputs = true;
    std::vector<double> u1, u2;  // B x n x d
    std::vector<double> W1;      // n_out x n1 x d1 x d_out (unshared only)
    std::vector<double> W2;      // n_out x n2 x d2 x d_out
};

/// B x n_out x d_out squashed outputs of cross-agreement routing (no dropout).
std::vector<double> car_oracle(const CarOracleInput& in);

/// B x n_out x d_out outputs of routing-by-agreement with zero initial logits.
std::vector<double> dynamic_routing_oracle(const std::vector<double>& u, const std::vector<double>& W,
                                           std::size_t batch, std::size_t n_in, std::size_t d_in, std::size_t n_out,
                                           std::size_t d_out, std::size_t iters);

/// Squash of each length-d row.
std::vector<double> squash_oracle(const std::vector<double>& v, std::size_t d);

/// Direct six-loop cross-correlation, B x C x H x W input, O x C x k x k weight.
std::vector<double> conv2d_oracle(const std::vector<double>& x, const std::vector<double>& w,
                                  const std::optional<std::vector<double>>& bias, std::size_t batch, std::size_t c,
                                  std::size_t h, std::size_t wd, std::size_t o, std::size_t k, std::size_t stride,
                                  std::size_t pad);

/// Margin loss written out per capsule, averaged over the batch.
double margin_loss_oracle(const std::vector<double>& caps, const std::vector<int>& labels, std::size_t batch,
                          std::size_t classes, std::size_t d, double m_plus = 0.9, double m_minus = 0.1,
                          double lambda = 0.5);

}  // namespace mspcaps::testkit
