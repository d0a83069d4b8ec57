#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "gradcheck.hpp"

namespace mspcaps::testkit {

struct NamedCheck {
    std::string name;
    GradCheckReport report;
};

/// One gradient check per differentiable op (and per mode/variant that
/// takes a separate backward path), float64 with h = 1e-5.
std::vector<NamedCheck> op_gradchecks();

/// Margin loss of the tiny model on a two-image batch in train mode, with
/// gradients checked on sampled coordinates of every parameter and of the
/// input pixels.
GradCheckReport end_to_end_gradcheck(std::size_t coords_per_tensor = 6);

struct OracleSummary {
    std::size_t cases = 0;
    std::size_t mismatches = 0;
    double max_abs_diff = 0.0;
    std::string first_failure;
};

/// Random small CAR instances (n_in <= 8, n_out <= 4, d <= 5) compared with
/// car_oracle for exact equality.
OracleSummary car_oracle_cases(std::size_t cases, std::uint64_t seed);

/// Random small dynamic-routing instances compared with
/// dynamic_routing_oracle for exact equality.
OracleSummary dr_oracle_cases(std::size_t cases, std::uint64_t seed);

}  // namespace mspcaps::testkit
