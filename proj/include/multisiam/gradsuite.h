#pragma once

#include <cstdint>
#include <vector>

#include "multisiam/gradcheck.h"

namespace msiam {

/// Finite-difference checks over every differentiable operation, each run
/// with `seeds` independent random inputs. One report per operation holding
/// the worst relative error across seeds. Kinked operations are sampled
/// away from their kinks.
std::vector<GradCheckReport> run_gradient_suite(std::size_t seeds,
                                                std::uint64_t base_seed = 0);

} // namespace msiam
