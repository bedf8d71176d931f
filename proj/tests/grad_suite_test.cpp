#include <gtest/gtest.h>

#include "grad_suite.hpp"

namespace roadseg::testing {
namespace {

class GradSuite : public ::testing::TestWithParam<OpCase> {};

TEST_P(GradSuite, CentralDifferencesAgree) {
  const auto& op = GetParam();
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    const double err = op.run(static_cast<std::uint64_t>(seed));
    EXPECT_LT(err, op.tol) << op.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradSuite, ::testing::ValuesIn(op_cases()),
                         [](const auto& info) { return info.param.name; });

}  // namespace
}  // namespace roadseg::testing
