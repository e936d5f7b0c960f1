#pragma once

// Self-checks of the guidance algebra and sampler against closed-form Gaussian
// oracles; backs the `oracle-verify` command.

#include <cstdint>
#include <string>
#include <vector>

namespace hld {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct OracleSuiteOptions {
    std::uint64_t seed = 0;
    int chains = 10000;    // sampler moment check on a 2-D Gaussian
    int draws = 1000;      // random draws for the algebraic identities
    int guided_chains = 4000;
};

std::vector<CheckResult> run_oracle_suite(const OracleSuiteOptions &opt);

} // namespace hld
