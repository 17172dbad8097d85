#pragma once

#include <iosfwd>

namespace mclseq::cli {

enum ExitCode : int {
  kSuccess = 0,
  kFailure = 1,
  kConfigError = 2,
  kDivergence = 3,
  kAcceptanceFailure = 4,
};

/// Entry point of the `mclseq` tool: bounds, train, decode, eval, reproduce-fig1.
int main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mclseq::cli
