#pragma once

namespace mspcaps::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kConfigError = 2,
    kDataError = 3,
    kNumericAbort = 4,
};

/// Entry point for the mspcaps tool; returns the process exit code.
int run(int argc, char** argv);

}  // namespace mspcaps::cli
