#pragma once

#include <iosfwd>

namespace divsum {

/// Entry point of the `divsum` executable with subcommands prepare, train,
/// eval, summarize, gradcheck and report. Returns 0 on success, 1 when the
/// command fails and 2 on usage errors (after printing the usage text).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace divsum
