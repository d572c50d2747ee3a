#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lcdlab {

/// Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown
/// subcommand or flag), 3 invalid configuration, 4 corrupt or unreadable
/// file, 5 numeric failure during training. Failures print one line
/// `lcdlab: error code=<n> kind=<kind> msg="<text>"` to `err`.
int cli_dispatch(int argc, char** argv);
/// `args` excludes the program name.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lcdlab
