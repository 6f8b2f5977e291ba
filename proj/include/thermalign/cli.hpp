#pragma once

namespace thermalign {

// Parses argv and runs the requested pipeline stage(s). Returns the process
// exit code: 0 on success, 1 when a stage fails, 2 on unknown
// subcommands/flags (with usage on stderr).
int dispatch(int argc, const char* const* argv);

}  // namespace thermalign
