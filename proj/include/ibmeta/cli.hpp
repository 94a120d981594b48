#pragma once

namespace ibmeta {

// Parses argv and dispatches to the train / eval / predict / export-curves
// subcommands. Returns the process exit code: 0 success, 2 config or parse
// error, 3 numerical abort, 4 streaming unsupported for the kernel.
int run_cli(int argc, char** argv);

}  // namespace ibmeta
