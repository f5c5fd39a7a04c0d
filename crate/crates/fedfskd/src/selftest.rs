//! Invariant suites runnable from the CLI.
