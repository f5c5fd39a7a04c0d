//! Experiment orchestration: configuration, CLI commands, run artifacts.
