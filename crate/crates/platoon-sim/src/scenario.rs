//! Scenario parsing and the run entry point (placeholder).
