//! Frame rendering (placeholder).
