//! Placeholder library target; the interesting code lives in `benches/`.
