//! Shared fixtures for the criterion benches.

use headsplat::synthetic::{generate, SyntheticConfig, SyntheticScene};

/// Small synthetic scene sized for benchmarking.
pub fn bench_scene(resolution: usize) -> SyntheticScene {
    let cfg = SyntheticConfig {
        resolution,
        n_views: 2,
        n_frames: 2,
        ..SyntheticConfig::default()
    };
    generate(&cfg).expect("synthetic scene")
}
