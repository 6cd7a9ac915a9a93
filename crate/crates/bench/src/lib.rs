//! Fixtures shared by the benchmarks.

use hiddensym::{he_init, Architecture, Network};

/// He-initialized networks of increasing size, labelled by architecture.
pub fn fixtures() -> Vec<(String, Network)> {
    ["5,5,5,5,1", "10,10,10,10,1", "15,15,15,15,1", "5,10,10,10,10,1"]
        .iter()
        .map(|s| {
            let arch: Architecture = s.parse().expect("valid architecture");
            (arch.to_string(), he_init(&arch, 1))
        })
        .collect()
}
