//! Fixed inputs shared by the kernel benchmarks.

use fluxct_core::nn::Tensor;
use fluxct_core::phantom::rock_phantom;
use fluxct_core::tomo::{as_attenuation, forward_project};
use fluxct_core::{Geometry, Image, RockPhantomSpec, Sinogram};

/// Default rock phantom at `size`, seed 7.
pub fn rock(size: usize) -> Image {
    let spec = RockPhantomSpec {
        size,
        seed: 7,
        ..RockPhantomSpec::default()
    };
    rock_phantom(&spec).expect("default rock spec is valid")
}

/// Attenuation sinogram of the 128-px rock on the desk geometry.
pub fn desk_sinogram() -> Sinogram {
    let sino = forward_project(&rock(128), &Geometry::desk_default()).expect("desk geometry covers 128 px");
    as_attenuation(&sino).expect("noiseless line integrals")
}

/// Deterministic pseudo-random activations in [-1, 1).
pub fn activations(channels: usize, height: usize, width: usize, salt: u64) -> Tensor<f32> {
    let n = channels * height * width;
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let values = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect();
    Tensor::from_vec(channels, height, width, values).expect("length matches shape")
}
