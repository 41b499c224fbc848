//! Portable random streams.
//!
//! Every random draw in the crate goes through [`Pcg32`] (PCG-XSH-RR with a
//! 64-bit state and 32-bit output). Independent streams are keyed by seeds
//! derived with the splitmix64 finalizer, so corpora and training batches are
//! byte-identical across platforms.
//!
//! Conversions from raw `u32` outputs are defined here rather than borrowed
//! from `rand` so that the documented draw sequence never depends on a
//! third-party conversion routine:
//!
//! * [`unit_f64`]: `next_u32() / 2^32`, one output, in `[0, 1)`.
//! * [`below`]: rejection sampling on `next_u32()`, accepting `x < floor(2^32 / n) * n`
//!   and returning `x % n`.

use rand::Rng;
pub use rand_pcg::Pcg32;

/// Default PCG stream selector (the reference implementation's increment `>> 1`).
pub const PCG_STREAM: u64 = 0x0a02_bdbf_7bb3_c0a7;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// The splitmix64 output finalizer. A bijection on `u64`.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of element `index` in the splitmix64 stream started at `master`.
///
/// For a fixed `master` this is injective in `index`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(master.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// A PCG32 generator positioned at the start of the stream for `seed`.
pub fn pcg(seed: u64) -> Pcg32 {
    Pcg32::new(seed, PCG_STREAM)
}

/// Uniform draw in `[0, 1)` with 32 bits of resolution.
pub fn unit_f64<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    f64::from(rng.next_u32()) * (1.0 / 4_294_967_296.0)
}

/// Unbiased integer in `[0, n)`. Panics when `n == 0`.
pub fn below<R: Rng + ?Sized>(rng: &mut R, n: u32) -> u32 {
    assert!(n > 0, "below(0)");
    let limit = (u64::from(u32::MAX) + 1) / u64::from(n) * u64::from(n);
    loop {
        let x = rng.next_u32();
        if u64::from(x) < limit {
            return x % n;
        }
    }
}
