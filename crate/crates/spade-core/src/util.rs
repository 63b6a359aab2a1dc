//! Small numeric helpers shared across modules.

/// Nearest-rank order statistic index (1-based): the smallest integer rank
/// with `rank >= q * n`.
///
/// Products within 1e-9 of an integer snap to it, so that e.g. `0.9 * 100`
/// yields rank 90 despite `0.9` not being exactly representable.
pub(crate) fn nearest_rank(q: f64, n: usize) -> usize {
    let prod = q * n as f64;
    let snapped = if (prod - prod.round()).abs() < 1e-9 {
        prod.round()
    } else {
        prod.ceil()
    };
    (snapped as usize).clamp(1, n)
}

/// SplitMix64 finalizer, used to derive decorrelated per-cell seeds.
pub(crate) fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
