/// Derives a named sub-seed from a top-level seed.
///
/// Every random stream in the toolkit (data shuffling, weight init, dropout,
/// teacher-forcing coins) is seeded through this fan-out so one `--seed` pins
/// the entire run while the streams stay independent of one another.
pub fn sub_seed(base: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer to decorrelate.
    let mut h: u64 = 0xcbf29ce484222325 ^ base;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = h.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
