//! Small numeric and hashing helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash that is stable across platforms and compiler releases.
pub fn stable_hash(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET ^ mix64(seed);
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        // part separator so ("ab","c") and ("a","bc") differ
        h ^= 0xff;
        h = h.wrapping_mul(FNV_PRIME);
    }
    mix64(h)
}

pub fn stable_hash_str(seed: u64, parts: &[&str]) -> u64 {
    let bytes: Vec<&[u8]> = parts.iter().map(|p| p.as_bytes()).collect();
    stable_hash(seed, &bytes)
}

/// Uniform draw in [0, 1) from a hash value (53 high bits).
pub fn unit_from_hash(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn rng_from(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash_str(seed, parts))
}

/// Logistic sigmoid with `sigmoid(-z) == 1 - sigmoid(z)` holding bit-exactly.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        1.0 - 1.0 / (1.0 + z.exp())
    }
}

/// Derivative of the sigmoid.
pub fn sigmoid_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s)
}

/// `0.5 + d` for a centered probability offset, computed so that
/// `centered_prob(d) + centered_prob(-d) == 1` exactly.
pub fn centered_prob(d: f64) -> f64 {
    if d >= 0.0 {
        0.5 + d
    } else {
        1.0 - (0.5 - d)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    debug_assert_eq!(xs.len(), ys.len());
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if xs.is_empty() || constant(xs) || constant(ys) {
        return None;
    }
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Half-width of a 95% normal-approximation interval for a proportion.
pub fn binomial_half_width(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.96 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Whitespace token count; the length proxy used throughout.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_complement_is_exact() {
        for &z in &[0.0, 1e-17, 0.3, 1.7, 12.0, 40.0, 700.0, -3.2] {
            assert_eq!(sigmoid(z) + sigmoid(-z), 1.0, "z = {z}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn centered_prob_complement_is_exact() {
        for &d in &[0.0, 1e-300, 2f64.powi(-60), 0.123_456_789, 0.4999, 0.5] {
            assert_eq!(centered_prob(d) + centered_prob(-d), 1.0, "d = {d}");
        }
    }

    #[test]
    fn stable_hash_separates_parts() {
        assert_ne!(stable_hash_str(1, &["ab", "c"]), stable_hash_str(1, &["a", "bc"]));
        assert_eq!(stable_hash_str(9, &["x"]), stable_hash_str(9, &["x"]));
        assert_ne!(stable_hash_str(9, &["x"]), stable_hash_str(10, &["x"]));
    }

    #[test]
    fn pearson_edge_cases() {
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]), None);
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
    }
}
