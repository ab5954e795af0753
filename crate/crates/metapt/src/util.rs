use rand::Rng;
use sha2::{Digest, Sha256};

/// Standard normal draws via Box-Muller, scaled by `std`.
pub(crate) fn randn_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos() * std);
        if out.len() < n {
            out.push(r * theta.sin() * std);
        }
    }
    out
}

/// Stable derived seed: distinct labels give independent streams from one
/// run seed.
pub(crate) fn subseed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Hex SHA-256 of a byte string.
pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty(), "mean_std: empty input");
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn randn_moments_are_sane() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = randn_vec(&mut rng, 20000, 0.02);
        let (mean, std) = mean_std(&xs);
        assert!(mean.abs() < 0.001, "mean {mean}");
        assert!((std - 0.02).abs() < 0.001, "std {std}");
    }

    #[test]
    fn subseed_separates_labels() {
        assert_ne!(subseed(1, "a"), subseed(1, "b"));
        assert_ne!(subseed(1, "a"), subseed(2, "a"));
        assert_eq!(subseed(7, "x"), subseed(7, "x"));
    }

    #[test]
    fn mean_std_is_population_form() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
