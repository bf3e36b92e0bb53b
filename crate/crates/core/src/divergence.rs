//! Differences between two diagonal-Gaussian latent distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LatentDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Kld,
    Jsd,
    Ed,
    Cosd,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 4] = [
        DivergenceKind::Kld,
        DivergenceKind::Jsd,
        DivergenceKind::Ed,
        DivergenceKind::Cosd,
    ];

    /// Binarization threshold used when none is given.
    pub fn default_threshold(self) -> f64 {
        match self {
            DivergenceKind::Cosd => -0.9,
            _ => 0.0,
        }
    }

    pub fn evaluate(self, a: &LatentDistribution, b: &LatentDistribution) -> Result<f64> {
        check_dims(a, b)?;
        Ok(match self {
            DivergenceKind::Kld => kld(a, b),
            DivergenceKind::Jsd => jsd(a, b),
            DivergenceKind::Ed => ed(a, b),
            DivergenceKind::Cosd => return cosd(a, b),
        })
    }
}

impl std::str::FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kld" => Ok(DivergenceKind::Kld),
            "jsd" => Ok(DivergenceKind::Jsd),
            "ed" => Ok(DivergenceKind::Ed),
            "cosd" => Ok(DivergenceKind::Cosd),
            other => Err(Error::Config(format!("unknown divergence '{other}'"))),
        }
    }
}

impl std::fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DivergenceKind::Kld => "kld",
            DivergenceKind::Jsd => "jsd",
            DivergenceKind::Ed => "ed",
            DivergenceKind::Cosd => "cosd",
        })
    }
}

fn check_dims(a: &LatentDistribution, b: &LatentDistribution) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "latent dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// KL(N1 || N2) for diagonal Gaussians parameterized by standard deviations.
fn kld_std(mu1: &[f64], s1: &[f64], mu2: &[f64], s2: &[f64]) -> f64 {
    mu1.iter()
        .zip(s1)
        .zip(mu2.iter().zip(s2))
        .map(|((&m1, &a), (&m2, &b))| {
            (b / a).ln() + (a * a + (m1 - m2) * (m1 - m2)) / (2.0 * b * b) - 0.5
        })
        .sum()
}

/// Kullback-Leibler divergence `KL(d1 || d2)`.
pub fn kld(d1: &LatentDistribution, d2: &LatentDistribution) -> f64 {
    kld_std(&d1.mean, &d1.std_dev(), &d2.mean, &d2.std_dev())
}

/// Jensen-Shannon divergence against the moment-averaged Gaussian
/// `N((mu1 + mu2) / 2, (sigma1 + sigma2) / 2)`.
pub fn jsd(d1: &LatentDistribution, d2: &LatentDistribution) -> f64 {
    let (s1, s2) = (d1.std_dev(), d2.std_dev());
    let mu_m: Vec<f64> = d1.mean.iter().zip(&d2.mean).map(|(a, b)| 0.5 * (a + b)).collect();
    let s_m: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kld_std(&d1.mean, &s1, &mu_m, &s_m) + 0.5 * kld_std(&d2.mean, &s2, &mu_m, &s_m)
}

/// Euclidean distance between the means.
pub fn ed(d1: &LatentDistribution, d2: &LatentDistribution) -> f64 {
    d1.mean
        .iter()
        .zip(&d2.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Negative cosine similarity of the means, in `[-1, 1]`.
pub fn cosd(d1: &LatentDistribution, d2: &LatentDistribution) -> Result<f64> {
    let n1 = d1.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = d2.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    // the normalized dot product of a vector with itself can round below 1
    if d1.mean == d2.mean {
        return Ok(-1.0);
    }
    let dot: f64 = d1
        .mean
        .iter()
        .zip(&d2.mean)
        .map(|(a, b)| (a / n1) * (b / n2))
        .sum();
    Ok((-dot).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dist(mean: Vec<f64>, log_variance: Vec<f64>) -> LatentDistribution {
        LatentDistribution::new(mean, log_variance).unwrap()
    }

    #[test]
    fn kld_examples() {
        let a = dist(vec![0.3, -1.0], vec![0.2, -0.4]);
        assert_abs_diff_eq!(kld(&a, &a), 0.0, epsilon = 1e-15);
        let unit1 = dist(vec![1.0, 2.0], vec![0.0, 0.0]);
        let unit2 = dist(vec![-1.0, 0.5], vec![0.0, 0.0]);
        assert_abs_diff_eq!(kld(&unit1, &unit2), 0.5 * (4.0 + 2.25), epsilon = 1e-12);
    }

    #[test]
    fn kld_asymmetry_hand_values() {
        // mu=0, sigma=1 vs mu=1, sigma=2
        let p = dist(vec![0.0], vec![0.0]);
        let q = dist(vec![1.0], vec![(4.0f64).ln()]);
        // ln 2 + (1 + 1) / 8 - 1/2
        assert_abs_diff_eq!(kld(&p, &q), 2f64.ln() - 0.25, epsilon = 1e-12);
        // ln(1/2) + (4 + 1) / 2 - 1/2
        assert_abs_diff_eq!(kld(&q, &p), 2.0 - 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn jsd_hand_value() {
        // unit variances, means 0 and 1 on one axis: the mixture has mean 1/2 and
        // std 1, so each half is (1/2)^2 / 2 = 1/8 and the sum is 1/8.
        let a = dist(vec![0.0, 3.0], vec![0.0, 0.0]);
        let b = dist(vec![1.0, 3.0], vec![0.0, 0.0]);
        assert_abs_diff_eq!(jsd(&a, &b), 0.125, epsilon = 1e-12);
        assert_eq!(jsd(&a, &b), jsd(&b, &a));
        assert_abs_diff_eq!(jsd(&a, &a), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn ed_and_cosd_examples() {
        let a = dist(vec![1.0, 0.0], vec![0.0, 0.0]);
        let b = dist(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(ed(&a, &b), 1.0);
        assert_eq!(ed(&a, &a), 0.0);
        let c = dist(vec![0.0, 2.0], vec![0.0, 0.0]);
        let d = dist(vec![-1.0, 0.0], vec![0.0, 0.0]);
        assert_abs_diff_eq!(cosd(&a, &a).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosd(&a, &c).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosd(&a, &d).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(cosd(&a, &b), Err(Error::ZeroNorm)));
    }

    #[test]
    fn thresholds_and_parsing() {
        assert_eq!(DivergenceKind::Cosd.default_threshold(), -0.9);
        assert_eq!(DivergenceKind::Kld.default_threshold(), 0.0);
        assert_eq!("CosD".parse::<DivergenceKind>().unwrap(), DivergenceKind::Cosd);
        assert!("l1".parse::<DivergenceKind>().is_err());
    }
}
