//! Classical unsupervised comparators: Lee-filtered log-ratio with Otsu or Yen
//! thresholds, and change-vector magnitude.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::reflect_index;
use crate::raster_io::{denormalize, Polarization, SarTile};

pub const DEFAULT_LEE_WINDOW: usize = 5;
pub const DEFAULT_BINS: usize = 256;

/// Adaptive MMSE speckle filter on a dB grid.
///
/// In dB the multiplicative speckle is additive, so the gain is
/// `k = max(0, 1 - s_n^2 / s_x^2)` with the local variance `s_x^2` over the
/// window and a global noise variance `s_n^2` taken as the median of the
/// local variances. Borders are reflected.
pub fn lee_filter(db: &Array2<f64>, window: usize) -> Result<Array2<f64>> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::Invalid(format!(
            "Lee window must be odd and at least 3, got {window}"
        )));
    }
    let (h, w) = db.dim();
    if h == 0 || w == 0 {
        return Ok(db.clone());
    }
    // Moments are taken around a sample value of the grid: this limits
    // cancellation in E[x^2] - m^2, and a constant grid becomes exactly zero.
    let center = median_of(db.iter().copied());
    let centered = db.mapv(|v| v - center);
    let (mean, var) = local_moments(&centered, window);
    let noise = median_of(var.iter().copied());
    Ok(Zip::from(&centered).and(&mean).and(&var).map_collect(|&x, &m, &v| {
        let k = if v > 0.0 { (1.0 - noise / v).max(0.0) } else { 0.0 };
        center + (m + k * (x - m))
    }))
}

/// Upper median, always one of the values.
fn median_of(values: impl Iterator<Item = f64>) -> f64 {
    let mut sorted: Vec<f64> = values.collect();
    sorted.sort_by(f64::total_cmp);
    sorted[sorted.len() / 2]
}

/// Windowed mean and variance via summed-area tables on a reflect-padded grid.
fn local_moments(grid: &Array2<f64>, window: usize) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = grid.dim();
    let r = window / 2;
    let (hp, wp) = (h + 2 * r, w + 2 * r);
    // integral images with a leading zero row and column
    let mut s1 = Array2::<f64>::zeros((hp + 1, wp + 1));
    let mut s2 = Array2::<f64>::zeros((hp + 1, wp + 1));
    for i in 0..hp {
        let si = reflect_index(i as isize - r as isize, h);
        for j in 0..wp {
            let sj = reflect_index(j as isize - r as isize, w);
            let v = grid[[si, sj]];
            s1[[i + 1, j + 1]] = v + s1[[i, j + 1]] + s1[[i + 1, j]] - s1[[i, j]];
            s2[[i + 1, j + 1]] = v * v + s2[[i, j + 1]] + s2[[i + 1, j]] - s2[[i, j]];
        }
    }
    let n = (window * window) as f64;
    let boxed = |s: &Array2<f64>, i: usize, j: usize| {
        s[[i + window, j + window]] - s[[i, j + window]] - s[[i + window, j]] + s[[i, j]]
    };
    let mut mean = Array2::zeros((h, w));
    let mut var = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let m = boxed(&s1, i, j) / n;
            mean[[i, j]] = m;
            var[[i, j]] = (boxed(&s2, i, j) / n - m * m).max(0.0);
        }
    }
    (mean, var)
}

/// How the per-channel log-ratios are combined into one map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPolicy {
    Vv,
    Vh,
    #[default]
    MeanAbs,
}

impl std::str::FromStr for ChannelPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vv" => Ok(ChannelPolicy::Vv),
            "vh" => Ok(ChannelPolicy::Vh),
            "mean_abs" => Ok(ChannelPolicy::MeanAbs),
            other => Err(Error::Config(format!("unknown channel policy '{other}'"))),
        }
    }
}

fn check_same_dims(a: &SarTile, b: &SarTile) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "tiles are {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `dB(later) - dB(earlier)` on Lee-filtered grids, combined per `policy`.
pub fn log_ratio(
    earlier: &SarTile,
    later: &SarTile,
    policy: ChannelPolicy,
    lee_window: usize,
) -> Result<Array2<f64>> {
    check_same_dims(earlier, later)?;
    let channel_ratio = |pol: Polarization| -> Result<Array2<f64>> {
        let a = lee_filter(&denormalize(earlier.channel(pol), pol), lee_window)?;
        let b = lee_filter(&denormalize(later.channel(pol), pol), lee_window)?;
        Ok(b - a)
    };
    Ok(match policy {
        ChannelPolicy::Vv => channel_ratio(Polarization::Vv)?,
        ChannelPolicy::Vh => channel_ratio(Polarization::Vh)?,
        ChannelPolicy::MeanAbs => {
            let vv = channel_ratio(Polarization::Vv)?;
            let vh = channel_ratio(Polarization::Vh)?;
            Zip::from(&vv)
                .and(&vh)
                .map_collect(|a, b| 0.5 * (a.abs() + b.abs()))
        }
    })
}

/// Per-pixel change-vector magnitude `sqrt(dVV^2 + dVH^2)` on normalized channels.
pub fn cva_magnitude(pre: &SarTile, post: &SarTile) -> Result<Array2<f64>> {
    check_same_dims(pre, post)?;
    Ok(Zip::from(pre.vv())
        .and(pre.vh())
        .and(post.vv())
        .and(post.vh())
        .map_collect(|a_vv, a_vh, b_vv, b_vh| (b_vv - a_vv).hypot(b_vh - a_vh)))
}

/// A min-max histogram of a real grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub min: f64,
    pub max: f64,
}

impl Histogram {
    pub fn new<'a>(values: impl IntoIterator<Item = &'a f64>, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Invalid(format!("need at least 2 bins, got {bins}")));
        }
        let values: Vec<f64> = values.into_iter().copied().collect();
        if values.is_empty() {
            return Err(Error::Empty("value grid"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite value {v} in histogram input")));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0u64; bins];
        let span = max - min;
        for v in values {
            let idx = if span > 0.0 {
                (((v - min) / span * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            counts[idx] += 1;
        }
        Ok(Histogram { counts, min, max })
    }

    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.counts.len() as f64
    }

    /// Upper edge of bin `k`.
    pub fn upper_edge(&self, k: usize) -> f64 {
        if k + 1 == self.counts.len() {
            self.max
        } else {
            self.min + (k + 1) as f64 * self.bin_width()
        }
    }
}

/// A histogram threshold: values strictly above `value` are positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    /// Last bin of the lower class.
    pub bin: usize,
    /// Set when no split separates two non-empty classes.
    pub degenerate: bool,
}

/// Otsu split of a histogram: the last bin of the lower class maximizing the
/// between-class variance, lowest bin on ties. `None` when no split leaves
/// both classes non-empty.
pub fn otsu_bin(counts: &[u64]) -> Option<usize> {
    let total: u64 = counts.iter().sum();
    let weighted: u128 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best: Option<(usize, f64)> = None;
    for (k, &c) in counts.iter().enumerate().take(counts.len().saturating_sub(1)) {
        n0 += c;
        s0 += k as u128 * c as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let score = otsu_score(n0, s0, n1, weighted - s0);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k)
}

/// Between-class variance up to a constant factor, from exact integer class sums.
pub fn otsu_score(n0: u64, s0: u128, n1: u64, s1: u128) -> f64 {
    // w0 w1 (m0 - m1)^2 is proportional to (n1 s0 - n0 s1)^2 / (n0 n1)
    let d = n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128;
    let d = d as f64;
    d * d / (n0 as f64 * n1 as f64)
}

/// Yen split of a histogram maximizing
/// `-ln(Q0 Q1) + 2 ln(P0 (1 - P0))`, with `P0` the lower-class probability and
/// `Q0`, `Q1` the class sums of squared probabilities. Lowest bin on ties.
pub fn yen_bin(counts: &[u64]) -> Option<usize> {
    let total: u64 = counts.iter().sum();
    let squares: u128 = counts.iter().map(|&c| c as u128 * c as u128).sum();
    let (mut n0, mut q0) = (0u64, 0u128);
    let mut best: Option<(usize, f64)> = None;
    for (k, &c) in counts.iter().enumerate().take(counts.len().saturating_sub(1)) {
        n0 += c;
        q0 += c as u128 * c as u128;
        if n0 == 0 || n0 == total {
            continue;
        }
        let score = yen_score(n0, q0, total, squares - q0);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k)
}

/// Yen criterion from exact integer class sums of counts and squared counts.
pub fn yen_score(n0: u64, q0: u128, total: u64, q1: u128) -> f64 {
    let n = total as f64;
    let p0 = n0 as f64 / n;
    let (sq0, sq1) = (q0 as f64 / (n * n), q1 as f64 / (n * n));
    -(sq0 * sq1).ln() + 2.0 * (p0 * (1.0 - p0)).ln()
}

fn threshold_from(hist: &Histogram, bin: Option<usize>) -> Threshold {
    match bin {
        Some(bin) => Threshold {
            value: hist.upper_edge(bin),
            bin,
            degenerate: false,
        },
        None => Threshold {
            value: hist.max,
            bin: hist.counts.len() - 1,
            degenerate: true,
        },
    }
}

pub fn otsu_threshold<'a>(values: impl IntoIterator<Item = &'a f64>, bins: usize) -> Result<Threshold> {
    let hist = Histogram::new(values, bins)?;
    let bin = otsu_bin(&hist.counts);
    Ok(threshold_from(&hist, bin))
}

pub fn yen_threshold<'a>(values: impl IntoIterator<Item = &'a f64>, bins: usize) -> Result<Threshold> {
    let hist = Histogram::new(values, bins)?;
    let bin = yen_bin(&hist.counts);
    Ok(threshold_from(&hist, bin))
}

/// Strictly-above binarization.
pub fn binarize_above(map: &Array2<f64>, threshold: f64) -> Array2<bool> {
    map.mapv(|v| v > threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    LogratioOtsu,
    LogratioYen,
    Cva,
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logratio-otsu" => Ok(BaselineMethod::LogratioOtsu),
            "logratio-yen" => Ok(BaselineMethod::LogratioYen),
            "cva" => Ok(BaselineMethod::Cva),
            other => Err(Error::Config(format!("unknown baseline method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub lee_window: usize,
    pub bins: usize,
    pub channel_policy: ChannelPolicy,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            lee_window: DEFAULT_LEE_WINDOW,
            bins: DEFAULT_BINS,
            channel_policy: ChannelPolicy::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineOutput {
    /// Signed log-ratio or CVA magnitude.
    pub map: Array2<f64>,
    /// The map the threshold applies to (absolute value for log-ratio).
    pub magnitude: Array2<f64>,
    pub threshold: Threshold,
    pub mask: Array2<bool>,
}

/// Runs a baseline end to end. Log-ratio maps are thresholded on their
/// absolute value so that both brightening and darkening count as change.
pub fn run_baseline(
    method: BaselineMethod,
    pre: &SarTile,
    post: &SarTile,
    options: &BaselineOptions,
) -> Result<BaselineOutput> {
    let map = match method {
        BaselineMethod::Cva => cva_magnitude(pre, post)?,
        _ => log_ratio(pre, post, options.channel_policy, options.lee_window)?,
    };
    let magnitude = map.mapv(f64::abs);
    let threshold = match method {
        BaselineMethod::LogratioYen => yen_threshold(&magnitude, options.bins)?,
        _ => otsu_threshold(&magnitude, options.bins)?,
    };
    let mask = binarize_above(&magnitude, threshold.value);
    Ok(BaselineOutput {
        map,
        magnitude,
        threshold,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;
    use ndarray::Array2;

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 5, 1).unwrap()
    }

    #[test]
    fn lee_constant_image_unchanged() {
        let g = Array2::from_elem((9, 7), -12.5);
        assert_eq!(lee_filter(&g, 5).unwrap(), g);
    }

    #[test]
    fn lee_attenuates_impulse() {
        let mut g = Array2::zeros((7, 7));
        g[[3, 3]] = 9.0;
        // a checkerboard floor keeps the median local variance positive
        for ((i, j), v) in g.indexed_iter_mut() {
            *v += if (i + j) % 2 == 0 { 0.5 } else { -0.5 };
        }
        let out = lee_filter(&g, 3).unwrap();
        assert!(out[[3, 3]] < g[[3, 3]]);
        let (mean, _) = local_moments(&g, 3);
        assert!(out[[3, 3]] >= mean[[3, 3]]);
        assert_eq!(out.dim(), g.dim());
    }

    #[test]
    fn lee_rejects_even_window() {
        let g = Array2::zeros((4, 4));
        assert!(lee_filter(&g, 4).is_err());
        assert!(lee_filter(&g, 1).is_err());
    }

    #[test]
    fn local_moments_hand_values() {
        let g = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64);
        let (mean, var) = local_moments(&g, 3);
        assert_abs_diff_eq!(mean[[1, 1]], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var[[1, 1]], 60.0 / 9.0, epsilon = 1e-12);
        // reflected corner window: rows {1,0,1}, cols {1,0,1}
        let corner = [4.0, 3.0, 4.0, 1.0, 0.0, 1.0, 4.0, 3.0, 4.0];
        assert_abs_diff_eq!(mean[[0, 0]], corner.iter().sum::<f64>() / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn log_ratio_identities() {
        let vv = Array2::from_shape_fn((8, 8), |(i, j)| -15.0 + ((i * 7 + j * 3) % 5) as f64);
        let vh = vv.mapv(|v| v - 5.0);
        let a = SarTile::from_db(&vv, &vh, date()).unwrap();
        let b = SarTile::from_db(&(&vv + 3.0), &(&vh + 3.0), date()).unwrap();
        for policy in [ChannelPolicy::Vv, ChannelPolicy::Vh, ChannelPolicy::MeanAbs] {
            let zero = log_ratio(&a, &a, policy, 5).unwrap();
            assert!(zero.iter().all(|&v| v == 0.0));
            let shift = log_ratio(&a, &b, policy, 5).unwrap();
            assert!(shift.iter().all(|&v| (v - 3.0).abs() < 1e-9), "{policy:?}");
        }
        let ab = log_ratio(&a, &b, ChannelPolicy::Vv, 3).unwrap();
        let ba = log_ratio(&b, &a, ChannelPolicy::Vv, 3).unwrap();
        assert_eq!(ab, -ba);
    }

    #[test]
    fn cva_pythagorean() {
        let z = Array2::zeros((2, 2));
        let pre = SarTile::new(z.clone(), z.clone(), date()).unwrap();
        let post = SarTile::new(z.mapv(|_: f64| 0.3), z.mapv(|_: f64| 0.4), date()).unwrap();
        let m = cva_magnitude(&pre, &post).unwrap();
        assert!(m.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(cva_magnitude(&pre, &pre).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bimodal_thresholds_separate_modes() {
        let values: Vec<f64> = (0..100).map(|i| if i < 60 { 0.0 } else { 1.0 }).collect();
        for t in [
            otsu_threshold(&values, 256).unwrap(),
            yen_threshold(&values, 256).unwrap(),
        ] {
            assert!(t.value > 0.0 && t.value < 1.0);
            assert!(!t.degenerate);
        }
    }

    #[test]
    fn constant_data_is_degenerate() {
        let values = [2.5; 10];
        let t = otsu_threshold(&values, 256).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.value, 2.5);
        assert!(yen_threshold(&values, 256).unwrap().degenerate);
    }

    #[test]
    fn otsu_tie_prefers_lower_bin() {
        // symmetric histogram: splits after bin 1 and bin 2 score equally
        assert_eq!(otsu_bin(&[1, 1, 0, 1, 1]), Some(1));
    }

    #[test]
    fn run_baseline_shapes() {
        let vv = Array2::from_shape_fn((16, 16), |(i, _)| if i < 8 { -8.0 } else { -12.0 });
        let a = SarTile::from_db(&vv, &(&vv - 4.0), date()).unwrap();
        let dark = Array2::from_shape_fn((16, 16), |(i, j)| {
            if i < 8 && j < 8 { -20.0 } else { vv[[i, j]] }
        });
        let b = SarTile::from_db(&dark, &(&dark - 4.0), date()).unwrap();
        for m in [BaselineMethod::LogratioOtsu, BaselineMethod::LogratioYen, BaselineMethod::Cva] {
            let out = run_baseline(m, &a, &b, &BaselineOptions::default()).unwrap();
            assert_eq!(out.mask.dim(), (16, 16));
            assert!(out.mask[[2, 2]], "{m:?}");
            assert!(!out.mask[[14, 14]], "{m:?}");
        }
    }
}
