//! First acquisition date at which change against a reference becomes
//! significant.
//!
//! The reference and every window image are replicated to the model's
//! series length, encoded, and compared pixel by pixel. The reference is
//! encoded once and reused for every window date.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::inference::{binarize, change_map_from_latents, encode_stack, BinaryChangeMap, PatchEncoder};
use crate::patching::replicate_post;
use crate::raster_io::SarTile;

pub const DEFAULT_FIXED_THRESHOLD: f64 = 5.0;

/// Percentage of changed pixels, `0..=100`.
pub fn percentage_change(mask: &BinaryChangeMap) -> f64 {
    let total = mask.mask.len();
    if total == 0 {
        return 0.0;
    }
    100.0 * mask.changed_pixels() as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Median of the window's percentages.
    Median,
    /// Fixed percentage.
    Fixed(f64),
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Fixed(DEFAULT_FIXED_THRESHOLD)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DateRecord {
    pub date: NaiveDate,
    pub percentage_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePointResult {
    pub records: Vec<DateRecord>,
    pub threshold_used: f64,
    pub change_point: Option<NaiveDate>,
}

/// Median, averaging the two central values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Applies the threshold rule to precomputed per-date percentages.
pub fn locate_change_point(
    dates: &[NaiveDate],
    percentages: &[f64],
    mode: ThresholdMode,
) -> Result<ChangePointResult> {
    if dates.is_empty() {
        return Err(Error::Empty("change-point window"));
    }
    if dates.len() != percentages.len() {
        return Err(Error::Shape(format!(
            "{} dates but {} percentages",
            dates.len(),
            percentages.len()
        )));
    }
    if dates.windows(2).any(|d| d[0] >= d[1]) {
        return Err(Error::Invalid("window dates must be strictly increasing".into()));
    }
    if let Some(&bad) = percentages.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(Error::Invalid(format!("percentage change {bad} outside [0, 100]")));
    }
    let threshold_used = match mode {
        ThresholdMode::Median => median(percentages).expect("non-empty, finite"),
        ThresholdMode::Fixed(v) if v.is_finite() => v,
        ThresholdMode::Fixed(v) => return Err(Error::Invalid(format!("fixed threshold {v} is not finite"))),
    };
    let change_point = dates
        .iter()
        .zip(percentages)
        .find(|(_, &p)| p > threshold_used)
        .map(|(&d, _)| d);
    Ok(ChangePointResult {
        records: dates
            .iter()
            .zip(percentages)
            .map(|(&date, &percentage_change)| DateRecord { date, percentage_change })
            .collect(),
        threshold_used,
        change_point,
    })
}

/// Runs the change-point framework on a reference image and an ordered
/// window of later acquisitions.
pub fn detect_change_point(
    reference: &SarTile,
    window: &[SarTile],
    encoder: &dyn PatchEncoder,
    kind: DivergenceKind,
    map_threshold: f64,
    mode: ThresholdMode,
    batch_size: usize,
) -> Result<ChangePointResult> {
    let first = window.first().ok_or(Error::Empty("change-point window"))?;
    if reference.acquisition_date >= first.acquisition_date {
        return Err(Error::Invalid(format!(
            "reference date {} does not predate the window start {}",
            reference.acquisition_date, first.acquisition_date
        )));
    }
    if let Some(tile) = window.iter().find(|t| t.dim() != reference.dim()) {
        return Err(Error::Shape(format!(
            "window image {} is {:?}, reference is {:?}",
            tile.acquisition_date,
            tile.dim(),
            reference.dim()
        )));
    }
    let dates: Vec<NaiveDate> = window.iter().map(|t| t.acquisition_date).collect();
    if dates.windows(2).any(|d| d[0] >= d[1]) {
        return Err(Error::Invalid("window dates must be strictly increasing".into()));
    }
    let t = encoder.timesteps();
    let dims = reference.dim();
    let reference_latents = encode_stack(encoder, &replicate_post(reference, t)?, batch_size)?;
    let mut percentages = Vec::with_capacity(window.len());
    for tile in window {
        let latents = encode_stack(encoder, &replicate_post(tile, t)?, batch_size)?;
        let map = change_map_from_latents(&reference_latents, &latents, dims, kind)?;
        let pct = percentage_change(&binarize(&map, map_threshold));
        log::debug!("{}: {pct:.3}% changed", tile.acquisition_date);
        percentages.push(pct);
    }
    locate_change_point(&dates, &percentages, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn dates(n: usize) -> Vec<NaiveDate> {
        let start = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
        (0..n).map(|i| start + chrono::Days::new(12 * i as u64)).collect()
    }

    #[test]
    fn percentages_of_simple_masks() {
        let mask = |f: fn(usize) -> bool| BinaryChangeMap {
            mask: Array2::from_shape_fn((64, 64), |(_, c)| f(c)),
            threshold: 0.0,
        };
        assert_eq!(percentage_change(&mask(|_| false)), 0.0);
        assert_eq!(percentage_change(&mask(|_| true)), 100.0);
        assert_eq!(percentage_change(&mask(|c| c < 32)), 50.0);
    }

    #[test]
    fn median_rule_on_hand_example() {
        let d = dates(4);
        let r = locate_change_point(&d, &[1.0, 1.0, 40.0, 42.0], ThresholdMode::Median).unwrap();
        assert_eq!(r.threshold_used, 20.5);
        assert_eq!(r.change_point, Some(d[2]));
    }

    #[test]
    fn constant_percentages_have_no_point() {
        let d = dates(5);
        let r = locate_change_point(&d, &[0.0; 5], ThresholdMode::Median).unwrap();
        assert_eq!(r.change_point, None);
    }

    #[test]
    fn exceedance_is_strict() {
        let d = dates(3);
        let r = locate_change_point(&d, &[5.0, 5.0, 6.0], ThresholdMode::Fixed(5.0)).unwrap();
        assert_eq!(r.change_point, Some(d[2]));
    }

    #[test]
    fn rejects_bad_windows() {
        assert!(locate_change_point(&[], &[], ThresholdMode::Median).is_err());
        let mut d = dates(3);
        d.swap(0, 1);
        assert!(locate_change_point(&d, &[0.0; 3], ThresholdMode::Median).is_err());
    }
}
