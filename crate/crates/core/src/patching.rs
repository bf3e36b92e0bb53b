//! Time-series stacks, reflect padding, stride-based patch extraction and
//! training augmentation.

use chrono::NaiveDate;
use ndarray::{s, Array4, Array5, ArrayView4, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster_io::SarTile;

/// Number of input channels: VV, VH and an all-zero third channel.
pub const INPUT_CHANNELS: usize = 3;

/// `T` co-registered acquisitions as a `T x H x W x 3` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesStack {
    pub values: Array4<f64>,
    pub dates: Vec<NaiveDate>,
}

impl TimeSeriesStack {
    pub fn timesteps(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    /// Spatial size (H, W).
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w, _) = self.values.dim();
        (h, w)
    }
}

fn write_tile(mut slot: ndarray::ArrayViewMut3<f64>, tile: &SarTile) {
    slot.index_axis_mut(Axis(2), 0).assign(tile.vv());
    slot.index_axis_mut(Axis(2), 1).assign(tile.vh());
}

/// Stacks `t` pre-event tiles in date order.
pub fn stack_pre_series(tiles: &[SarTile], t: usize) -> Result<TimeSeriesStack> {
    if tiles.len() != t {
        return Err(Error::Invalid(format!(
            "expected {t} pre-event tiles, got {}",
            tiles.len()
        )));
    }
    let first = tiles.first().ok_or(Error::Empty("pre-event series"))?;
    let (h, w) = first.dim();
    for tile in tiles {
        if tile.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "tile dated {} is {:?}, expected {:?}",
                tile.acquisition_date,
                tile.dim(),
                (h, w)
            )));
        }
    }
    if let Some(pair) = tiles
        .windows(2)
        .find(|p| p[0].acquisition_date >= p[1].acquisition_date)
    {
        return Err(Error::Invalid(format!(
            "pre-event dates must be strictly increasing ({} then {})",
            pair[0].acquisition_date, pair[1].acquisition_date
        )));
    }
    let mut values = Array4::zeros((t, h, w, INPUT_CHANNELS));
    for (slot, tile) in values.outer_iter_mut().zip(tiles) {
        write_tile(slot, tile);
    }
    Ok(TimeSeriesStack {
        values,
        dates: tiles.iter().map(|t| t.acquisition_date).collect(),
    })
}

/// Repeats one tile `t` times.
pub fn replicate_post(tile: &SarTile, t: usize) -> Result<TimeSeriesStack> {
    if t == 0 {
        return Err(Error::Invalid("time-series length must be at least 1".into()));
    }
    let (h, w) = tile.dim();
    let mut values = Array4::zeros((t, h, w, INPUT_CHANNELS));
    for slot in values.outer_iter_mut() {
        write_tile(slot, tile);
    }
    Ok(TimeSeriesStack {
        values,
        dates: vec![tile.acquisition_date; t],
    })
}

/// Mirror index into `[0, n)` without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Top/left and bottom/right padding that maps every pixel to exactly one
/// stride-1 patch of size `p`.
pub fn inference_padding(p: usize) -> (usize, usize) {
    (p / 2, p / 2 - 1)
}

/// Reflect-pads both spatial axes.
pub fn pad_reflect(
    stack: &TimeSeriesStack,
    top_left: usize,
    bottom_right: usize,
) -> Result<TimeSeriesStack> {
    let (t, h, w, c) = stack.values.dim();
    if top_left.max(bottom_right) >= h.min(w) {
        return Err(Error::Invalid(format!(
            "padding {top_left}/{bottom_right} must be smaller than min(H, W) = {}",
            h.min(w)
        )));
    }
    let (hp, wp) = (h + top_left + bottom_right, w + top_left + bottom_right);
    let mut out = Array4::zeros((t, hp, wp, c));
    for r in 0..hp {
        let sr = reflect_index(r as isize - top_left as isize, h);
        for col in 0..wp {
            let sc = reflect_index(col as isize - top_left as isize, w);
            out.slice_mut(s![.., r, col, ..])
                .assign(&stack.values.slice(s![.., sr, sc, ..]));
        }
    }
    Ok(TimeSeriesStack {
        values: out,
        dates: stack.dates.clone(),
    })
}

/// Removes `top_left`/`bottom_right` margins added by [`pad_reflect`].
pub fn crop(stack: &TimeSeriesStack, top_left: usize, bottom_right: usize) -> Result<TimeSeriesStack> {
    let (_, h, w, _) = stack.values.dim();
    if top_left + bottom_right >= h.min(w) {
        return Err(Error::Invalid("crop margins exceed the stack".into()));
    }
    Ok(TimeSeriesStack {
        values: stack
            .values
            .slice(s![.., top_left..h - bottom_right, top_left..w - bottom_right, ..])
            .to_owned(),
        dates: stack.dates.clone(),
    })
}

/// `N` patches of `T x p x p x 3` with their top-left anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub patches: Array5<f64>,
    /// Top-left corner in padded coordinates, which is the owning pixel of
    /// the unpadded image under [`inference_padding`].
    pub anchors: Vec<(usize, usize)>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Number of patch positions along one axis.
pub fn positions_along(len: usize, p: usize, stride: usize) -> usize {
    if p > len || stride == 0 {
        0
    } else {
        (len - p) / stride + 1
    }
}

pub fn patch_count(hp: usize, wp: usize, p: usize, stride: usize) -> usize {
    positions_along(hp, p, stride) * positions_along(wp, p, stride)
}

/// Cuts every `p x p` patch at the given stride, row-major over anchors.
pub fn extract_patches(stack: &TimeSeriesStack, p: usize, stride: usize) -> Result<PatchBatch> {
    let (hp, wp) = stack.spatial();
    if stride == 0 {
        return Err(Error::Invalid("stride must be positive".into()));
    }
    if p == 0 || p > hp || p > wp {
        return Err(Error::Shape(format!(
            "patch size {p} does not fit a {hp}x{wp} stack"
        )));
    }
    let rows = positions_along(hp, p, stride);
    let cols = positions_along(wp, p, stride);
    let anchors: Vec<_> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride)))
        .collect();
    extract_patches_at(stack, p, &anchors)
}

/// Cuts `p x p` patches with the given top-left corners.
pub fn extract_patches_at(
    stack: &TimeSeriesStack,
    p: usize,
    anchors: &[(usize, usize)],
) -> Result<PatchBatch> {
    let (t, hp, wp, c) = stack.values.dim();
    let mut patches = Array5::zeros((anchors.len(), t, p, p, c));
    for (mut patch, &(r, col)) in patches.outer_iter_mut().zip(anchors) {
        if r + p > hp || col + p > wp {
            return Err(Error::Shape(format!(
                "patch at ({r}, {col}) of size {p} exceeds {hp}x{wp}"
            )));
        }
        patch.assign(&stack.values.slice(s![.., r..r + p, col..col + p, ..]));
    }
    Ok(PatchBatch {
        patches,
        anchors: anchors.to_vec(),
    })
}

/// Probabilities and ranges for the random training augmentation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub blur_probability: f64,
    pub blur_sigma: (f64, f64),
    pub gamma_probability: f64,
    pub gamma_range: (f64, f64),
    pub flip_lr_probability: f64,
    pub flip_ud_probability: f64,
    pub rotate_probability: f64,
    pub max_rotation_degrees: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            blur_probability: 0.5,
            blur_sigma: (0.5, 1.0),
            gamma_probability: 0.5,
            gamma_range: (0.25, 2.0),
            flip_lr_probability: 0.5,
            flip_ud_probability: 0.2,
            rotate_probability: 0.5,
            max_rotation_degrees: 90.0,
        }
    }
}

impl AugmentConfig {
    /// A configuration that never alters its input.
    pub fn disabled() -> Self {
        AugmentConfig {
            blur_probability: 0.0,
            gamma_probability: 0.0,
            flip_lr_probability: 0.0,
            flip_ud_probability: 0.0,
            rotate_probability: 0.0,
            ..Default::default()
        }
    }
}

/// Applies a random combination of blur, gamma contrast, flips and rotation
/// using the default configuration. The same spatial transform is applied to
/// every timestep.
pub fn augment(patch: ArrayView4<f64>, seed: u64) -> Array4<f64> {
    augment_with(patch, seed, &AugmentConfig::default())
}

pub fn augment_with(patch: ArrayView4<f64>, seed: u64, config: &AugmentConfig) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Draw every decision up front so the stream does not depend on which
    // branches fire.
    let blur = rng.random_bool(config.blur_probability.clamp(0.0, 1.0));
    let sigma = rng.random_range(config.blur_sigma.0..=config.blur_sigma.1);
    let gamma_on = rng.random_bool(config.gamma_probability.clamp(0.0, 1.0));
    let gamma = rng.random_range(config.gamma_range.0..=config.gamma_range.1);
    let lr = rng.random_bool(config.flip_lr_probability.clamp(0.0, 1.0));
    let ud = rng.random_bool(config.flip_ud_probability.clamp(0.0, 1.0));
    let rotate_on = rng.random_bool(config.rotate_probability.clamp(0.0, 1.0));
    let degrees =
        rng.random_range(-config.max_rotation_degrees..=config.max_rotation_degrees);

    let mut out = patch.to_owned();
    if blur {
        out = gaussian_blur3(out.view(), sigma);
    }
    if gamma_on {
        out = gamma_contrast(out.view(), gamma);
    }
    if lr {
        out = flip_lr(out.view());
    }
    if ud {
        out = flip_ud(out.view());
    }
    if rotate_on {
        out = rotate(out.view(), degrees);
    }
    out
}

/// Raises every value to `gamma`; inputs are expected in `[0, 1]`.
pub fn gamma_contrast(patch: ArrayView4<f64>, gamma: f64) -> Array4<f64> {
    patch.mapv(|v| v.clamp(0.0, 1.0).powf(gamma))
}

/// Mirrors the column axis.
pub fn flip_lr(patch: ArrayView4<f64>) -> Array4<f64> {
    patch.slice(s![.., .., ..;-1, ..]).to_owned()
}

/// Mirrors the row axis.
pub fn flip_ud(patch: ArrayView4<f64>) -> Array4<f64> {
    patch.slice(s![.., ..;-1, .., ..]).to_owned()
}

/// Separable 3x3 Gaussian blur with reflect borders.
pub fn gaussian_blur3(patch: ArrayView4<f64>, sigma: f64) -> Array4<f64> {
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * side;
    let k = [side / norm, 1.0 / norm, side / norm];
    let (t, h, w, c) = patch.dim();
    let mut tmp = Array4::zeros((t, h, w, c));
    let mut out = Array4::zeros((t, h, w, c));
    for ti in 0..t {
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (d, kw) in k.iter().enumerate() {
                        let sc = reflect_index(col as isize + d as isize - 1, w);
                        acc += kw * patch[[ti, r, sc, ch]];
                    }
                    tmp[[ti, r, col, ch]] = acc;
                }
            }
        }
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (d, kw) in k.iter().enumerate() {
                        let sr = reflect_index(r as isize + d as isize - 1, h);
                        acc += kw * tmp[[ti, sr, col, ch]];
                    }
                    out[[ti, r, col, ch]] = acc;
                }
            }
        }
    }
    out
}

fn bilinear_reflect(plane: &ndarray::ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = plane.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| plane[[reflect_index(yy, h), reflect_index(xx, w)]];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotates every plane about the patch centre by `degrees` (counter-clockwise),
/// bilinear interpolation with reflect borders, clamped to `[0, 1]`.
pub fn rotate(patch: ArrayView4<f64>, degrees: f64) -> Array4<f64> {
    let (t, h, w, c) = patch.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Array4::zeros((t, h, w, c));
    for ti in 0..t {
        for ch in 0..c {
            let plane = patch.slice(s![ti, .., .., ch]);
            let mut dst: ArrayViewMut2<f64> = out.slice_mut(s![ti, .., .., ch]);
            for r in 0..h {
                for col in 0..w {
                    let (dy, dx) = (r as f64 - cy, col as f64 - cx);
                    // inverse rotation maps the output pixel back into the source
                    let sy = cy + cos * dy + sin * dx;
                    let sx = cx - sin * dy + cos * dx;
                    dst[[r, col]] = bilinear_reflect(&plane, sy, sx).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}
