//! Deterministic synthetic flood scenes with multi-look gamma speckle.

use chrono::NaiveDate;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster_io::{clip_and_normalize, GroundTruthMask, Polarization, SarTile};

/// Mean backscatter of one surface class, in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDb {
    pub vv: f64,
    pub vh: f64,
}

/// A polygon in pixel coordinates (`x` = column, `y` = row, pixel `(r, c)`
/// has its center at `(c + 0.5, r + 0.5)`) flooded from `onset` onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloodPolygon {
    pub vertices: Vec<(f64, f64)>,
    pub onset: NaiveDate,
}

impl FloodPolygon {
    /// Axis-aligned rectangle covering rows `r0..r1` and columns `c0..c1`.
    pub fn rect(r0: usize, c0: usize, r1: usize, c1: usize, onset: NaiveDate) -> Self {
        let (x0, y0, x1, y1) = (c0 as f64, r0 as f64, c1 as f64, r1 as f64);
        FloodPolygon {
            vertices: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
            onset,
        }
    }

    /// Even-odd rule.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len().wrapping_sub(1);
        for i in 0..v.len() {
            let (xi, yi) = v[i];
            let (xj, yj) = v[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub land_db: SurfaceDb,
    pub water_db: SurfaceDb,
    pub speckle_looks: u32,
    /// Amplitude in dB of a smooth, date-invariant relief added to land.
    pub land_texture_db: f64,
    /// Number of land-cover parcels (nearest-seed cells); 0 for uniform land.
    pub land_parcels: usize,
    /// Each parcel's mean is offset by a uniform draw in `[-spread, spread]` dB.
    pub parcel_spread_db: f64,
    pub flood_polygons: Vec<FloodPolygon>,
    pub dates: Vec<NaiveDate>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            land_db: SurfaceDb { vv: -10.0, vh: -14.0 },
            water_db: SurfaceDb { vv: -20.0, vh: -24.0 },
            speckle_looks: 4,
            land_texture_db: 0.0,
            land_parcels: 0,
            parcel_spread_db: 0.0,
            flood_polygons: Vec::new(),
            dates: Vec::new(),
            seed: 0,
        }
    }
}

/// One generated acquisition and its flood mask at that date.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAcquisition {
    pub tile: SarTile,
    pub mask: GroundTruthMask,
}

/// `n` dates spaced `step_days` apart starting at `start`.
pub fn regular_dates(start: NaiveDate, n: usize, step_days: u64) -> Vec<NaiveDate> {
    (0..n)
        .map(|i| start + chrono::Days::new(i as u64 * step_days))
        .collect()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dates.is_empty() {
            return Err(Error::Empty("scene dates"));
        }
        if self.dates.windows(2).any(|d| d[0] >= d[1]) {
            return Err(Error::Config("scene dates must be strictly increasing".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene must have a positive size".into()));
        }
        if self.speckle_looks == 0 {
            return Err(Error::Config("speckle_looks must be at least 1".into()));
        }
        if self.water_db.vv >= self.land_db.vv || self.water_db.vh >= self.land_db.vh {
            return Err(Error::Config("water backscatter must be below land".into()));
        }
        for (pol, values) in [
            (Polarization::Vv, [self.land_db.vv, self.water_db.vv]),
            (Polarization::Vh, [self.land_db.vh, self.water_db.vh]),
        ] {
            let (lo, hi) = pol.db_range();
            if values.iter().any(|v| !(lo..=hi).contains(v)) {
                return Err(Error::Config(format!(
                    "{pol:?} means {values:?} must lie in [{lo}, {hi}] dB"
                )));
            }
        }
        if !self.land_texture_db.is_finite() || self.land_texture_db < 0.0 {
            return Err(Error::Config("land_texture_db must be a finite non-negative value".into()));
        }
        if !self.parcel_spread_db.is_finite() || self.parcel_spread_db < 0.0 {
            return Err(Error::Config("parcel_spread_db must be a finite non-negative value".into()));
        }
        if self.flood_polygons.iter().any(|p| p.vertices.len() < 3) {
            return Err(Error::Config("flood polygons need at least 3 vertices".into()));
        }
        Ok(())
    }

    /// Pixels flooded at `date`.
    pub fn flood_mask(&self, date: NaiveDate) -> Array2<bool> {
        let active: Vec<_> = self
            .flood_polygons
            .iter()
            .filter(|p| p.onset <= date)
            .collect();
        Array2::from_shape_fn((self.height, self.width), |(r, c)| {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            active.iter().any(|p| p.contains(x, y))
        })
    }

    /// Date-invariant land offsets in dB: relief plus parcels.
    fn texture(&self) -> Array2<f64> {
        let mut out = self.relief();
        out += &self.parcels();
        out
    }

    fn parcels(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.height, self.width));
        if self.land_parcels == 0 || self.parcel_spread_db == 0.0 {
            return out;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9a2c_e150_0000_0002);
        let spread = self.parcel_spread_db;
        let seeds: Vec<(f64, f64, f64)> = (0..self.land_parcels)
            .map(|_| {
                (
                    rng.random_range(0.0..self.height as f64),
                    rng.random_range(0.0..self.width as f64),
                    rng.random_range(-spread..=spread),
                )
            })
            .collect();
        for ((r, c), v) in out.indexed_iter_mut() {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let nearest = seeds
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                    let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one parcel");
            *v = nearest.2;
        }
        out
    }

    /// Smooth relief: a few random plane waves.
    fn relief(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.height, self.width));
        if self.land_texture_db == 0.0 {
            return out;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7e47_0e5e_ed00_0001);
        const WAVES: usize = 4;
        for _ in 0..WAVES {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let period = rng.random_range(6.0..24.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let (ky, kx) = (angle.sin() / period, angle.cos() / period);
            for ((r, c), v) in out.indexed_iter_mut() {
                let arg = std::f64::consts::TAU * (ky * r as f64 + kx * c as f64) + phase;
                *v += arg.sin();
            }
        }
        let scale = self.land_texture_db / WAVES as f64;
        out.mapv_inplace(|v| v * scale);
        out
    }
}

/// Renders every date of the scene.
pub fn generate(spec: &SceneSpec) -> Result<Vec<SyntheticAcquisition>> {
    spec.validate()?;
    let looks = spec.speckle_looks as f64;
    let speckle = Gamma::new(looks, 1.0 / looks)
        .map_err(|e| Error::Config(format!("speckle distribution: {e}")))?;
    let texture = spec.texture();
    let shape = (spec.height, spec.width);
    spec.dates
        .iter()
        .enumerate()
        .map(|(i, &date)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let flooded = spec.flood_mask(date);
            let mut render = |land: f64, water: f64, pol: Polarization| {
                let mut db = Array2::zeros(shape);
                for ((idx, v), &wet) in db.indexed_iter_mut().zip(flooded.iter()) {
                    let mean = if wet { water } else { land + texture[idx] };
                    let power = 10f64.powf(mean / 10.0) * speckle.sample(&mut rng);
                    *v = 10.0 * power.max(f64::MIN_POSITIVE).log10();
                }
                clip_and_normalize(&db, pol)
            };
            let vv = render(spec.land_db.vv, spec.water_db.vv, Polarization::Vv);
            let vh = render(spec.land_db.vh, spec.water_db.vh, Polarization::Vh);
            let tile = SarTile::new(vv, vh, date)?;
            let mask = GroundTruthMask::new(flooded.mapv(i8::from))?;
            Ok(SyntheticAcquisition { tile, mask })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster_io::denormalize;

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2022, 3, d).unwrap()
    }

    #[test]
    fn no_polygons_means_no_flood() {
        let spec = SceneSpec {
            height: 16,
            width: 16,
            dates: vec![day(1), day(13)],
            ..Default::default()
        };
        for acq in generate(&spec).unwrap() {
            assert!(acq.mask.labels().iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn quarter_polygon_covers_quarter() {
        let spec = SceneSpec {
            dates: vec![day(1), day(2)],
            flood_polygons: vec![FloodPolygon::rect(0, 0, 32, 32, day(2))],
            ..Default::default()
        };
        let out = generate(&spec).unwrap();
        assert_eq!(out[0].mask.positive_fraction(), 0.0);
        assert_eq!(out[1].mask.positive_fraction(), 0.25);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let spec = SceneSpec {
            height: 12,
            width: 10,
            dates: vec![day(1), day(5)],
            land_texture_db: 2.0,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SceneSpec { seed: 10, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap()[0].tile, generate(&other).unwrap()[0].tile);
        let out = generate(&spec).unwrap();
        assert_ne!(out[0].tile.vv(), out[1].tile.vv());
    }

    #[test]
    fn flooding_darkens_by_the_class_gap() {
        let spec = SceneSpec {
            dates: vec![day(1), day(2)],
            flood_polygons: vec![FloodPolygon::rect(0, 0, 64, 32, day(2))],
            ..Default::default()
        };
        let out = generate(&spec).unwrap();
        let region_mean = |tile: &SarTile, pol| {
            let db = denormalize(tile.channel(pol), pol);
            let inside: Vec<f64> = db.columns().into_iter().take(32).flatten().copied().collect();
            inside.iter().sum::<f64>() / inside.len() as f64
        };
        for (pol, gap) in [(Polarization::Vv, 10.0), (Polarization::Vh, 10.0)] {
            let drop = region_mean(&out[0].tile, pol) - region_mean(&out[1].tile, pol);
            assert!((drop - gap).abs() < 1.0, "{pol:?}: {drop}");
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SceneSpec::default()).is_err());
        let bad = SceneSpec {
            dates: vec![day(1)],
            water_db: SurfaceDb { vv: -5.0, vh: -24.0 },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let unsorted = SceneSpec {
            dates: vec![day(2), day(1)],
            ..Default::default()
        };
        assert!(unsorted.validate().is_err());
    }

    #[test]
    fn point_in_triangle() {
        let tri = FloodPolygon {
            vertices: vec![(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)],
            onset: day(1),
        };
        assert!(tri.contains(2.0, 2.0));
        assert!(!tri.contains(8.0, 8.0));
    }
}
