//! Raster ingestion, preprocessing and persistence.
//!
//! Tiles are held in memory as normalized VV/VH grids in `[0, 1]`. Two
//! on-disk formats are supported:
//!
//! * GeoTIFF (`.tif`, `.tiff`), float or integer samples, chunky or planar,
//!   with georeferencing tags carried through when present.
//! * A flat little-endian fixture format used for tests and synthetic scenes:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CLVR"
//! 4       1     format version (1)
//! 5       1     dtype code: 1 = u8, 2 = i8, 3 = f32, 4 = f64
//! 6       2     reserved, zero
//! 8       4     H (u32)
//! 12      4     W (u32)
//! 16      4     C (u32)
//! 20      ...   C band planes, each H*W row-major samples
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use crate::error::{Error, Result};

/// Sentinel-1 co- and cross-polarized channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarization {
    Vv,
    Vh,
}

impl Polarization {
    /// Clip range in dB applied before normalization.
    pub fn db_range(self) -> (f64, f64) {
        match self {
            Polarization::Vv => (-23.0, 0.0),
            Polarization::Vh => (-28.0, -5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrbitPass {
    Ascending,
    Descending,
}

/// Converts linear backscatter power to decibels.
pub fn to_db(linear: &Array2<f64>) -> Result<Array2<f64>> {
    for ((row, col), &value) in linear.indexed_iter() {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "linear backscatter".into(),
                row,
                col,
            });
        }
        if value <= 0.0 {
            return Err(Error::NonPositive { row, col, value });
        }
    }
    Ok(linear.mapv(|v| 10.0 * v.log10()))
}

/// Clamps a dB grid to the channel's range (bounds inclusive) and rescales to `[0, 1]`.
pub fn clip_and_normalize(db: &Array2<f64>, channel: Polarization) -> Array2<f64> {
    let (lo, hi) = channel.db_range();
    db.mapv(|v| (v.clamp(lo, hi) - lo) / (hi - lo))
}

/// Inverse of [`clip_and_normalize`] for values that were inside the clip range.
pub fn denormalize(normalized: &Array2<f64>, channel: Polarization) -> Array2<f64> {
    let (lo, hi) = channel.db_range();
    normalized.mapv(|v| lo + v * (hi - lo))
}

/// Affine georeferencing as carried by GeoTIFF model tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoReference {
    /// ModelPixelScaleTag (sx, sy, sz).
    pub pixel_scale: [f64; 3],
    /// ModelTiepointTag (i, j, k, x, y, z).
    pub tiepoint: [f64; 6],
    pub geo_keys: Vec<u16>,
    pub geo_doubles: Vec<f64>,
    pub geo_ascii: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl GeoReference {
    pub fn bounds(&self, height: usize, width: usize) -> GeoBounds {
        let [sx, sy, _] = self.pixel_scale;
        let [i, j, _, x, y, _] = self.tiepoint;
        let left = x - i * sx;
        let top = y + j * sy;
        let right = left + width as f64 * sx;
        let bottom = top - height as f64 * sy;
        GeoBounds {
            min_x: left.min(right),
            min_y: bottom.min(top),
            max_x: left.max(right),
            max_y: bottom.max(top),
        }
    }
}

/// One preprocessed dual-polarization acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct SarTile {
    vv: Array2<f64>,
    vh: Array2<f64>,
    pub acquisition_date: NaiveDate,
    pub georef: Option<GeoReference>,
    pub orbit_pass: Option<OrbitPass>,
    pub relative_orbit: Option<u32>,
}

impl SarTile {
    /// Builds a tile from already normalized channels, validating range and finiteness.
    pub fn new(vv: Array2<f64>, vh: Array2<f64>, acquisition_date: NaiveDate) -> Result<Self> {
        if vv.dim() != vh.dim() {
            return Err(Error::Shape(format!(
                "VV is {:?} but VH is {:?}",
                vv.dim(),
                vh.dim()
            )));
        }
        check_unit_range(&vv.view(), "VV")?;
        check_unit_range(&vh.view(), "VH")?;
        Ok(SarTile {
            vv,
            vh,
            acquisition_date,
            georef: None,
            orbit_pass: None,
            relative_orbit: None,
        })
    }

    /// Builds a tile from dB grids by clipping and normalizing each channel.
    pub fn from_db(vv_db: &Array2<f64>, vh_db: &Array2<f64>, date: NaiveDate) -> Result<Self> {
        check_finite(&vv_db.view(), "VV dB")?;
        check_finite(&vh_db.view(), "VH dB")?;
        SarTile::new(
            clip_and_normalize(vv_db, Polarization::Vv),
            clip_and_normalize(vh_db, Polarization::Vh),
            date,
        )
    }

    /// Builds a tile from linear backscatter power.
    pub fn from_linear(vv: &Array2<f64>, vh: &Array2<f64>, date: NaiveDate) -> Result<Self> {
        SarTile::from_db(&to_db(vv)?, &to_db(vh)?, date)
    }

    pub fn with_georef(mut self, georef: Option<GeoReference>) -> Self {
        self.georef = georef;
        self
    }

    pub fn vv(&self) -> &Array2<f64> {
        &self.vv
    }

    pub fn vh(&self) -> &Array2<f64> {
        &self.vh
    }

    pub fn channel(&self, channel: Polarization) -> &Array2<f64> {
        match channel {
            Polarization::Vv => &self.vv,
            Polarization::Vh => &self.vh,
        }
    }

    /// (H, W)
    pub fn dim(&self) -> (usize, usize) {
        self.vv.dim()
    }

    pub fn bounds(&self) -> Option<GeoBounds> {
        let (h, w) = self.dim();
        self.georef.as_ref().map(|g| g.bounds(h, w))
    }

    /// Crops the rectangle `[row, row + height) x [col, col + width)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<SarTile> {
        let (h, w) = self.dim();
        if row + height > h || col + width > w || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({row}, {col}) outside {h}x{w} tile"
            )));
        }
        let vv = self
            .vv
            .slice(ndarray::s![row..row + height, col..col + width])
            .to_owned();
        let vh = self
            .vh
            .slice(ndarray::s![row..row + height, col..col + width])
            .to_owned();
        let mut tile = SarTile::new(vv, vh, self.acquisition_date)?;
        tile.orbit_pass = self.orbit_pass;
        tile.relative_orbit = self.relative_orbit;
        Ok(tile)
    }
}

/// Per-pixel reference labels: 1 = water/change, 0 = no change, -1 = missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    labels: Array2<i8>,
}

impl GroundTruthMask {
    pub fn new(labels: Array2<i8>) -> Result<Self> {
        if let Some(((row, col), v)) = labels
            .indexed_iter()
            .find(|(_, &v)| !matches!(v, -1..=1))
        {
            return Err(Error::Invalid(format!(
                "ground-truth label {v} at ({row}, {col}) is not in {{-1, 0, 1}}"
            )));
        }
        Ok(GroundTruthMask { labels })
    }

    pub fn labels(&self) -> &Array2<i8> {
        &self.labels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn positive_fraction(&self) -> f64 {
        let n = self.labels.len().max(1);
        self.labels.iter().filter(|&&v| v == 1).count() as f64 / n as f64
    }
}

fn check_finite(grid: &ArrayView2<f64>, what: &str) -> Result<()> {
    match grid.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((row, col), _)) => Err(Error::NonFinite {
            what: what.into(),
            row,
            col,
        }),
        None => Ok(()),
    }
}

fn check_unit_range(grid: &ArrayView2<f64>, what: &str) -> Result<()> {
    check_finite(grid, what)?;
    match grid
        .indexed_iter()
        .find(|(_, &v)| !(0.0..=1.0).contains(&v))
    {
        Some(((row, col), &value)) => Err(Error::OutOfRange {
            what: what.into(),
            row,
            col,
            value,
        }),
        None => Ok(()),
    }
}

/// A multi-band raster as read from or written to disk. Bands are `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub bands: Array3<f64>,
    pub georef: Option<GeoReference>,
    pub date: Option<NaiveDate>,
}

impl Raster {
    pub fn new(bands: Array3<f64>) -> Self {
        Raster {
            bands,
            georef: None,
            date: None,
        }
    }

    pub fn single(grid: Array2<f64>) -> Self {
        Raster::new(grid.insert_axis(Axis(0)))
    }

    pub fn band_count(&self) -> usize {
        self.bands.len_of(Axis(0))
    }

    pub fn band(&self, index: usize) -> Array2<f64> {
        self.bands.index_axis(Axis(0), index).to_owned()
    }
}

/// Sample type used when writing a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    U8,
    I8,
    F32,
    F64,
}

impl SampleType {
    fn code(self) -> u8 {
        match self {
            SampleType::U8 => 1,
            SampleType::I8 => 2,
            SampleType::F32 => 3,
            SampleType::F64 => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(SampleType::U8),
            2 => Some(SampleType::I8),
            3 => Some(SampleType::F32),
            4 => Some(SampleType::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            SampleType::U8 | SampleType::I8 => 1,
            SampleType::F32 => 4,
            SampleType::F64 => 8,
        }
    }
}

pub const FIXTURE_MAGIC: &[u8; 4] = b"CLVR";
const FIXTURE_VERSION: u8 = 1;
const FIXTURE_HEADER_LEN: usize = 20;

/// Writes a raster in the fixture format.
pub fn write_fixture(path: &Path, bands: &Array3<f64>, dtype: SampleType) -> Result<()> {
    let (c, h, w) = bands.dim();
    let mut buf = Vec::with_capacity(FIXTURE_HEADER_LEN + c * h * w * dtype.width());
    buf.extend_from_slice(FIXTURE_MAGIC);
    buf.push(FIXTURE_VERSION);
    buf.push(dtype.code());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for d in [h, w, c] {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} too large")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in bands.iter() {
        match dtype {
            SampleType::U8 => buf.push(v as u8),
            SampleType::I8 => buf.push((v as i8) as u8),
            SampleType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            SampleType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let mut file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

/// Reads a fixture-format raster.
pub fn read_fixture(path: &Path) -> Result<Array3<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < FIXTURE_HEADER_LEN || &bytes[..4] != FIXTURE_MAGIC {
        return Err(Error::format(path, "missing fixture header"));
    }
    if bytes[4] != FIXTURE_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported fixture version {}", bytes[4]),
        ));
    }
    let dtype = SampleType::from_code(bytes[5])
        .ok_or_else(|| Error::format(path, format!("unknown dtype code {}", bytes[5])))?;
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(8), dim(12), dim(16));
    let n = h * w * c;
    let payload = &bytes[FIXTURE_HEADER_LEN..];
    if payload.len() != n * dtype.width() {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, header declares {c}x{h}x{w} of {:?}",
                payload.len(),
                dtype
            ),
        ));
    }
    let values: Vec<f64> = match dtype {
        SampleType::U8 => payload.iter().map(|&b| b as f64).collect(),
        SampleType::I8 => payload.iter().map(|&b| (b as i8) as f64).collect(),
        SampleType::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        SampleType::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    Ok(Array3::from_shape_vec((c, h, w), values).expect("length checked above"))
}

/// GeoTIFF sample layout for two or more float bands.
struct MultiF64<const N: usize>;

impl colortype::ColorType for MultiF64<2> {
    type Inner = f64;
    const TIFF_VALUE: tiff::tags::PhotometricInterpretation =
        tiff::tags::PhotometricInterpretation::BlackIsZero;
    const BITS_PER_SAMPLE: &'static [u16] = &[64, 64];
    const SAMPLE_FORMAT: &'static [tiff::tags::SampleFormat] =
        &[tiff::tags::SampleFormat::IEEEFP; 2];

    fn horizontal_predict(_: &[f64], _: &mut Vec<f64>) {
        unreachable!("predictor is never enabled for float rasters")
    }
}

impl colortype::ColorType for MultiF64<3> {
    type Inner = f64;
    const TIFF_VALUE: tiff::tags::PhotometricInterpretation =
        tiff::tags::PhotometricInterpretation::BlackIsZero;
    const BITS_PER_SAMPLE: &'static [u16] = &[64, 64, 64];
    const SAMPLE_FORMAT: &'static [tiff::tags::SampleFormat] =
        &[tiff::tags::SampleFormat::IEEEFP; 3];

    fn horizontal_predict(_: &[f64], _: &mut Vec<f64>) {
        unreachable!("predictor is never enabled for float rasters")
    }
}

fn decoding_to_f64(result: DecodingResult) -> Vec<f64> {
    match result {
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U64(v) => v.into_iter().map(|x| x as f64).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I64(v) => v.into_iter().map(|x| x as f64).collect(),
        DecodingResult::F16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
    }
}

/// Reads every band of a GeoTIFF, keeping georeferencing and the DateTime tag.
pub fn read_geotiff(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file))?.with_limits(Limits::unlimited());
    let (w, h) = decoder.dimensions()?;
    let (w, h) = (w as usize, h as usize);
    let samples = match decoder.colortype()? {
        tiff::ColorType::Gray(_) => 1,
        tiff::ColorType::GrayA(_) => 2,
        tiff::ColorType::RGB(_) | tiff::ColorType::YCbCr(_) | tiff::ColorType::Lab(_) => 3,
        tiff::ColorType::RGBA(_) | tiff::ColorType::CMYK(_) => 4,
        tiff::ColorType::CMYKA(_) => 5,
        tiff::ColorType::Multiband { num_samples, .. } => num_samples as usize,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let planar = decoder
        .find_tag_unsigned::<u16>(Tag::PlanarConfiguration)?
        .unwrap_or(1)
        == 2;

    let mut result = DecodingResult::U8(vec![]);
    decoder.read_image_to_buffer(&mut result)?;
    let values = decoding_to_f64(result);
    if values.len() != w * h * samples {
        return Err(Error::format(
            path,
            format!("decoded {} samples, expected {w}x{h}x{samples}", values.len()),
        ));
    }
    let bands = if planar {
        Array3::from_shape_vec((samples, h, w), values).expect("length checked")
    } else {
        Array3::from_shape_vec((h, w, samples), values)
            .expect("length checked")
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .to_owned()
    };

    let georef = match (
        decoder.find_tag(Tag::ModelPixelScaleTag)?,
        decoder.find_tag(Tag::ModelTiepointTag)?,
    ) {
        (Some(scale), Some(tie)) => {
            let scale = scale.into_f64_vec()?;
            let tie = tie.into_f64_vec()?;
            if scale.len() < 3 || tie.len() < 6 {
                return Err(Error::format(path, "malformed georeferencing tags"));
            }
            let geo_keys = match decoder.find_tag(Tag::GeoKeyDirectoryTag)? {
                Some(v) => v
                    .into_u64_vec()?
                    .into_iter()
                    .map(|k| k as u16)
                    .collect(),
                None => Vec::new(),
            };
            let geo_doubles = match decoder.find_tag(Tag::GeoDoubleParamsTag)? {
                Some(v) => v.into_f64_vec()?,
                None => Vec::new(),
            };
            let geo_ascii = match decoder.find_tag(Tag::GeoAsciiParamsTag)? {
                Some(v) => Some(v.into_string()?),
                None => None,
            };
            Some(GeoReference {
                pixel_scale: [scale[0], scale[1], scale[2]],
                tiepoint: [tie[0], tie[1], tie[2], tie[3], tie[4], tie[5]],
                geo_keys,
                geo_doubles,
                geo_ascii,
            })
        }
        _ => None,
    };
    let date = match decoder.find_tag(Tag::DateTime)? {
        Some(v) => {
            let s = v.into_string()?;
            s.get(..10)
                .and_then(|d| NaiveDate::parse_from_str(d, "%Y:%m:%d").ok())
        }
        None => None,
    };
    Ok(Raster {
        bands,
        georef,
        date,
    })
}

/// Writes a 1-, 2- or 3-band float64 GeoTIFF (chunky layout).
pub fn write_geotiff(path: &Path, raster: &Raster) -> Result<()> {
    let (c, h, w) = raster.bands.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = TiffEncoder::new(BufWriter::new(file))?;
    let interleaved: Vec<f64> = raster
        .bands
        .view()
        .permuted_axes([1, 2, 0])
        .iter()
        .copied()
        .collect();
    let (w32, h32) = (w as u32, h as u32);
    macro_rules! write_with {
        ($ct:ty) => {{
            let mut image = encoder.new_image::<$ct>(w32, h32)?;
            write_geo_tags(image.encoder(), raster)?;
            image.write_data(&interleaved)?;
        }};
    }
    match c {
        1 => write_with!(colortype::Gray64Float),
        2 => write_with!(MultiF64<2>),
        3 => write_with!(MultiF64<3>),
        _ => {
            return Err(Error::Invalid(format!(
                "GeoTIFF writer supports 1-3 bands, got {c}"
            )))
        }
    }
    Ok(())
}

fn write_geo_tags<W: Write + std::io::Seek, K: tiff::encoder::TiffKind>(
    dir: &mut tiff::encoder::DirectoryEncoder<'_, W, K>,
    raster: &Raster,
) -> Result<()> {
    if let Some(g) = &raster.georef {
        dir.write_tag(Tag::ModelPixelScaleTag, &g.pixel_scale[..])?;
        dir.write_tag(Tag::ModelTiepointTag, &g.tiepoint[..])?;
        if !g.geo_keys.is_empty() {
            dir.write_tag(Tag::GeoKeyDirectoryTag, &g.geo_keys[..])?;
        }
        if !g.geo_doubles.is_empty() {
            dir.write_tag(Tag::GeoDoubleParamsTag, &g.geo_doubles[..])?;
        }
        if let Some(ascii) = &g.geo_ascii {
            dir.write_tag(Tag::GeoAsciiParamsTag, ascii.as_str())?;
        }
    }
    if let Some(date) = raster.date {
        let stamp = date.format("%Y:%m:%d 00:00:00").to_string();
        dir.write_tag(Tag::DateTime, stamp.as_str())?;
    }
    Ok(())
}

fn is_geotiff_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "tif" || e == "tiff"
    )
}

/// Reads a raster, detecting the format from its leading bytes.
pub fn read_raster(path: &Path) -> Result<Raster> {
    let mut magic = [0u8; 4];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| Error::io(path, e))?;
    if &magic == FIXTURE_MAGIC {
        let mut raster = Raster::new(read_fixture(path)?);
        raster.date = date_from_path(path);
        Ok(raster)
    } else if &magic == b"II*\0" || &magic == b"MM\0*" || &magic == b"II+\0" || &magic == b"MM\0+"
    {
        read_geotiff(path)
    } else {
        Err(Error::format(path, "neither a GeoTIFF nor a fixture raster"))
    }
}

/// Writes a raster; `.tif`/`.tiff` paths become GeoTIFF (float64), anything
/// else uses the fixture format with the given sample type.
pub fn save_raster(raster: &Raster, path: &Path, dtype: SampleType) -> Result<()> {
    if is_geotiff_path(path) {
        write_geotiff(path, raster)
    } else {
        write_fixture(path, &raster.bands, dtype)
    }
}

/// Writes a single grid as a float64 raster.
pub fn save_grid(grid: &Array2<f64>, path: &Path) -> Result<()> {
    save_raster(&Raster::single(grid.clone()), path, SampleType::F64)
}

/// How backscatter values in a source raster are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackscatterEncoding {
    /// Linear power; converted to dB, clipped and normalized.
    Linear,
    /// Decibels; clipped and normalized.
    #[default]
    Decibel,
    /// Already normalized to `[0, 1]`; validated only.
    Normalized,
}

/// Which bands of a source raster hold VV and VH, and how they are encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMapping {
    pub vv_band: usize,
    pub vh_band: usize,
    pub expected_bands: usize,
    pub encoding: BackscatterEncoding,
    /// Overrides the acquisition date found in the file or its name.
    pub date: Option<NaiveDate>,
}

impl Default for ChannelMapping {
    fn default() -> Self {
        ChannelMapping {
            vv_band: 0,
            vh_band: 1,
            expected_bands: 2,
            encoding: BackscatterEncoding::Decibel,
            date: None,
        }
    }
}

impl ChannelMapping {
    pub fn normalized() -> Self {
        ChannelMapping {
            encoding: BackscatterEncoding::Normalized,
            ..Default::default()
        }
    }
}

/// Loads and preprocesses a dual-polarization tile.
pub fn load_tile(path: &Path, mapping: &ChannelMapping) -> Result<SarTile> {
    let raster = read_raster(path)?;
    if raster.band_count() != mapping.expected_bands {
        return Err(Error::ChannelCount {
            path: path.into(),
            expected: mapping.expected_bands,
            found: raster.band_count(),
        });
    }
    if mapping.vv_band >= mapping.expected_bands || mapping.vh_band >= mapping.expected_bands {
        return Err(Error::Config(format!(
            "band mapping VV={} VH={} exceeds {} bands",
            mapping.vv_band, mapping.vh_band, mapping.expected_bands
        )));
    }
    let date = mapping
        .date
        .or(raster.date)
        .or_else(|| date_from_path(path))
        .ok_or_else(|| {
            Error::format(
                path,
                "no acquisition date (expected a DateTime tag or YYYY-MM-DD in the file name)",
            )
        })?;
    let vv = raster.band(mapping.vv_band);
    let vh = raster.band(mapping.vh_band);
    let tile = match mapping.encoding {
        BackscatterEncoding::Linear => SarTile::from_linear(&vv, &vh, date),
        BackscatterEncoding::Decibel => SarTile::from_db(&vv, &vh, date),
        BackscatterEncoding::Normalized => SarTile::new(vv, vh, date),
    }
    .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(tile.with_georef(raster.georef))
}

/// Writes a tile's normalized VV/VH channels as a 2-band raster.
pub fn save_tile(tile: &SarTile, path: &Path) -> Result<()> {
    let mut bands = Array3::zeros((2, tile.dim().0, tile.dim().1));
    bands.index_axis_mut(Axis(0), 0).assign(tile.vv());
    bands.index_axis_mut(Axis(0), 1).assign(tile.vh());
    let raster = Raster {
        bands,
        georef: tile.georef.clone(),
        date: Some(tile.acquisition_date),
    };
    save_raster(&raster, path, SampleType::F64)
}

/// Loads a ground-truth mask (single band, values in {-1, 0, 1}).
pub fn load_mask(path: &Path) -> Result<GroundTruthMask> {
    let raster = read_raster(path)?;
    if raster.band_count() != 1 {
        return Err(Error::ChannelCount {
            path: path.into(),
            expected: 1,
            found: raster.band_count(),
        });
    }
    let band = raster.band(0);
    let mut labels = Array2::zeros(band.dim());
    for ((r, c), &v) in band.indexed_iter() {
        if !v.is_finite() || v.fract() != 0.0 {
            return Err(Error::format(path, format!("label {v} at ({r}, {c})")));
        }
        labels[[r, c]] = v as i8;
    }
    GroundTruthMask::new(labels).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_mask(mask: &GroundTruthMask, path: &Path) -> Result<()> {
    let raster = Raster::single(mask.labels().mapv(f64::from));
    save_raster(&raster, path, SampleType::I8)
}

/// Finds a `YYYY-MM-DD` or `YYYYMMDD` date in a file name.
pub fn date_from_path(path: &Path) -> Option<NaiveDate> {
    let name = path.file_stem()?.to_str()?;
    let bytes = name.as_bytes();
    for start in 0..bytes.len() {
        if let Some(s) = name.get(start..start + 10) {
            if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
                return Some(d);
            }
        }
    }
    let mut start = 0;
    while start < bytes.len() {
        if bytes[start].is_ascii_digit() {
            let end = (start..bytes.len())
                .find(|&i| !bytes[i].is_ascii_digit())
                .unwrap_or(bytes.len());
            if end - start == 8 {
                if let Ok(d) = NaiveDate::parse_from_str(&name[start..end], "%Y%m%d") {
                    return Some(d);
                }
            }
            start = end;
        } else {
            start += 1;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 7, 14).unwrap()
    }

    #[test]
    fn db_examples() {
        let db = to_db(&array![[1.0, 10.0, 0.001]]).unwrap();
        assert_eq!(db[[0, 0]], 0.0);
        assert_eq!(db[[0, 1]], 10.0);
        assert_abs_diff_eq!(db[[0, 2]], -30.0, epsilon = 1e-12);
    }

    #[test]
    fn db_rejects_non_positive_with_index() {
        let err = to_db(&array![[1.0, 2.0], [3.0, 0.0]]).unwrap_err();
        match err {
            Error::NonPositive { row, col, .. } => assert_eq!((row, col), (1, 1)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn normalization_examples() {
        let vv = clip_and_normalize(&array![[-23.0, 0.0, 7.0, -40.0]], Polarization::Vv);
        assert_eq!(vv, array![[0.0, 1.0, 1.0, 0.0]]);
        let vh = clip_and_normalize(&array![[-16.5]], Polarization::Vh);
        assert_abs_diff_eq!(vh[[0, 0]], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn tile_rejects_nan_and_mismatch() {
        let nan = array![[0.1, f64::NAN]];
        assert!(matches!(
            SarTile::new(nan.clone(), nan, date()),
            Err(Error::NonFinite { col: 1, .. })
        ));
        assert!(matches!(
            SarTile::new(Array2::zeros((2, 2)), Array2::zeros((2, 3)), date()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mask_rejects_other_labels() {
        assert!(GroundTruthMask::new(array![[0, 1, -1]]).is_ok());
        assert!(GroundTruthMask::new(array![[0, 2]]).is_err());
    }

    #[test]
    fn date_from_file_names() {
        let d = |s: &str| date_from_path(Path::new(s));
        assert_eq!(d("S1_2021-07-14_vv.tif"), Some(date()));
        assert_eq!(d("/a/b/pre_20210714.clvr"), Some(date()));
        assert_eq!(d("tile_123.tif"), None);
    }

    #[test]
    fn bounds_from_tiepoint() {
        let g = GeoReference {
            pixel_scale: [10.0, 10.0, 0.0],
            tiepoint: [0.0, 0.0, 0.0, 500.0, 1000.0, 0.0],
            geo_keys: vec![],
            geo_doubles: vec![],
            geo_ascii: None,
        };
        let b = g.bounds(20, 30);
        assert_eq!((b.min_x, b.max_x, b.min_y, b.max_y), (500.0, 800.0, 800.0, 1000.0));
    }
}
