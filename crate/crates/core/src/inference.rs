//! Change maps between a pre-event series and a post-event acquisition.
//!
//! Both stacks are reflect-padded so that every pixel owns exactly one
//! stride-1 patch (its top-left anchor), both are encoded with the same
//! weights, and the divergence of the two latent distributions at each
//! anchor becomes the pixel's change value.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView5};
use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::model::{Clvae, LatentDistribution};
use crate::patching::{
    extract_patches_at, inference_padding, pad_reflect, replicate_post, stack_pre_series, TimeSeriesStack,
};
use crate::raster_io::{save_raster, GeoReference, Raster, SampleType, SarTile};

pub const DEFAULT_BATCH_SIZE: usize = 512;

/// Anything that maps `N x T x p x p x 3` patches to latent distributions.
/// Implementations must encode every patch independently of the others.
pub trait PatchEncoder: Sync {
    fn patch_size(&self) -> usize;
    fn timesteps(&self) -> usize;
    fn encode(&self, patches: ArrayView5<f64>) -> Result<Vec<LatentDistribution>>;
}

impl PatchEncoder for Clvae {
    fn patch_size(&self) -> usize {
        self.config().patch_size
    }

    fn timesteps(&self) -> usize {
        self.config().timesteps
    }

    fn encode(&self, patches: ArrayView5<f64>) -> Result<Vec<LatentDistribution>> {
        Clvae::encode(self, patches)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMap {
    pub values: Array2<f64>,
    pub kind: DivergenceKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryChangeMap {
    pub mask: Array2<bool>,
    pub threshold: f64,
}

impl BinaryChangeMap {
    pub fn changed_pixels(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }
}

/// Strict `value > threshold`.
pub fn binarize(map: &ChangeMap, threshold: f64) -> BinaryChangeMap {
    BinaryChangeMap {
        mask: map.values.mapv(|v| v > threshold),
        threshold,
    }
}

/// Pads a stack for stride-1 inference with patch size `p`.
pub fn pad_for_inference(stack: &TimeSeriesStack, p: usize) -> Result<TimeSeriesStack> {
    let (before, after) = inference_padding(p);
    pad_reflect(stack, before, after)
}

fn check_encoder(encoder: &dyn PatchEncoder, stack: &TimeSeriesStack, what: &str) -> Result<()> {
    if stack.timesteps() != encoder.timesteps() {
        return Err(Error::Invalid(format!(
            "{what} has {} timesteps but the model expects {}",
            stack.timesteps(),
            encoder.timesteps()
        )));
    }
    Ok(())
}

/// Encodes every pixel's patch of an unpadded stack, row-major.
pub fn encode_stack(
    encoder: &dyn PatchEncoder,
    stack: &TimeSeriesStack,
    batch_size: usize,
) -> Result<Vec<LatentDistribution>> {
    check_encoder(encoder, stack, "stack")?;
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let p = encoder.patch_size();
    let (h, w) = stack.spatial();
    let padded = pad_for_inference(stack, p)?;
    let anchors: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let mut out = Vec::with_capacity(h * w);
    for chunk in anchors.chunks(batch_size) {
        let batch = extract_patches_at(&padded, p, chunk)?;
        out.extend(encoder.encode(batch.patches.view())?);
    }
    Ok(out)
}

/// Per-pixel divergence between two row-major latent grids.
pub fn change_map_from_latents(
    pre: &[LatentDistribution],
    post: &[LatentDistribution],
    dims: (usize, usize),
    kind: DivergenceKind,
) -> Result<ChangeMap> {
    if pre.len() != dims.0 * dims.1 || post.len() != pre.len() {
        return Err(Error::Shape(format!(
            "{} and {} latents for a {dims:?} map",
            pre.len(),
            post.len()
        )));
    }
    let values: Vec<f64> = pre
        .iter()
        .zip(post)
        .map(|(a, b)| kind.evaluate(a, b))
        .collect::<Result<_>>()?;
    Ok(ChangeMap {
        values: Array2::from_shape_vec(dims, values).expect("map size"),
        kind,
    })
}

/// Change map between two equally sized stacks, streamed in batches so that
/// only `batch_size` patches per stack are held at once.
pub fn change_map_from_stacks(
    pre: &TimeSeriesStack,
    post: &TimeSeriesStack,
    encoder: &dyn PatchEncoder,
    kind: DivergenceKind,
    batch_size: usize,
) -> Result<ChangeMap> {
    check_encoder(encoder, pre, "pre-event series")?;
    check_encoder(encoder, post, "post-event stack")?;
    if pre.spatial() != post.spatial() {
        return Err(Error::Shape(format!(
            "pre-event stack is {:?}, post-event {:?}",
            pre.spatial(),
            post.spatial()
        )));
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let p = encoder.patch_size();
    let (h, w) = pre.spatial();
    let pre_p = pad_for_inference(pre, p)?;
    let post_p = pad_for_inference(post, p)?;
    let anchors: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let mut values = Array2::zeros((h, w));
    for chunk in anchors.chunks(batch_size) {
        let a = encoder.encode(extract_patches_at(&pre_p, p, chunk)?.patches.view())?;
        let b = encoder.encode(extract_patches_at(&post_p, p, chunk)?.patches.view())?;
        for ((&(r, c), da), db) in chunk.iter().zip(&a).zip(&b) {
            values[[r, c]] = kind.evaluate(da, db)?;
        }
    }
    Ok(ChangeMap { values, kind })
}

/// Change map between `T` pre-event tiles and one post-event tile, which is
/// replicated `T` times.
pub fn change_map(
    pre: &[SarTile],
    post: &SarTile,
    encoder: &dyn PatchEncoder,
    kind: DivergenceKind,
    batch_size: usize,
) -> Result<ChangeMap> {
    let t = encoder.timesteps();
    if pre.len() != t {
        return Err(Error::Invalid(format!(
            "the model expects {t} pre-event images, got {}",
            pre.len()
        )));
    }
    let pre_stack = stack_pre_series(pre, t)?;
    if pre_stack.spatial() != post.dim() {
        return Err(Error::Shape(format!(
            "pre-event tiles are {:?}, post-event tile is {:?}",
            pre_stack.spatial(),
            post.dim()
        )));
    }
    let post_stack = replicate_post(post, t)?;
    change_map_from_stacks(&pre_stack, &post_stack, encoder, kind, batch_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProductFormat {
    #[default]
    GeoTiff,
    Fixture,
}

impl ProductFormat {
    fn extension(self) -> &'static str {
        match self {
            ProductFormat::GeoTiff => "tif",
            ProductFormat::Fixture => "clvr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportedProducts {
    pub change_map: PathBuf,
    pub mask_raster: PathBuf,
    pub mask_png: PathBuf,
}

/// Writes a boolean mask as an 8-bit grayscale PNG (255 = change).
pub fn write_mask_png(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    let data: Vec<u8> = mask.iter().map(|&v| if v { 255 } else { 0 }).collect();
    writer.write_image_data(&data)?;
    writer.finish()?;
    Ok(())
}

/// Writes the real-valued map, the mask as a `{0, 1}` raster and the mask
/// as a PNG into an existing directory.
pub fn export_change_products(
    map: &ChangeMap,
    mask: &BinaryChangeMap,
    georef: Option<&GeoReference>,
    out_dir: &Path,
    format: ProductFormat,
) -> Result<ExportedProducts> {
    if !out_dir.is_dir() {
        return Err(Error::io(
            out_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    if map.values.dim() != mask.mask.dim() {
        return Err(Error::Shape("change map and mask differ in size".into()));
    }
    let ext = format.extension();
    let paths = ExportedProducts {
        change_map: out_dir.join(format!("change_map.{ext}")),
        mask_raster: out_dir.join(format!("change_mask.{ext}")),
        mask_png: out_dir.join("change_mask.png"),
    };
    let mut values = Raster::single(map.values.clone());
    values.georef = georef.cloned();
    save_raster(&values, &paths.change_map, SampleType::F64)?;
    let mut binary = Raster::single(mask.mask.mapv(|v| if v { 1.0 } else { 0.0 }));
    binary.georef = georef.cloned();
    save_raster(&binary, &paths.mask_raster, SampleType::U8)?;
    write_mask_png(&mask.mask, &paths.mask_png)?;
    Ok(paths)
}
