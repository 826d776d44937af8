//! Dataset layouts, patch extraction and the synthetic nuclei generator.
//!
//! Every profile shares one directory layout:
//!
//! ```text
//! root/
//!   train/ val/ test/
//!     images/<stem>.png    RGB or gray image
//!     masks/<stem>.png     16-bit instance map (mask and synthetic profiles)
//!     points/<stem>.csv    `row,col` nucleus centers (point and synthetic profiles)
//! ```
//!
//! Missing split directories are allowed; an empty root yields an empty
//! manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::io;
use crate::raster::{InstanceMap, Point, PointSet, RasterImage};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown split `{s}` (train, val, test)")))
    }
}

/// Which ground truth a dataset carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetProfile {
    /// Instance masks per image.
    Mask,
    /// Center points per image.
    Point,
    /// Output of [`write_synthetic_dataset`]: masks and points.
    #[default]
    Synthetic,
}

impl DatasetProfile {
    fn needs_masks(self) -> bool {
        matches!(self, DatasetProfile::Mask | DatasetProfile::Synthetic)
    }

    fn needs_points(self) -> bool {
        matches!(self, DatasetProfile::Point | DatasetProfile::Synthetic)
    }
}

impl FromStr for DatasetProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(DatasetProfile::Mask),
            "point" => Ok(DatasetProfile::Point),
            "synthetic" => Ok(DatasetProfile::Synthetic),
            _ => Err(Error::InvalidInput(format!(
                "unknown dataset profile `{s}` (mask, point, synthetic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stem: String,
    pub split: Split,
    pub image_path: PathBuf,
    pub gt_mask_path: Option<PathBuf>,
    pub gt_points_path: Option<PathBuf>,
    pub dims: (usize, usize),
}

/// An image with its parsed ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stem: String,
    pub image: RasterImage,
    pub mask: Option<InstanceMap>,
    pub points: Option<PointSet>,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<Sample> {
        let image = io::read_image(&self.image_path)?;
        let mask = self
            .gt_mask_path
            .as_deref()
            .map(io::read_instance_map)
            .transpose()?;
        let points = self
            .gt_points_path
            .as_deref()
            .map(|p| io::read_points(p, self.dims))
            .transpose()?;
        Ok(Sample {
            stem: self.stem.clone(),
            image,
            mask,
            points,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub profile: DatasetProfile,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Scans `root` for the documented layout and validates every entry: ground
/// truth must exist, parse, and match its image dimensions; stems must not
/// repeat across splits. All problems are collected into one
/// [`Error::Dataset`].
pub fn load_manifest(root: &Path, profile: DatasetProfile) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(vec![format!(
            "{} is not a directory",
            root.display()
        )]));
    }
    let mut problems = Vec::new();
    let mut entries = Vec::new();
    let mut seen: BTreeMap<String, Split> = BTreeMap::new();
    for split in Split::ALL {
        let dir = root.join(split.name());
        let images_dir = dir.join("images");
        if !images_dir.is_dir() {
            continue;
        }
        for (stem, image_path) in png_stems(&images_dir)? {
            if let Some(prev) = seen.insert(stem.clone(), split) {
                problems.push(format!("{stem}: appears in both {prev} and {split}"));
                continue;
            }
            let dims = match image::image_dimensions(&image_path) {
                Ok((w, h)) => (h as usize, w as usize),
                Err(e) => {
                    problems.push(format!("{}: {e}", image_path.display()));
                    continue;
                }
            };
            let mut entry = ManifestEntry {
                stem: stem.clone(),
                split,
                image_path,
                gt_mask_path: None,
                gt_points_path: None,
                dims,
            };
            if profile.needs_masks() {
                let path = dir.join("masks").join(format!("{stem}.png"));
                if !path.is_file() {
                    problems.push(format!("{}: missing instance mask", path.display()));
                } else {
                    match io::read_instance_map(&path) {
                        Ok(m) if m.dims() != dims => problems.push(format!(
                            "{}: mask is {}x{}, image is {}x{}",
                            path.display(),
                            m.dims().0,
                            m.dims().1,
                            dims.0,
                            dims.1
                        )),
                        Ok(_) => entry.gt_mask_path = Some(path),
                        Err(e) => problems.push(format!("{}: {e}", path.display())),
                    }
                }
            }
            if profile.needs_points() {
                let path = dir.join("points").join(format!("{stem}.csv"));
                if !path.is_file() {
                    problems.push(format!("{}: missing point file", path.display()));
                } else {
                    match io::read_points(&path, dims) {
                        Ok(_) => entry.gt_points_path = Some(path),
                        Err(e) => problems.push(e.to_string()),
                    }
                }
            }
            entries.push(entry);
        }
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems));
    }
    if entries.is_empty() {
        log::warn!("no images found under {}", root.display());
    }
    Ok(DatasetManifest { profile, entries })
}

/// A patch cut from a larger image; `offset` is its top-left corner in the
/// source and may extend past the border, where pixels are reflected.
#[derive(Debug, Clone)]
pub struct Patch {
    pub image: RasterImage,
    pub offset: (usize, usize),
}

fn grid_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts = vec![0];
    while starts.last().copied().unwrap_or(0) + patch < len {
        starts.push(starts.last().copied().unwrap_or(0) + stride);
    }
    starts
}

fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Cuts a regular grid of `patch x patch` windows every `stride` pixels.
/// The last row and column of windows may run past the image; those pixels
/// are reflected about the border.
pub fn extract_patches(image: &RasterImage, patch: usize, stride: usize) -> Result<Vec<Patch>> {
    let (h, w) = image.dims();
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidInput(
            "patch size and stride must be positive".into(),
        ));
    }
    if patch > h || patch > w {
        return Err(Error::InvalidInput(format!(
            "patch size {patch} exceeds the {h}x{w} image"
        )));
    }
    let px = image.pixels();
    let ch = image.channels();
    let mut out = Vec::new();
    for &r0 in &grid_starts(h, patch, stride) {
        for &c0 in &grid_starts(w, patch, stride) {
            let pixels = Array3::from_shape_fn((patch, patch, ch), |(r, c, k)| {
                px[[reflect(r0 + r, h), reflect(c0 + c, w), k]]
            });
            out.push(Patch {
                image: RasterImage::new(pixels)?,
                offset: (r0, c0),
            });
        }
    }
    Ok(out)
}

/// Reassembles per-patch maps of shape `(patch, patch, channels)` into a
/// `dims`-sized raster. Overlapping contributions are averaged; pixels past
/// the border are dropped.
pub fn stitch(
    patches: &[(Array3<f32>, (usize, usize))],
    dims: (usize, usize),
) -> Result<Array3<f32>> {
    let Some((first, _)) = patches.first() else {
        return Err(Error::InvalidInput("nothing to stitch".into()));
    };
    let ch = first.dim().2;
    let mut sum = Array3::<f32>::zeros((dims.0, dims.1, ch));
    let mut hits = Array2::<u32>::zeros(dims);
    for (values, (r0, c0)) in patches {
        let (ph, pw, pc) = values.dim();
        if pc != ch {
            return Err(Error::InvalidInput(
                "patches disagree on channel count".into(),
            ));
        }
        let rh = ph.min(dims.0.saturating_sub(*r0));
        let rw = pw.min(dims.1.saturating_sub(*c0));
        let mut dst = sum.slice_mut(s![*r0..r0 + rh, *c0..c0 + rw, ..]);
        dst += &values.slice(s![..rh, ..rw, ..]);
        hits.slice_mut(s![*r0..r0 + rh, *c0..c0 + rw])
            .mapv_inplace(|n| n + 1);
    }
    if let Some(((r, c), _)) = hits.indexed_iter().find(|(_, &n)| n == 0) {
        return Err(Error::InvalidInput(format!(
            "pixel ({r}, {c}) is not covered by any patch"
        )));
    }
    for ((r, c, _), v) in sum.indexed_iter_mut() {
        *v /= hits[[r, c]] as f32;
    }
    Ok(sum)
}

/// Stitches single-channel maps such as probabilities.
pub fn stitch_map(
    patches: &[(Array2<f32>, (usize, usize))],
    dims: (usize, usize),
) -> Result<Array2<f32>> {
    let lifted: Vec<(Array3<f32>, (usize, usize))> = patches
        .iter()
        .map(|(v, o)| (v.clone().insert_axis(ndarray::Axis(2)), *o))
        .collect();
    Ok(stitch(&lifted, dims)?.index_axis_move(ndarray::Axis(2), 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: (usize, usize),
    pub nuclei_count_range: (usize, usize),
    /// Semi-axis range in pixels.
    pub radius_range: (f64, f64),
    /// Scales the nucleus/background color difference; 1 is the default stain.
    pub intensity_contrast: f64,
    /// Allowed center approach: two nuclei keep a center distance of at least
    /// `(r1 + r2) * (1 - overlap_fraction)`.
    pub overlap_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            nuclei_count_range: (6, 10),
            radius_range: (4.0, 7.0),
            intensity_contrast: 1.0,
            overlap_fraction: 0.1,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return bad(format!("image size {h}x{w} is empty"));
        }
        let (nmin, nmax) = self.nuclei_count_range;
        if nmin > nmax {
            return bad(format!("nuclei count range ({nmin}, {nmax}) has min > max"));
        }
        let (rmin, rmax) = self.radius_range;
        if !(rmin.is_finite() && rmax.is_finite() && rmin >= 1.0 && rmin <= rmax) {
            return bad(format!(
                "radius range ({rmin}, {rmax}) must satisfy 1 <= min <= max"
            ));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return bad(format!(
                "overlap fraction {} must lie in [0, 1)",
                self.overlap_fraction
            ));
        }
        if !(self.intensity_contrast.is_finite() && self.intensity_contrast >= 0.0) {
            return bad(format!(
                "intensity contrast {} must be >= 0",
                self.intensity_contrast
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} must be >= 0", self.noise_sigma));
        }
        Ok(())
    }
}

const BACKGROUND_RGB: [f64; 3] = [0.90, 0.75, 0.85];
const NUCLEUS_RGB: [f64; 3] = [0.78, 0.35, 0.62];
const EDGE_SHARPNESS: f64 = 6.0;
const PLACEMENT_ATTEMPTS: usize = 200;
const IMAGE_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    row: f64,
    col: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius: 1 on the outline.
    fn rho(&self, r: f64, c: f64) -> f64 {
        let (dr, dc) = (r - self.row, c - self.col);
        let u = dc * self.cos + dr * self.sin;
        let v = -dc * self.sin + dr * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    fn extent(&self) -> f64 {
        self.a.max(self.b)
    }
}

fn place(cfg: &SynthConfig, n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Ellipse>> {
    let (h, w) = cfg.image_size;
    let mut out: Vec<Ellipse> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let a = rng.gen_range(cfg.radius_range.0..=cfg.radius_range.1);
            let b = rng.gen_range(cfg.radius_range.0..=cfg.radius_range.1);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let margin = a.max(b).ceil() as usize;
            if 2 * margin >= h || 2 * margin >= w {
                continue;
            }
            let e = Ellipse {
                row: rng.gen_range(margin..h - margin) as f64,
                col: rng.gen_range(margin..w - margin) as f64,
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
            };
            let clear = out.iter().all(|o| {
                let d = ((o.row - e.row).powi(2) + (o.col - e.col).powi(2)).sqrt();
                d >= (o.extent() + e.extent()) * (1.0 - cfg.overlap_fraction)
            });
            if clear {
                out.push(e);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(out)
}

/// Smooth background texture: a few low-frequency sinusoids.
fn texture(rng: &mut ChaCha8Rng, dims: (usize, usize)) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.005..0.02),
            )
        })
        .collect();
    Array2::from_shape_fn(dims, |(r, c)| {
        waves
            .iter()
            .map(|&(fr, fc, ph, amp)| amp * (fr * r as f64 + fc * c as f64 + ph).sin())
            .sum()
    })
}

/// Draws dark elliptical nuclei on a light textured background.
///
/// Instance ids are `1..=n` in row-major order of first appearance and
/// `points[i]` is the integer center of instance `i + 1`. Where two nuclei
/// overlap, a pixel belongs to the one whose outline is relatively farther.
pub fn synth_nuclei(cfg: &SynthConfig) -> Result<(RasterImage, InstanceMap, PointSet)> {
    cfg.validate()?;
    let dims = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = rng.gen_range(cfg.nuclei_count_range.0..=cfg.nuclei_count_range.1);

    for _ in 0..IMAGE_ATTEMPTS {
        let Some(nuclei) = place(cfg, n, &mut rng) else {
            continue;
        };
        let mut owner = Array2::<u32>::zeros(dims);
        let mut weight = Array2::<f64>::zeros(dims);
        for ((r, c), o) in owner.indexed_iter_mut() {
            let mut best = f64::INFINITY;
            for (k, e) in nuclei.iter().enumerate() {
                let rho = e.rho(r as f64, c as f64);
                if rho <= 1.0 && rho < best {
                    best = rho;
                    *o = k as u32 + 1;
                }
                let wgt = 1.0 / (1.0 + (EDGE_SHARPNESS * (rho - 1.0) * e.extent() / 2.0).exp());
                weight[[r, c]] = weight[[r, c]].max(wgt);
            }
        }
        let mut areas = vec![0usize; n];
        for &o in owner.iter().filter(|&&o| o > 0) {
            areas[o as usize - 1] += 1;
        }
        if areas.contains(&0) {
            continue;
        }

        let relabeled = InstanceMap::relabeled(&owner);
        let mut points = vec![Point::new(0, 0); n];
        for ((r, c), &o) in owner.indexed_iter() {
            if o > 0 {
                let id = relabeled.labels()[[r, c]] as usize;
                let e = &nuclei[o as usize - 1];
                points[id - 1] = Point::new(e.row as usize, e.col as usize);
            }
        }

        let bg_tex = texture(&mut rng, dims);
        let nuc_tex = texture(&mut rng, dims);
        let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let pixels = Array3::from_shape_fn((dims.0, dims.1, 3), |(r, c, k)| {
            let bg = BACKGROUND_RGB[k] + bg_tex[[r, c]];
            let nuc = BACKGROUND_RGB[k]
                - cfg.intensity_contrast * (BACKGROUND_RGB[k] - NUCLEUS_RGB[k])
                + 2.0 * nuc_tex[[r, c]];
            let w = weight[[r, c]];
            let eps = if cfg.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            ((1.0 - w) * bg + w * nuc + eps).clamp(0.0, 1.0) as f32
        });
        let image = RasterImage::new(pixels)?;
        let points = PointSet::new(points, dims)?;
        return Ok((image, relabeled, points));
    }
    Err(Error::Infeasible(format!(
        "could not place {n} nuclei with radii {:?} in a {}x{} image after {IMAGE_ATTEMPTS} attempts",
        cfg.radius_range, dims.0, dims.1
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetConfig {
    pub synth: SynthConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: 200,
            val: 0,
            test: 50,
        }
    }
}

/// Seed of image `index` in `split`; splits draw from disjoint seed ranges.
pub fn synth_image_seed(base: u64, split: Split, index: usize) -> u64 {
    let lane = match split {
        Split::Train => 0u64,
        Split::Val => 1,
        Split::Test => 2,
    };
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(lane << 40)
        .wrapping_add(index as u64)
}

/// Writes a synthetic dataset in the shared layout and returns its manifest.
pub fn write_synthetic_dataset(root: &Path, cfg: &SynthDatasetConfig) -> Result<DatasetManifest> {
    cfg.synth.validate()?;
    for (split, count) in [
        (Split::Train, cfg.train),
        (Split::Val, cfg.val),
        (Split::Test, cfg.test),
    ] {
        if count == 0 {
            continue;
        }
        let dir = root.join(split.name());
        for sub in ["images", "masks", "points"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        for i in 0..count {
            let item = SynthConfig {
                seed: synth_image_seed(cfg.synth.seed, split, i),
                ..cfg.synth.clone()
            };
            let (image, mask, points) = synth_nuclei(&item)?;
            let stem = format!("{}_{i:04}", split.name());
            io::write_image(&dir.join("images").join(format!("{stem}.png")), &image)?;
            io::write_instance_map(&dir.join("masks").join(format!("{stem}.png")), &mask)?;
            io::write_points(&dir.join("points").join(format!("{stem}.csv")), &points)?;
        }
    }
    load_manifest(root, DatasetProfile::Synthetic)
}
