//! Volume ingestion, normalization, 2.5D slice stacking and cropping.
//!
//! Volumes are stored slice-major as `(depth, height, width)` in a flat
//! `Vec<f32>`. Two on-disk formats are supported:
//!
//! * a directory of lossless 2D rasters (PNG or TIFF) whose lexicographically
//!   sorted, zero-padded numeric filenames define slice order;
//! * a raw little-endian payload next to a TOML sidecar carrying
//!   `dtype`, `depth`, `height`, `width` and optionally `voxel_size_um`.
//!
//! Label volumes are persisted as raw `u8` plus the same sidecar with an
//! added `num_classes` key.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(depth, height, width)`.
pub type Shape3 = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    shape: Shape3,
    pub voxel_size_um: Option<f64>,
    value_range: (f32, f32),
}

impl Volume {
    pub fn new(shape: Shape3, data: Vec<f32>, voxel_size_um: Option<f64>) -> Result<Self> {
        let (d, h, w) = shape;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "volume dimensions must be positive, got {d}x{h}x{w}"
            )));
        }
        if data.len() != d * h * w {
            return Err(Error::Shape(format!(
                "expected {} voxels for shape {d}x{h}x{w}, got {}",
                d * h * w,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { slice: pos / (h * w) });
        }
        if let Some(vs) = voxel_size_um {
            if !(vs > 0.0) {
                return Err(Error::InvalidArgument(format!("voxel size must be positive, got {vs}")));
            }
        }
        let value_range = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        Ok(Self {
            data,
            shape,
            voxel_size_um,
            value_range,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn depth(&self) -> usize {
        self.shape.0
    }

    pub fn slice_len(&self) -> usize {
        self.shape.1 * self.shape.2
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn value_range(&self) -> (f32, f32) {
        self.value_range
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn get(&self, z: usize, r: usize, c: usize) -> f32 {
        let (_, h, w) = self.shape;
        self.data[(z * h + r) * w + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Pseudo,
    Predicted,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    labels: Vec<u8>,
    shape: Shape3,
    num_classes: usize,
    pub provenance: Provenance,
}

impl LabelVolume {
    pub fn new(shape: Shape3, labels: Vec<u8>, num_classes: usize, provenance: Provenance) -> Result<Self> {
        let (d, h, w) = shape;
        if !(2..=255).contains(&num_classes) {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be in 2..=255, got {num_classes}"
            )));
        }
        if d == 0 || h == 0 || w == 0 || labels.len() != d * h * w {
            return Err(Error::Shape(format!(
                "label payload of {} entries does not match shape {d}x{h}x{w}",
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= num_classes) {
            let (z, rem) = (pos / (h * w), pos % (h * w));
            return Err(Error::InvalidArgument(format!(
                "label {} at (slice {z}, row {}, col {}) is not below num_classes {num_classes}",
                labels[pos],
                rem / w,
                rem % w
            )));
        }
        Ok(Self {
            labels,
            shape,
            num_classes,
            provenance,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.shape.1 * self.shape.2;
        &self.labels[z * n..(z + 1) * n]
    }

    pub fn slice_map(&self, z: usize) -> LabelMap {
        LabelMap {
            labels: self.slice(z).to_vec(),
            height: self.shape.1,
            width: self.shape.2,
        }
    }

    /// Stacks per-slice label maps back into a volume.
    pub fn from_slices(maps: &[LabelMap], num_classes: usize, provenance: Provenance) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Shape("no slices supplied".into()))?;
        let (h, w) = (first.height, first.width);
        let mut labels = Vec::with_capacity(maps.len() * h * w);
        for (z, m) in maps.iter().enumerate() {
            if (m.height, m.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "slice {z} is {}x{}, expected {h}x{w}",
                    m.height, m.width
                )));
            }
            labels.extend_from_slice(&m.labels);
        }
        Self::new((maps.len(), h, w), labels, num_classes, provenance)
    }
}

/// A single 2D map of class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map of {} entries does not match {height}x{width}",
                labels.len()
            )));
        }
        Ok(Self { labels, height, width })
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.width + c]
    }

    pub fn crop(&self, origin: (usize, usize), size: (usize, usize)) -> Result<LabelMap> {
        let (r0, c0) = origin;
        let (h, w) = size;
        if r0 + h > self.height || c0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({r0},{c0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut labels = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            labels.extend_from_slice(&self.labels[r * self.width + c0..r * self.width + c0 + w]);
        }
        Ok(LabelMap {
            labels,
            height: h,
            width: w,
        })
    }
}

/// A 2.5D sample: `channels` adjacent slices sharing one `(height, width)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub data: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub center_index: usize,
    pub crop_origin: (usize, usize),
}

impl SliceStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>, center_index: usize) -> Result<Self> {
        if channels == 0 || channels % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice stacks need an odd channel count, got {channels}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "stack payload of {} values does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            channels,
            height,
            width,
            center_index,
            crop_origin: (0, 0),
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFormat {
    /// Directory of PNG/TIFF slices.
    Slices,
    /// Raw little-endian payload plus TOML sidecar.
    Raw,
    /// `Slices` for directories, `Raw` otherwise.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawDtype {
    U8,
    U16,
    F32,
}

impl RawDtype {
    fn size(self) -> usize {
        match self {
            RawDtype::U8 => 1,
            RawDtype::U16 => 2,
            RawDtype::F32 => 4,
        }
    }
}

/// Sidecar metadata for raw volumes and label volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dtype: RawDtype,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel_size_um: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("toml")
}

fn read_sidecar(raw: &Path) -> Result<Sidecar> {
    let path = sidecar_path(raw);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_sidecar(raw: &Path, sidecar: &Sidecar) -> Result<()> {
    let text = toml::to_string(sidecar).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&sidecar_path(raw), text.as_bytes())
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    match format {
        VolumeFormat::Slices => load_slice_dir(path),
        VolumeFormat::Raw => load_raw(path),
        VolumeFormat::Auto if path.is_dir() => load_slice_dir(path),
        VolumeFormat::Auto => load_raw(path),
    }
}

fn is_raster(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "tif" | "tiff")
    )
}

fn load_slice_dir(dir: &Path) -> Result<Volume> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_raster(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!(
            "{} contains no PNG or TIFF slices",
            dir.display()
        )));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for (z, file) in files.iter().enumerate() {
        let img = image::open(file).map_err(|e| Error::Image {
            path: file.clone(),
            message: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::Shape(format!(
                    "slice {z} ({}) is {h}x{w}, expected {}x{}",
                    file.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        match img {
            image::DynamicImage::ImageLuma8(buf) => data.extend(buf.into_raw().into_iter().map(f32::from)),
            image::DynamicImage::ImageLuma16(buf) => data.extend(buf.into_raw().into_iter().map(f32::from)),
            other => data.extend(other.to_luma32f().into_raw()),
        }
        let start = z * h * w;
        if data[start..].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { slice: z });
        }
    }
    let (h, w) = dims.expect("at least one slice");
    Volume::new((files.len(), h, w), data, None)
}

fn read_payload(path: &Path, sidecar: &Sidecar) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = sidecar.depth * sidecar.height * sidecar.width;
    let size = sidecar.dtype.size();
    if bytes.len() != expected * size {
        return Err(Error::Shape(format!(
            "sidecar declares {}x{}x{} ({expected} values) but {} holds {} bytes ({} values of {size} bytes)",
            sidecar.depth,
            sidecar.height,
            sidecar.width,
            path.display(),
            bytes.len(),
            bytes.len() as f64 / size as f64
        )));
    }
    Ok(bytes)
}

fn load_raw(path: &Path) -> Result<Volume> {
    let sidecar = read_sidecar(path)?;
    let bytes = read_payload(path, &sidecar)?;
    let data: Vec<f32> = match sidecar.dtype {
        RawDtype::U8 => bytes.iter().map(|&b| f32::from(b)).collect(),
        RawDtype::U16 => bytes
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        RawDtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    Volume::new(
        (sidecar.depth, sidecar.height, sidecar.width),
        data,
        sidecar.voxel_size_um,
    )
}

/// Persists a volume as raw little-endian `f32` with sidecar.
pub fn save_volume_raw(volume: &Volume, path: &Path) -> Result<()> {
    let (d, h, w) = volume.shape();
    let mut bytes = Vec::with_capacity(volume.data.len() * 4);
    for v in &volume.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    write_sidecar(
        path,
        &Sidecar {
            dtype: RawDtype::F32,
            depth: d,
            height: h,
            width: w,
            voxel_size_um: volume.voxel_size_um,
            num_classes: None,
            provenance: None,
        },
    )
}

pub fn save_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    let (d, h, w) = labels.shape();
    write_atomic(path, &labels.labels)?;
    write_sidecar(
        path,
        &Sidecar {
            dtype: RawDtype::U8,
            depth: d,
            height: h,
            width: w,
            voxel_size_um: None,
            num_classes: Some(labels.num_classes),
            provenance: Some(labels.provenance),
        },
    )
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let sidecar = read_sidecar(path)?;
    if sidecar.dtype != RawDtype::U8 {
        return Err(Error::Format(format!(
            "label volumes are stored as u8, sidecar says {:?}",
            sidecar.dtype
        )));
    }
    let num_classes = sidecar
        .num_classes
        .ok_or_else(|| Error::Format("label sidecar is missing num_classes".into()))?;
    let bytes = read_payload(path, &sidecar)?;
    LabelVolume::new(
        (sidecar.depth, sidecar.height, sidecar.width),
        bytes,
        num_classes,
        sidecar.provenance.unwrap_or(Provenance::Pseudo),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NormalizeMode {
    GlobalMinmax,
    Percentile { p_lo: f64, p_hi: f64 },
}

/// Linearly interpolated percentile of `values` (`p` in `[0, 100]`).
pub fn percentile(values: &[f32], p: f64) -> f32 {
    assert!(!values.is_empty());
    let mut buf = values.to_vec();
    let rank = p.clamp(0.0, 100.0) / 100.0 * (buf.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, lo_val, right) = buf.select_nth_unstable_by(lo, f32::total_cmp);
    let lo_val = *lo_val;
    if frac == 0.0 || right.is_empty() {
        return lo_val;
    }
    let hi_val = right.iter().copied().fold(f32::INFINITY, f32::min);
    (lo_val as f64 + frac * (hi_val as f64 - lo_val as f64)) as f32
}

/// Rescales the whole volume into `[0, 1]` using volume-global statistics.
pub fn normalize(volume: &Volume, mode: NormalizeMode) -> Result<Volume> {
    let (lo, hi) = match mode {
        NormalizeMode::GlobalMinmax => volume.value_range,
        NormalizeMode::Percentile { p_lo, p_hi } => {
            if !(0.0..=100.0).contains(&p_lo) || !(0.0..=100.0).contains(&p_hi) || p_lo >= p_hi {
                return Err(Error::InvalidArgument(format!(
                    "percentiles must satisfy 0 <= p_lo < p_hi <= 100, got ({p_lo}, {p_hi})"
                )));
            }
            (percentile(&volume.data, p_lo), percentile(&volume.data, p_hi))
        }
    };
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!(
            "cannot rescale a volume whose intensity range [{lo}, {hi}] is degenerate"
        )));
    }
    let lo64 = lo as f64;
    let span = hi as f64 - lo64;
    let data = volume
        .data
        .iter()
        .map(|&v| (((v as f64).clamp(lo64, hi as f64) - lo64) / span) as f32)
        .collect();
    Volume::new(volume.shape, data, volume.voxel_size_um)
}

/// Builds a 2.5D stack of `num_slices` slices centred on `center`, replicating
/// edge slices where the window leaves the volume.
pub fn extract_stack(volume: &Volume, center: usize, num_slices: usize) -> Result<SliceStack> {
    if num_slices == 0 || num_slices % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "num_slices must be odd and positive, got {num_slices}"
        )));
    }
    let (d, h, w) = volume.shape();
    if center >= d {
        return Err(Error::InvalidArgument(format!(
            "center slice {center} outside volume of depth {d}"
        )));
    }
    let r = (num_slices / 2) as isize;
    let mut data = Vec::with_capacity(num_slices * h * w);
    for offset in -r..=r {
        let z = (center as isize + offset).clamp(0, d as isize - 1) as usize;
        data.extend_from_slice(volume.slice(z));
    }
    SliceStack::new(num_slices, h, w, data, center)
}

/// Slice indices used by [`extract_stack`], in channel order.
pub fn stack_indices(depth: usize, center: usize, num_slices: usize) -> Vec<usize> {
    let r = (num_slices / 2) as isize;
    (-r..=r)
        .map(|o| (center as isize + o).clamp(0, depth as isize - 1) as usize)
        .collect()
}

/// Crops the same window out of every channel. The origin is drawn uniformly
/// from all valid positions.
pub fn random_crop<R: Rng + ?Sized>(stack: &SliceStack, size: (usize, usize), rng: &mut R) -> Result<SliceStack> {
    let (ch, cw) = size;
    if ch == 0 || cw == 0 || ch > stack.height || cw > stack.width {
        return Err(Error::InvalidArgument(format!(
            "crop {ch}x{cw} does not fit in a {}x{} slice",
            stack.height, stack.width
        )));
    }
    let r0 = rng.random_range(0..=stack.height - ch);
    let c0 = rng.random_range(0..=stack.width - cw);
    crop_at(stack, (r0, c0), size)
}

pub fn crop_at(stack: &SliceStack, origin: (usize, usize), size: (usize, usize)) -> Result<SliceStack> {
    let (r0, c0) = origin;
    let (ch, cw) = size;
    if r0 + ch > stack.height || c0 + cw > stack.width {
        return Err(Error::InvalidArgument(format!(
            "crop {ch}x{cw} at ({r0},{c0}) exceeds {}x{}",
            stack.height, stack.width
        )));
    }
    let mut data = Vec::with_capacity(stack.channels * ch * cw);
    for c in 0..stack.channels {
        let plane = stack.channel(c);
        for r in r0..r0 + ch {
            data.extend_from_slice(&plane[r * stack.width + c0..r * stack.width + c0 + cw]);
        }
    }
    Ok(SliceStack {
        data,
        channels: stack.channels,
        height: ch,
        width: cw,
        center_index: stack.center_index,
        crop_origin: (stack.crop_origin.0 + r0, stack.crop_origin.1 + c0),
    })
}
