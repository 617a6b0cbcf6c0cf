//! Weak (geometric) and strong (photometric) augmentation.
//!
//! Weak ops are the eight elements of the square's symmetry group and move
//! pixels; they are applied identically to every channel and to the paired
//! label map. Strong ops only rewrite values, so labels never need them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, SliceStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakOp {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
    /// Reflection about the main diagonal.
    Transpose,
    /// Reflection about the anti-diagonal.
    AntiTranspose,
}

impl WeakOp {
    pub const ALL: [WeakOp; 8] = [
        WeakOp::Identity,
        WeakOp::Rot90,
        WeakOp::Rot180,
        WeakOp::Rot270,
        WeakOp::FlipHorizontal,
        WeakOp::FlipVertical,
        WeakOp::Transpose,
        WeakOp::AntiTranspose,
    ];

    /// Ops that swap the two axes; these need a square plane.
    pub fn swaps_axes(self) -> bool {
        matches!(
            self,
            WeakOp::Rot90 | WeakOp::Rot270 | WeakOp::Transpose | WeakOp::AntiTranspose
        )
    }

    pub fn inverse(self) -> WeakOp {
        match self {
            WeakOp::Rot90 => WeakOp::Rot270,
            WeakOp::Rot270 => WeakOp::Rot90,
            other => other,
        }
    }

    /// Source coordinate that lands at `(r, c)` of an `n_rows x n_cols` output.
    fn source(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        // h, w are the input dimensions; output has the same (square when swapping).
        match self {
            WeakOp::Identity => (r, c),
            // counter-clockwise: out[r][c] = in[c][w-1-r]
            WeakOp::Rot90 => (c, w - 1 - r),
            WeakOp::Rot180 => (h - 1 - r, w - 1 - c),
            WeakOp::Rot270 => (h - 1 - c, r),
            WeakOp::FlipHorizontal => (r, w - 1 - c),
            WeakOp::FlipVertical => (h - 1 - r, c),
            WeakOp::Transpose => (c, r),
            WeakOp::AntiTranspose => (h - 1 - c, w - 1 - r),
        }
    }

    fn check(self, h: usize, w: usize) -> Result<()> {
        if self.swaps_axes() && h != w {
            return Err(Error::InvalidArgument(format!(
                "{self:?} needs a square plane, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Applies the op to one row-major `h x w` plane.
    pub fn apply_plane<T: Copy>(self, src: &[T], h: usize, w: usize) -> Result<Vec<T>> {
        assert_eq!(src.len(), h * w);
        self.check(h, w)?;
        let mut out = Vec::with_capacity(src.len());
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = self.source(r, c, h, w);
                out.push(src[sr * w + sc]);
            }
        }
        Ok(out)
    }

    pub fn apply_stack(self, s: &SliceStack) -> Result<SliceStack> {
        self.check(s.height, s.width)?;
        let plane = s.plane_len();
        let mut data = Vec::with_capacity(s.data.len());
        for ch in 0..s.channels {
            data.extend(self.apply_plane(&s.data[ch * plane..(ch + 1) * plane], s.height, s.width)?);
        }
        Ok(SliceStack { data, ..s.clone() })
    }

    pub fn apply_labels(self, l: &LabelMap) -> Result<LabelMap> {
        Ok(LabelMap {
            labels: self.apply_plane(&l.labels, l.height, l.width)?,
            ..l.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakPolicy {
    pub enabled: bool,
    /// Ops drawn uniformly per call.
    pub ops: Vec<WeakOp>,
}

impl Default for WeakPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            ops: WeakOp::ALL.to_vec(),
        }
    }
}

impl WeakPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ops: vec![WeakOp::Identity],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> WeakOp {
        if !self.enabled || self.ops.is_empty() {
            return WeakOp::Identity;
        }
        self.ops[rng.random_range(0..self.ops.len())]
    }
}

/// Draws one op from `policy` and applies it to the stack and (optionally) the labels.
pub fn weak_augment<R: Rng + ?Sized>(
    policy: &WeakPolicy,
    stack: &SliceStack,
    labels: Option<&LabelMap>,
    rng: &mut R,
) -> Result<(SliceStack, Option<LabelMap>, WeakOp)> {
    let op = policy.sample(rng);
    if let Some(l) = labels {
        if (l.height, l.width) != (stack.height, stack.width) {
            return Err(Error::Shape(format!(
                "label map {}x{} does not match stack {}x{}",
                l.height, l.width, stack.height, stack.width
            )));
        }
    }
    let s = op.apply_stack(stack)?;
    let l = labels.map(|l| op.apply_labels(l)).transpose()?;
    Ok((s, l, op))
}

/// Seeded convenience wrapper around [`weak_augment`].
pub fn weak_augment_seeded(
    policy: &WeakPolicy,
    stack: &SliceStack,
    labels: Option<&LabelMap>,
    seed: u64,
) -> Result<(SliceStack, Option<LabelMap>, WeakOp)> {
    weak_augment(policy, stack, labels, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeOp {
    pub probability: f64,
    pub low: f64,
    pub high: f64,
}

impl RangeOp {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        // Both draws are always taken so the stream does not depend on the gate.
        let gate = rng.random::<f64>() < self.probability;
        let t = rng.random::<f64>();
        gate.then(|| self.low + t * (self.high - self.low))
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) || !(self.low <= self.high) {
            return Err(Error::Config(format!(
                "augment.strong.{name}: probability must be in [0,1] and low <= high"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaheOp {
    pub probability: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub tiles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongPolicy {
    pub enabled: bool,
    /// Exponent range for `x^gamma`.
    pub gamma: RangeOp,
    /// Additive offset range.
    pub brightness: RangeOp,
    /// Contrast factor offset range; the factor is `1 + delta`.
    pub contrast: RangeOp,
    pub clahe: ClaheOp,
}

/// Ranges are deliberately mild. Each op has to leave the classes
/// distinguishable, or the student is trained towards targets its input
/// cannot support and the EMA hands that damage to the teacher; e.g. a gamma
/// of 1.6 moves a 0.45 matrix voxel below a 0.3 value. CLAHE is off by
/// default for the same reason: local equalization remaps intensities per
/// tile, which on low-contrast phases erases exactly the cue the labels rest on.
impl Default for StrongPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            gamma: RangeOp {
                probability: 0.5,
                low: 0.8,
                high: 1.25,
            },
            brightness: RangeOp {
                probability: 0.5,
                low: -0.05,
                high: 0.05,
            },
            contrast: RangeOp {
                probability: 0.5,
                low: -0.1,
                high: 0.1,
            },
            clahe: ClaheOp {
                probability: 0.0,
                clip_low: 1.5,
                clip_high: 4.0,
                tiles: 4,
            },
        }
    }
}

/// Concrete photometric parameters for one call; `None` means the op is skipped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StrongParams {
    pub gamma: Option<f64>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub clahe_clip: Option<f64>,
    pub clahe_tiles: usize,
}

impl StrongPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gamma.validate("gamma")?;
        if self.gamma.low <= 0.0 {
            return Err(Error::Config("augment.strong.gamma: exponents must be positive".into()));
        }
        self.brightness.validate("brightness")?;
        self.contrast.validate("contrast")?;
        if self.contrast.low <= -1.0 {
            return Err(Error::Config("augment.strong.contrast: low must exceed -1".into()));
        }
        let c = &self.clahe;
        if !(0.0..=1.0).contains(&c.probability) || !(c.clip_low <= c.clip_high) || c.clip_low <= 0.0 || c.tiles == 0 {
            return Err(Error::Config(
                "augment.strong.clahe: need probability in [0,1], 0 < clip_low <= clip_high, tiles >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StrongParams {
        let gamma = self.gamma.sample(rng);
        let brightness = self.brightness.sample(rng);
        let contrast = self.contrast.sample(rng);
        let clahe = RangeOp {
            probability: self.clahe.probability,
            low: self.clahe.clip_low,
            high: self.clahe.clip_high,
        }
        .sample(rng);
        if !self.enabled {
            return StrongParams::default();
        }
        StrongParams {
            gamma,
            brightness,
            contrast,
            clahe_clip: clahe,
            clahe_tiles: self.clahe.tiles,
        }
    }
}

/// Applies fixed photometric parameters to every channel; output is clipped to `[0, 1]`.
pub fn apply_strong(stack: &SliceStack, p: &StrongParams) -> SliceStack {
    let mut data = stack.data.clone();
    if let Some(g) = p.gamma {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0).powf(g as f32);
        }
    }
    if let Some(b) = p.brightness {
        for v in &mut data {
            *v = (*v + b as f32).clamp(0.0, 1.0);
        }
    }
    if let Some(c) = p.contrast {
        let mean = (data.iter().map(|&v| v as f64).sum::<f64>() / data.len().max(1) as f64) as f32;
        let f = 1.0 + c as f32;
        for v in &mut data {
            *v = ((*v - mean) * f + mean).clamp(0.0, 1.0);
        }
    }
    if let Some(clip) = p.clahe_clip {
        let plane = stack.plane_len();
        for ch in 0..stack.channels {
            let out = clahe(
                &data[ch * plane..(ch + 1) * plane],
                stack.height,
                stack.width,
                clip,
                p.clahe_tiles,
            );
            data[ch * plane..(ch + 1) * plane].copy_from_slice(&out);
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    SliceStack { data, ..stack.clone() }
}

pub fn strong_augment<R: Rng + ?Sized>(
    policy: &StrongPolicy,
    stack: &SliceStack,
    rng: &mut R,
) -> (SliceStack, StrongParams) {
    let params = policy.sample(rng);
    (apply_strong(stack, &params), params)
}

pub fn strong_augment_seeded(policy: &StrongPolicy, stack: &SliceStack, seed: u64) -> SliceStack {
    strong_augment(policy, stack, &mut ChaCha8Rng::seed_from_u64(seed)).0
}

const BINS: usize = 256;

fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * (BINS - 1) as f32).round()) as usize
}

/// Clipped-histogram lookup table for one region: `lut[b]` in `[0, 1]`.
fn region_lut(plane: &[f32], w: usize, rows: (usize, usize), cols: (usize, usize), clip: Option<f64>) -> [f32; BINS] {
    let mut hist = [0f64; BINS];
    for r in rows.0..rows.1 {
        for c in cols.0..cols.1 {
            hist[bin_of(plane[r * w + c])] += 1.0;
        }
    }
    let n = ((rows.1 - rows.0) * (cols.1 - cols.0)) as f64;
    if let Some(limit) = clip {
        let cap = (limit * n / BINS as f64).max(1.0);
        let mut excess = 0.0;
        for h in &mut hist {
            if *h > cap {
                excess += *h - cap;
                *h = cap;
            }
        }
        let share = excess / BINS as f64;
        for h in &mut hist {
            *h += share;
        }
    }
    let mut lut = [0f32; BINS];
    let mut acc = 0.0;
    for (b, h) in hist.iter().enumerate() {
        acc += h;
        lut[b] = (acc / n) as f32;
    }
    lut
}

/// Global histogram equalization of one plane (no clipping).
pub fn equalize_histogram(plane: &[f32], h: usize, w: usize) -> Vec<f32> {
    let lut = region_lut(plane, w, (0, h), (0, w), None);
    plane.iter().map(|&v| lut[bin_of(v)]).collect()
}

/// Contrast-limited adaptive histogram equalization on a `tiles x tiles`
/// grid, bilinearly blending the lookup tables of neighbouring tile centres.
pub fn clahe(plane: &[f32], h: usize, w: usize, clip_limit: f64, tiles: usize) -> Vec<f32> {
    let ty = tiles.min(h).max(1);
    let tx = tiles.min(w).max(1);
    let bounds = |n: usize, t: usize, i: usize| (i * n / t, (i + 1) * n / t);
    let mut luts = Vec::with_capacity(ty * tx);
    for i in 0..ty {
        for j in 0..tx {
            luts.push(region_lut(
                plane,
                w,
                bounds(h, ty, i),
                bounds(w, tx, j),
                Some(clip_limit),
            ));
        }
    }
    // Fractional tile coordinate of a pixel relative to tile centres.
    let coord = |p: usize, n: usize, t: usize| -> (usize, usize, f32) {
        let f = (p as f32 + 0.5) * t as f32 / n as f32 - 0.5;
        if f <= 0.0 {
            (0, 0, 0.0)
        } else if f >= (t - 1) as f32 {
            (t - 1, t - 1, 0.0)
        } else {
            let i = f.floor() as usize;
            (i, i + 1, f - i as f32)
        }
    };
    let mut out = Vec::with_capacity(plane.len());
    for r in 0..h {
        let (y0, y1, fy) = coord(r, h, ty);
        for c in 0..w {
            let (x0, x1, fx) = coord(c, w, tx);
            let b = bin_of(plane[r * w + c]);
            let top = luts[y0 * tx + x0][b] * (1.0 - fx) + luts[y0 * tx + x1][b] * fx;
            let bot = luts[y1 * tx + x0][b] * (1.0 - fx) + luts[y1 * tx + x1][b] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub weak: WeakPolicy,
    pub strong: StrongPolicy,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            weak: WeakPolicy::disabled(),
            strong: StrongPolicy::disabled(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strong.validate()
    }
}
