//! Synthetic tomography-like volumes with exact ground truth.
//!
//! The sample is a cylinder along z (class `Background` outside it) filled
//! with a matrix phase and painted with blob, tube and shell phases until
//! each reaches its volume fraction. Corruptions are applied to intensities
//! afterwards from separate random streams, so changing any corruption never
//! changes the labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{miou, MetricReport};
use crate::volume::{LabelVolume, Provenance, Volume};

/// Thin structures cannot plausibly fill more of the volume than this.
pub const MAX_TUBE_FRACTION: f64 = 0.2;

pub const MIN_TUBE_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Structure {
    /// Everything outside the sample cylinder.
    Background,
    /// Fills whatever no other phase claims.
    Matrix,
    Blobs {
        radius_min: f64,
        radius_max: f64,
    },
    /// Smooth curvilinear tubes. A radius of at least 2 keeps every stretch
    /// of tube at least three slices thick on the voxel grid.
    Tubes {
        radius: f64,
    },
    /// Ring hugging the inside of the cylinder wall.
    Shell,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomClass {
    #[serde(serialize_with = "crate::config::short_f32")]
    pub mean: f32,
    pub fraction: f64,
    pub structure: Structure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    None,
    /// Ramp along an in-plane direction.
    Linear,
    /// Function of distance from the cylinder axis.
    Radial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Drift {
    pub kind: DriftKind,
    /// Intensities are multiplied by `1 + amplitude * t`, with `t` in `[-1, 1]`.
    pub amplitude: f64,
    /// Direction of the linear ramp in degrees (0 = along columns).
    pub angle_deg: f64,
}

impl Default for Drift {
    fn default() -> Self {
        Self {
            kind: DriftKind::None,
            amplitude: 0.0,
            angle_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Streaks {
    pub count: usize,
    pub width: f64,
    /// Signed additive intensity; each streak picks the sign at random.
    #[serde(serialize_with = "crate::config::short_f32")]
    pub contrast: f32,
}

impl Default for Streaks {
    fn default() -> Self {
        Self {
            count: 0,
            width: 1.0,
            contrast: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fringe {
    /// Band width in pixels on each side of a phase boundary (0 disables).
    pub width: usize,
    #[serde(serialize_with = "crate::config::short_f32")]
    pub contrast: f32,
}

impl Default for Fringe {
    fn default() -> Self {
        Self {
            width: 0,
            contrast: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// `(depth, height, width)`.
    pub shape: [usize; 3],
    pub classes: Vec<PhantomClass>,
    pub noise_sigma: f64,
    pub drift: Drift,
    pub streaks: Streaks,
    pub fringe: Fringe,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::three_phase([64, 128, 128], 0)
    }
}

impl PhantomSpec {
    /// Background, matrix and blob inclusions, uncorrupted.
    pub fn three_phase(shape: [usize; 3], seed: u64) -> Self {
        Self {
            shape,
            classes: vec![
                PhantomClass {
                    mean: 0.1,
                    fraction: 0.3,
                    structure: Structure::Background,
                },
                PhantomClass {
                    mean: 0.45,
                    fraction: 0.52,
                    structure: Structure::Matrix,
                },
                PhantomClass {
                    mean: 0.8,
                    fraction: 0.18,
                    structure: Structure::Blobs {
                        radius_min: 3.0,
                        radius_max: 9.0,
                    },
                },
            ],
            noise_sigma: 0.0,
            drift: Drift::default(),
            streaks: Streaks::default(),
            fringe: Fringe::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("phantom: {m}")));
        let [d, h, w] = self.shape;
        if d == 0 || h < 8 || w < 8 {
            return bad(format!("shape {:?} is too small", self.shape));
        }
        if self.classes.len() < 2 || self.classes.len() > 255 {
            return bad(format!("need 2..=255 classes, got {}", self.classes.len()));
        }
        let total: f64 = self.classes.iter().map(|c| c.fraction).sum();
        if (total - 1.0).abs() > 1e-6 {
            return bad(format!("class fractions sum to {total}, not 1"));
        }
        if self.classes.iter().any(|c| !(c.fraction >= 0.0)) {
            return bad("fractions must be non-negative".into());
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.mean == b.mean {
                    return bad(format!("two classes share mean intensity {}", a.mean));
                }
            }
        }
        let count = |pred: fn(&Structure) -> bool| self.classes.iter().filter(|c| pred(&c.structure)).count();
        if count(|s| matches!(s, Structure::Matrix)) != 1 {
            return bad("exactly one class must be the matrix".into());
        }
        if count(|s| matches!(s, Structure::Background)) > 1 || count(|s| matches!(s, Structure::Shell)) > 1 {
            return bad("at most one background and one shell class".into());
        }
        for c in &self.classes {
            match c.structure {
                Structure::Blobs { radius_min, radius_max } if !(radius_min >= 1.0 && radius_min <= radius_max) => {
                    return bad("blob radii need 1 <= radius_min <= radius_max".into());
                }
                Structure::Tubes { radius } if radius < MIN_TUBE_RADIUS => {
                    return bad(format!(
                        "tube radius {radius} < {MIN_TUBE_RADIUS} would not span three slices"
                    ));
                }
                Structure::Tubes { radius } if (d as f64) < 2.0 * radius + 1.0 => {
                    return bad(format!("depth {d} is too small for tubes of radius {radius}"));
                }
                Structure::Tubes { .. } if c.fraction > MAX_TUBE_FRACTION => {
                    return bad(format!(
                        "tube fraction {} is infeasible for thin structures (at most {MAX_TUBE_FRACTION})",
                        c.fraction
                    ));
                }
                _ => {}
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.drift.amplitude >= 0.0 && self.drift.amplitude < 1.0) {
            return bad("noise_sigma must be >= 0 and drift amplitude in [0, 1)".into());
        }
        Ok(())
    }

    fn background_fraction(&self) -> f64 {
        self.classes
            .iter()
            .find(|c| matches!(c.structure, Structure::Background))
            .map_or(0.0, |c| c.fraction)
    }
}

struct Grid {
    d: usize,
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl Grid {
    fn idx(&self, z: usize, r: usize, c: usize) -> usize {
        (z * self.h + r) * self.w + c
    }

    fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Paints `class` over matrix voxels within `radius` of the segment a-b.
    fn paint_capsule(&mut self, a: [f64; 3], b: [f64; 3], radius: f64, matrix: u8, class: u8) -> usize {
        let lo = |i: usize| (a[i].min(b[i]) - radius).floor().max(0.0) as usize;
        let hi = |i: usize, n: usize| ((a[i].max(b[i]) + radius).ceil() as usize).min(n - 1);
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len2 = ab.iter().map(|v| v * v).sum::<f64>();
        let r2 = radius * radius;
        let mut painted = 0;
        for z in lo(0)..=hi(0, self.d) {
            for r in lo(1)..=hi(1, self.h) {
                for c in lo(2)..=hi(2, self.w) {
                    let p = [z as f64 - a[0], r as f64 - a[1], c as f64 - a[2]];
                    let t = if len2 > 0.0 {
                        ((p[0] * ab[0] + p[1] * ab[1] + p[2] * ab[2]) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let dist2: f64 = (0..3).map(|i| (p[i] - t * ab[i]).powi(2)).sum();
                    let i = self.idx(z, r, c);
                    if dist2 <= r2 && self.labels[i] == matrix {
                        self.labels[i] = class;
                        painted += 1;
                    }
                }
            }
        }
        painted
    }
}

/// Ground truth, corrupted intensities, and the sample geometry.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub ground_truth: LabelVolume,
    /// Radius of the sample cylinder in pixels.
    pub cylinder_radius: f64,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let [d, h, w] = spec.shape;
    let n = d * h * w;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let plane = (h * w) as f64;

    let bg_frac = spec.background_fraction();
    let radius = ((1.0 - bg_frac) * plane / std::f64::consts::PI).sqrt();
    let max_r = (h.min(w) as f64) / 2.0;
    if radius > max_r {
        return Err(Error::Config(format!(
            "phantom: background fraction {bg_frac} needs a cylinder of radius {radius:.1}, \
             larger than the slice allows ({max_r:.1}); use a background fraction >= {:.3}",
            1.0 - std::f64::consts::PI * max_r * max_r / plane
        )));
    }
    let matrix = spec
        .classes
        .iter()
        .position(|c| matches!(c.structure, Structure::Matrix))
        .unwrap() as u8;
    let background = spec
        .classes
        .iter()
        .position(|c| matches!(c.structure, Structure::Background));

    let mut grid = Grid {
        d,
        h,
        w,
        labels: vec![matrix; n],
    };
    let rho = |r: usize, c: usize| ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
    if let Some(bg) = background {
        for z in 0..d {
            for r in 0..h {
                for c in 0..w {
                    if rho(r, c) > radius {
                        let i = grid.idx(z, r, c);
                        grid.labels[i] = bg as u8;
                    }
                }
            }
        }
    }

    // Shell: inner radius solved from its target fraction.
    let mut inner = radius;
    if let Some(si) = spec
        .classes
        .iter()
        .position(|c| matches!(c.structure, Structure::Shell))
    {
        let f = spec.classes[si].fraction;
        let inner2 = radius * radius - f * plane / std::f64::consts::PI;
        if inner2 <= 0.0 {
            return Err(Error::Config(format!(
                "phantom: shell fraction {f} exceeds the sample area"
            )));
        }
        inner = inner2.sqrt();
        for z in 0..d {
            for r in 0..h {
                for c in 0..w {
                    let p = rho(r, c);
                    let i = grid.idx(z, r, c);
                    if p <= radius && p > inner && grid.labels[i] == matrix {
                        grid.labels[i] = si as u8;
                    }
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    for (ci, class) in spec.classes.iter().enumerate() {
        let target = (class.fraction * n as f64).round() as usize;
        let ci = ci as u8;
        match class.structure {
            Structure::Blobs { radius_min, radius_max } => {
                let mut got = 0;
                let mut attempts = 0;
                while got < target {
                    attempts += 1;
                    if attempts > 200_000 {
                        return Err(Error::Config(format!(
                            "phantom: could not reach blob fraction {} (stuck at {:.4})",
                            class.fraction,
                            got as f64 / n as f64
                        )));
                    }
                    // Shrink the last blobs so the phase does not overshoot its target.
                    let fit = (3.0 * (target - got) as f64 / (4.0 * std::f64::consts::PI)).cbrt();
                    let br = rng.random_range(radius_min..=radius_max).min(fit.max(radius_min));
                    let room = inner - br;
                    if room <= 0.0 {
                        return Err(Error::Config(format!(
                            "phantom: blob radius {br} does not fit in the sample"
                        )));
                    }
                    let (pr, pc) = random_disc_point(&mut rng, room);
                    let z = rng.random_range(0.0..d as f64);
                    let centre = [z, cy + pr, cx + pc];
                    got += grid.paint_capsule(centre, centre, br, matrix, ci);
                }
            }
            Structure::Tubes { radius: tr } => {
                let mut got = 0;
                let mut attempts = 0;
                while got < target {
                    attempts += 1;
                    if attempts > 20_000 {
                        return Err(Error::Config(format!(
                            "phantom: tube fraction {} is infeasible for thin structures (reached {:.4})",
                            class.fraction,
                            got as f64 / n as f64
                        )));
                    }
                    got += paint_tube(&mut grid, &mut rng, tr, inner - tr, (cy, cx), matrix, ci, target - got);
                }
            }
            _ => {}
        }
    }
    for (ci, class) in spec.classes.iter().enumerate() {
        let got = grid.count(ci as u8) as f64 / n as f64;
        if (got - class.fraction).abs() > 0.02 {
            return Err(Error::Config(format!(
                "phantom: class {ci} ended at fraction {got:.4}, target {} is infeasible",
                class.fraction
            )));
        }
    }

    let intensities = corrupt(spec, &grid, radius, (cy, cx));
    let labels = grid.labels;
    Ok(Phantom {
        volume: Volume::new((d, h, w), intensities, None)?,
        ground_truth: LabelVolume::new((d, h, w), labels, spec.classes.len(), Provenance::GroundTruth)?,
        cylinder_radius: radius,
    })
}

fn random_disc_point(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    loop {
        let a = rng.random_range(-radius..=radius);
        let b = rng.random_range(-radius..=radius);
        if a * a + b * b <= radius * radius {
            return (a, b);
        }
    }
}

/// One smoothly wandering tube, clipped to the sample interior.
#[allow(clippy::too_many_arguments)]
fn paint_tube(
    grid: &mut Grid,
    rng: &mut ChaCha8Rng,
    radius: f64,
    room: f64,
    centre: (f64, f64),
    matrix: u8,
    class: u8,
    budget: usize,
) -> usize {
    if room <= 0.0 {
        return 0;
    }
    let (pr, pc) = random_disc_point(rng, room);
    // Keep the axis a radius away from the first and last slice so the tube
    // is never cut down to fewer than three slices.
    let (zlo, zhi) = (radius, grid.d as f64 - 1.0 - radius);
    let mut p = [rng.random_range(zlo..=zhi), centre.0 + pr, centre.1 + pc];
    let mut dir = random_unit(rng);
    let mut painted = 0;
    for _ in 0..60 {
        let mut next = [p[0] + 2.0 * dir[0], p[1] + 2.0 * dir[1], p[2] + 2.0 * dir[2]];
        next[0] = next[0].clamp(zlo, zhi);
        let off = ((next[1] - centre.0).powi(2) + (next[2] - centre.1).powi(2)).sqrt();
        if off > room {
            break;
        }
        painted += grid.paint_capsule(p, next, radius, matrix, class);
        if painted >= budget {
            break;
        }
        let jitter = random_unit(rng);
        for i in 0..3 {
            dir[i] = dir[i] + 0.3 * jitter[i];
        }
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        p = next;
    }
    painted
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.map(|x| x / norm);
        }
    }
}

fn corrupt(spec: &PhantomSpec, grid: &Grid, radius: f64, centre: (f64, f64)) -> Vec<f32> {
    let (d, h, w) = (grid.d, grid.h, grid.w);
    let means: Vec<f32> = spec.classes.iter().map(|c| c.mean).collect();
    let mut out: Vec<f32> = grid.labels.iter().map(|&l| means[l as usize]).collect();

    if spec.fringe.width > 0 {
        // A bright/dark pair straddling every in-plane boundary: the darker
        // side gets darker and the brighter side brighter.
        let fw = spec.fringe.width as isize;
        let base = out.clone();
        for z in 0..d {
            for r in 0..h {
                for c in 0..w {
                    let i = grid.idx(z, r, c);
                    let own = base[i];
                    let (mut brighter, mut darker) = (false, false);
                    for dr in -fw..=fw {
                        for dc in -fw..=fw {
                            let (rr, cc) = (r as isize + dr, c as isize + dc);
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                continue;
                            }
                            let v = base[grid.idx(z, rr as usize, cc as usize)];
                            brighter |= v > own;
                            darker |= v < own;
                        }
                    }
                    if brighter && !darker {
                        out[i] -= spec.fringe.contrast;
                    } else if darker && !brighter {
                        out[i] += spec.fringe.contrast;
                    }
                }
            }
        }
    }

    if spec.streaks.count > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(2);
        for _ in 0..spec.streaks.count {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let offset = rng.random_range(-radius..=radius);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let z0 = rng.random_range(0..d);
            let z1 = (z0 + rng.random_range(1..=d)).min(d);
            let (nr, nc) = (theta.sin(), theta.cos());
            for z in z0..z1 {
                for r in 0..h {
                    for c in 0..w {
                        let dist = ((r as f64 - centre.0) * nr + (c as f64 - centre.1) * nc - offset).abs();
                        if dist <= spec.streaks.width / 2.0 {
                            out[grid.idx(z, r, c)] += sign * spec.streaks.contrast;
                        }
                    }
                }
            }
        }
    }

    if spec.drift.kind != DriftKind::None && spec.drift.amplitude > 0.0 {
        let a = spec.drift.amplitude;
        let th = spec.drift.angle_deg.to_radians();
        let half = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt().max(1.0);
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = (r as f64 - centre.0, c as f64 - centre.1);
                let t = match spec.drift.kind {
                    DriftKind::Linear => ((dx * th.cos() + dy * th.sin()) / radius.max(1.0)).clamp(-1.0, 1.0),
                    DriftKind::Radial => (2.0 * (dx * dx + dy * dy).sqrt() / half - 1.0).clamp(-1.0, 1.0),
                    DriftKind::None => 0.0,
                };
                let g = (1.0 + a * t) as f32;
                for z in 0..d {
                    out[grid.idx(z, r, c)] *= g;
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1);
        let n = Normal::new(0.0, spec.noise_sigma).unwrap();
        for v in &mut out {
            *v += n.sample(&mut rng) as f32;
        }
    }
    out
}

/// Pseudo-label quality against ground truth, background (class 0) ignored.
pub fn corruption_report(gt: &LabelVolume, pseudo: &LabelVolume) -> Result<MetricReport> {
    if gt.shape() != pseudo.shape() {
        return Err(Error::Shape(format!(
            "ground truth {:?} vs pseudo labels {:?}",
            gt.shape(),
            pseudo.shape()
        )));
    }
    miou(pseudo.labels(), gt.labels(), &[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudolabel::{generate_pseudolabels, PseudoLabelConfig};
    use crate::volume::{normalize, NormalizeMode};

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec::three_phase([8, 48, 48], seed)
    }

    fn fractions(l: &LabelVolume, k: usize) -> Vec<f64> {
        let n = l.labels().len() as f64;
        (0..k)
            .map(|c| l.labels().iter().filter(|&&v| v as usize == c).count() as f64 / n)
            .collect()
    }

    #[test]
    fn deterministic_and_fractions_hold() {
        let a = generate_phantom(&small(1)).unwrap();
        let b = generate_phantom(&small(1)).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.ground_truth, b.ground_truth);
        for (got, c) in fractions(&a.ground_truth, 3).iter().zip(&small(1).classes) {
            assert!((got - c.fraction).abs() < 0.02, "{got} vs {}", c.fraction);
        }
    }

    #[test]
    fn labels_ignore_corruptions() {
        let clean = generate_phantom(&small(2)).unwrap();
        let mut s = small(2);
        s.noise_sigma = 0.1;
        s.drift = Drift {
            kind: DriftKind::Linear,
            amplitude: 0.3,
            angle_deg: 30.0,
        };
        s.streaks = Streaks {
            count: 3,
            width: 2.0,
            contrast: 0.2,
        };
        s.fringe = Fringe {
            width: 1,
            contrast: 0.05,
        };
        let dirty = generate_phantom(&s).unwrap();
        assert_eq!(clean.ground_truth, dirty.ground_truth);
        assert_ne!(clean.volume, dirty.volume);
    }

    #[test]
    fn noiseless_kmeans_recovers_ground_truth() {
        let p = generate_phantom(&small(3)).unwrap();
        let v = normalize(&p.volume, NormalizeMode::GlobalMinmax).unwrap();
        let (pseudo, _) = generate_pseudolabels(
            &v,
            &PseudoLabelConfig {
                k: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(pseudo.labels(), p.ground_truth.labels());
    }

    #[test]
    fn strong_drift_breaks_pseudo_labels() {
        // Matrix mean 0.45 * amplitude 0.5 = 0.225 > half the 0.35 gap.
        let mut s = small(4);
        s.drift = Drift {
            kind: DriftKind::Linear,
            amplitude: 0.5,
            angle_deg: 0.0,
        };
        let p = generate_phantom(&s).unwrap();
        let v = normalize(&p.volume, NormalizeMode::GlobalMinmax).unwrap();
        let (pseudo, _) = generate_pseudolabels(
            &v,
            &PseudoLabelConfig {
                k: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let r = corruption_report(&p.ground_truth, &pseudo).unwrap();
        assert!(r.miou < 0.9, "{}", r.miou);
    }

    #[test]
    fn tubes_and_shell_are_generated() {
        let spec = PhantomSpec {
            classes: vec![
                PhantomClass {
                    mean: 0.0,
                    fraction: 0.35,
                    structure: Structure::Background,
                },
                PhantomClass {
                    mean: 0.4,
                    fraction: 0.47,
                    structure: Structure::Matrix,
                },
                PhantomClass {
                    mean: 0.7,
                    fraction: 0.03,
                    structure: Structure::Tubes { radius: 2.0 },
                },
                PhantomClass {
                    mean: 0.9,
                    fraction: 0.15,
                    structure: Structure::Shell,
                },
            ],
            ..PhantomSpec::three_phase([12, 48, 48], 5)
        };
        let p = generate_phantom(&spec).unwrap();
        let f = fractions(&p.ground_truth, 4);
        for (got, c) in f.iter().zip(&spec.classes) {
            assert!((got - c.fraction).abs() < 0.02, "{f:?}");
        }
        // Every tube voxel has tube voxels in at least three distinct slices
        // of its in-plane neighbourhood column.
        let (d, h, w) = p.ground_truth.shape();
        let l = p.ground_truth.labels();
        for z in 0..d {
            for i in 0..h * w {
                if l[z * h * w + i] == 2 {
                    let r0 = i / w;
                    let c0 = i % w;
                    let mut zs = std::collections::BTreeSet::new();
                    for zz in z.saturating_sub(3)..(z + 4).min(d) {
                        for r in r0.saturating_sub(3)..(r0 + 4).min(h) {
                            for c in c0.saturating_sub(3)..(c0 + 4).min(w) {
                                if l[zz * h * w + r * w + c] == 2 {
                                    zs.insert(zz);
                                }
                            }
                        }
                    }
                    assert!(zs.len() >= 3 || d < 3, "tube at z={z} spans {zs:?}");
                }
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut s = small(0);
        s.classes[0].fraction = 0.1;
        s.classes[1].fraction = 0.72;
        assert!(generate_phantom(&s).unwrap_err().is_config());
        let mut s = small(0);
        s.classes[2].mean = 0.45;
        assert!(s.validate().is_err());
        let mut s = small(0);
        s.classes[1].fraction = 0.6;
        assert!(s.validate().is_err());
        let mut s = small(0);
        s.classes[2].structure = Structure::Tubes { radius: 1.5 };
        assert!(s.validate().is_err());
        s.classes[2].structure = Structure::Tubes { radius: 2.0 };
        s.classes[2].fraction = 0.6;
        s.classes[1].fraction = 0.1;
        assert!(generate_phantom(&s).is_err());
    }

    #[test]
    fn corruption_report_examples() {
        let p = generate_phantom(&small(6)).unwrap();
        assert_eq!(corruption_report(&p.ground_truth, &p.ground_truth).unwrap().miou, 1.0);
        // Flip half of class 2 to class 1: IoU_2 = 1/2, IoU_1 = n1 / (n1 + n2/2).
        let mut flipped = p.ground_truth.labels().to_vec();
        let mut seen = 0;
        let n2 = flipped.iter().filter(|&&v| v == 2).count();
        let n1 = flipped.iter().filter(|&&v| v == 1).count();
        for v in &mut flipped {
            if *v == 2 {
                if seen < n2 / 2 {
                    *v = 1;
                }
                seen += 1;
            }
        }
        let f = LabelVolume::new(p.ground_truth.shape(), flipped, 3, Provenance::Pseudo).unwrap();
        let r = corruption_report(&p.ground_truth, &f).unwrap();
        let moved = (n2 / 2) as f64;
        let want = ((n1 as f64 / (n1 as f64 + moved)) + (n2 as f64 - moved) / n2 as f64) / 2.0;
        assert!((r.miou - want).abs() < 1e-12);
    }
}
