//! Evaluation: pixel accuracy, mIoU, cluster→class confusion, Grad-CAM and
//! PNG renderings.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{LayerId, Mode, Model};
use crate::volume::{LabelMap, LabelVolume, SliceStack};

fn check_same_len(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Fraction of ground-truth pixels outside `ignore` that are predicted correctly.
pub fn pixel_accuracy(pred: &[u8], gt: &[u8], ignore: &[u8]) -> Result<f64> {
    check_same_len(pred, gt)?;
    let mut total = 0u64;
    let mut hit = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        if ignore.contains(&g) {
            continue;
        }
        total += 1;
        hit += (p == g) as u64;
    }
    if total == 0 {
        return Err(Error::InvalidArgument(
            "no evaluable pixels after ignoring classes".into(),
        ));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: u8,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pixel_accuracy: f64,
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
    /// Predicted classes that never occur in the ground truth; not averaged.
    pub predicted_only: Vec<u8>,
    pub ignored: Vec<u8>,
    pub evaluated_pixels: u64,
}

/// Mean IoU over ground-truth classes outside `ignore`.
pub fn miou(pred: &[u8], gt: &[u8], ignore: &[u8]) -> Result<MetricReport> {
    check_same_len(pred, gt)?;
    let mut inter = [0u64; 256];
    let mut pred_n = [0u64; 256];
    let mut gt_n = [0u64; 256];
    for (&p, &g) in pred.iter().zip(gt) {
        pred_n[p as usize] += 1;
        gt_n[g as usize] += 1;
        inter[p as usize] += (p == g) as u64;
    }
    let mut per_class = Vec::new();
    let mut predicted_only = Vec::new();
    for c in 0..256usize {
        if ignore.contains(&(c as u8)) {
            continue;
        }
        if gt_n[c] == 0 {
            if pred_n[c] > 0 {
                predicted_only.push(c as u8);
            }
            continue;
        }
        let union = pred_n[c] + gt_n[c] - inter[c];
        per_class.push(ClassIou {
            class: c as u8,
            iou: inter[c] as f64 / union as f64,
            intersection: inter[c],
            union,
        });
    }
    if per_class.is_empty() {
        return Err(Error::InvalidArgument(
            "no evaluable classes in the ground truth".into(),
        ));
    }
    let miou = per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len() as f64;
    let evaluated_pixels = gt.iter().filter(|g| !ignore.contains(g)).count() as u64;
    Ok(MetricReport {
        pixel_accuracy: pixel_accuracy(pred, gt, ignore)?,
        miou,
        per_class,
        predicted_only,
        ignored: ignore.to_vec(),
        evaluated_pixels,
    })
}

pub fn evaluate_volumes(pred: &LabelVolume, gt: &LabelVolume, ignore: &[u8]) -> Result<MetricReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    miou(pred.labels(), gt.labels(), ignore)
}

/// For every predicted label, the ground-truth class it overlaps most
/// (ties to the lowest class). Labels that never occur map to themselves.
pub fn majority_mapping(pred: &[u8], gt: &[u8]) -> Result<Vec<u8>> {
    check_same_len(pred, gt)?;
    let mut counts = vec![[0u64; 256]; 256];
    for (&p, &g) in pred.iter().zip(gt) {
        counts[p as usize][g as usize] += 1;
    }
    Ok((0..256)
        .map(|p| {
            let row = &counts[p];
            let mut best = 0;
            for g in 1..256 {
                if row[g] > row[best] {
                    best = g;
                }
            }
            if row[best] == 0 {
                p as u8
            } else {
                best as u8
            }
        })
        .collect())
}

/// mIoU after relabeling every predicted label to its majority ground-truth class.
pub fn matched_miou(pred: &[u8], gt: &[u8], ignore: &[u8]) -> Result<MetricReport> {
    let map = majority_mapping(pred, gt)?;
    let relabeled: Vec<u8> = pred.iter().map(|&p| map[p as usize]).collect();
    miou(&relabeled, gt, ignore)
}

/// Number of non-background classes holding more than `fraction` of the
/// non-background pixels of a labeling (class 0 is background).
pub fn occupied_classes(labels: &[u8], fraction: f64) -> usize {
    let mut n = [0u64; 256];
    for &l in labels {
        n[l as usize] += 1;
    }
    let fg: u64 = n[1..].iter().sum();
    if fg == 0 {
        return 0;
    }
    n[1..].iter().filter(|&&c| c as f64 > fraction * fg as f64).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterClassMatrix {
    /// Cluster id of each row.
    pub clusters: Vec<u8>,
    pub num_classes: usize,
    /// `counts[row][class]`.
    pub counts: Vec<Vec<u64>>,
    /// Voxel count before any rows were dropped.
    pub total_voxels: u64,
}

impl ClusterClassMatrix {
    pub fn column_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// Tab-separated table with a header row, as written by the CLI.
    pub fn to_table(&self) -> String {
        let mut s = String::from("cluster");
        for c in 0..self.num_classes {
            s.push_str(&format!("\tC{c}"));
        }
        s.push('\n');
        for (k, row) in self.clusters.iter().zip(&self.counts) {
            s.push_str(&format!("K{k}"));
            for v in row {
                s.push_str(&format!("\t{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Counts voxels that started in cluster `k` and ended in class `c`.
pub fn cluster_class_confusion(
    pseudo: &LabelVolume,
    final_labels: &LabelVolume,
    exclude_background: bool,
) -> Result<ClusterClassMatrix> {
    if pseudo.shape() != final_labels.shape() {
        return Err(Error::Shape(format!(
            "pseudo labels {:?} vs final labels {:?}",
            pseudo.shape(),
            final_labels.shape()
        )));
    }
    let kp = pseudo.num_classes();
    let kc = final_labels.num_classes();
    let mut counts = vec![vec![0u64; kc]; kp];
    for (&k, &c) in pseudo.labels().iter().zip(final_labels.labels()) {
        counts[k as usize][c as usize] += 1;
    }
    let total_voxels = pseudo.labels().len() as u64;
    let mut clusters: Vec<u8> = (0..kp as u8).collect();
    if exclude_background {
        counts.remove(0);
        clusters.remove(0);
    }
    Ok(ClusterClassMatrix {
        clusters,
        num_classes: kc,
        counts,
        total_voxels,
    })
}

/// Activations at a layer plus the logits they produce, for Grad-CAM.
pub struct CamForward {
    pub logits: Vec<f32>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub activation: Vec<f32>,
    pub act_channels: usize,
    pub act_height: usize,
    pub act_width: usize,
}

/// What Grad-CAM needs from a model: a forward pass exposing one layer and
/// the gradient of a logit cotangent with respect to that layer.
pub trait CamModel {
    type Pass;
    fn cam_forward(&self, stack: &SliceStack, layer: LayerId) -> Result<(CamForward, Self::Pass)>;
    fn cam_backward(&self, pass: &Self::Pass, layer: LayerId, dlogits: &[f32]) -> Vec<f32>;
}

impl CamModel for Model {
    type Pass = crate::segnet::Trace;

    fn cam_forward(&self, stack: &SliceStack, layer: LayerId) -> Result<(CamForward, Self::Pass)> {
        if !self.net.layers().contains(&layer) {
            return Err(Error::InvalidArgument(format!("model has no layer {layer}")));
        }
        self.net.check_input(stack.channels, stack.height, stack.width)?;
        let (logits, trace) =
            self.net
                .forward_sample(&self.params, &stack.data, stack.height, stack.width, &mut Mode::Eval)?;
        let (act, c, h, w) = trace.activation(layer).expect("layer checked above");
        let fwd = CamForward {
            logits,
            classes: self.net.config().num_classes,
            height: stack.height,
            width: stack.width,
            activation: act.to_vec(),
            act_channels: c,
            act_height: h,
            act_width: w,
        };
        Ok((fwd, trace))
    }

    fn cam_backward(&self, pass: &Self::Pass, layer: LayerId, dlogits: &[f32]) -> Vec<f32> {
        let mut scratch = vec![0.0; self.params.len()];
        self.net
            .backward_sample(&self.params, pass, dlogits, &mut scratch, Some(layer))
            .expect("tap requested")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamHeatmap {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub class: u8,
    pub layer: String,
    /// Set when the class is predicted nowhere; the map is then all zero.
    pub class_absent: bool,
    /// Maximum of the map before normalization.
    pub raw_max: f32,
    pub channel_weights: Vec<f32>,
}

/// Grad-CAM for segmentation. The class score is the mean of the target
/// logit over the pixels predicted as that class.
pub fn grad_cam<M: CamModel>(model: &M, stack: &SliceStack, target: u8, layer: LayerId) -> Result<CamHeatmap> {
    let (fwd, pass) = model.cam_forward(stack, layer)?;
    let k = fwd.classes;
    if target as usize >= k {
        return Err(Error::InvalidArgument(format!(
            "class {target} is out of range for {k} classes"
        )));
    }
    let m = fwd.height * fwd.width;
    let region: Vec<usize> = (0..m)
        .filter(|&i| {
            let mut best = 0;
            for c in 1..k {
                if fwd.logits[c * m + i] > fwd.logits[best * m + i] {
                    best = c;
                }
            }
            best == target as usize
        })
        .collect();
    let empty = CamHeatmap {
        values: vec![0.0; m],
        height: fwd.height,
        width: fwd.width,
        class: target,
        layer: layer.to_string(),
        class_absent: region.is_empty(),
        raw_max: 0.0,
        channel_weights: vec![0.0; fwd.act_channels],
    };
    if region.is_empty() {
        return Ok(empty);
    }
    let mut dlogits = vec![0.0f32; k * m];
    let share = 1.0 / region.len() as f32;
    for &i in &region {
        dlogits[target as usize * m + i] = share;
    }
    let dact = model.cam_backward(&pass, layer, &dlogits);
    let (c, h, w) = (fwd.act_channels, fwd.act_height, fwd.act_width);
    let hw = h * w;
    let weights: Vec<f32> = (0..c)
        .map(|ch| (dact[ch * hw..(ch + 1) * hw].iter().map(|&g| g as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    let mut low = vec![0.0f32; hw];
    for ch in 0..c {
        let a = &fwd.activation[ch * hw..(ch + 1) * hw];
        for i in 0..hw {
            low[i] += weights[ch] * a[i];
        }
    }
    for v in &mut low {
        *v = v.max(0.0);
    }
    let mut values = Vec::with_capacity(m);
    for r in 0..fwd.height {
        let sr = r * h / fwd.height;
        for col in 0..fwd.width {
            values.push(low[sr * w + col * w / fwd.width]);
        }
    }
    let raw_max = values.iter().cloned().fold(0.0f32, f32::max);
    if raw_max > 0.0 {
        for v in &mut values {
            *v /= raw_max;
        }
    }
    Ok(CamHeatmap {
        values,
        raw_max,
        channel_weights: weights,
        ..empty
    })
}

/// Class colours used by every label rendering; index = class id, wrapping.
pub const PALETTE: [[u8; 3]; 10] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [128, 128, 128],
];

pub fn class_color(class: u8) -> [u8; 3] {
    PALETTE[class as usize % PALETTE.len()]
}

fn save_image(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Heatmap as an 8-bit grayscale PNG (0 = no contribution, 255 = maximum).
pub fn save_heatmap_png(cam: &CamHeatmap, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(cam.width as u32, cam.height as u32, |c, r| {
        let v = cam.values[r as usize * cam.width + c as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    save_image(path, |p| img.save(p))
}

/// Label map rendered with [`PALETTE`].
pub fn save_labels_png(labels: &LabelMap, path: &Path) -> Result<()> {
    let img = RgbImage::from_fn(labels.width as u32, labels.height as u32, |c, r| {
        Rgb(class_color(labels.get(r as usize, c as usize)))
    });
    save_image(path, |p| img.save(p))
}

/// Grayscale slice in `[0, 1]` blended with label colours at opacity `alpha`.
pub fn save_overlay_png(slice: &[f32], labels: &LabelMap, alpha: f32, path: &Path) -> Result<()> {
    if slice.len() != labels.labels.len() {
        return Err(Error::Shape("overlay slice and labels differ in size".into()));
    }
    let img = RgbImage::from_fn(labels.width as u32, labels.height as u32, |c, r| {
        let i = r as usize * labels.width + c as usize;
        let g = slice[i].clamp(0.0, 1.0) * 255.0;
        let col = class_color(labels.labels[i]);
        Rgb(col.map(|v| ((1.0 - alpha) * g + alpha * v as f32).round() as u8))
    });
    save_image(path, |p| img.save(p))
}
