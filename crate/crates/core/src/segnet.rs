//! Encoder-decoder segmentation network with optional skip connections.
//!
//! Every level is a double 3x3 convolution block
//! (`conv -> GroupNorm -> PReLU -> conv -> GroupNorm -> PReLU -> dropout`).
//! Encoder levels are joined by 2x2 max pooling, decoder levels by 2x2
//! stride-2 transposed convolutions, and a 1x1 head maps to class logits.
//! With skip connections disabled the decoder only sees upsampled features,
//! which turns the network into a plain convolutional autoencoder.
//!
//! Parameters live in a flat `Vec<f32>` described by a [`ParamLayout`], so a
//! student and its EMA teacher can share one [`SegNet`] description.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{self, ConvShape, GroupNormCache};
use crate::nn::ParamLayout;
use crate::volume::{extract_stack, LabelMap, LabelVolume, Provenance, SliceStack, Volume};

const PRELU_INIT: f32 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_width: usize,
    pub skip_connections: bool,
    #[serde(serialize_with = "crate::config::short_f32")]
    pub dropout_rate: f32,
    pub norm_groups: usize,
    /// Nominal square training input; used to reject depths that would
    /// shrink the bottleneck to nothing.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ModelConfig {
    /// Roughly 2M trainable parameters for 7-slice, 4-class input.
    pub fn reference() -> Self {
        Self {
            in_channels: 7,
            num_classes: 4,
            depth: 4,
            base_width: 16,
            skip_connections: true,
            dropout_rate: 0.1,
            norm_groups: 8,
            input_size: 512,
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 {
            return Err(Error::Config("model depth and base_width must be at least 1".into()));
        }
        if self.in_channels == 0 || self.in_channels % 2 == 0 {
            return Err(Error::Config(format!(
                "in_channels must be odd (2.5D stacks), got {}",
                self.in_channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.norm_groups == 0 {
            return Err(Error::Config("norm_groups must be positive".into()));
        }
        for level in 0..=self.depth {
            let w = self.width(level);
            if w % self.groups_for(w) != 0 {
                return Err(Error::Config(format!(
                    "width {w} at level {level} not divisible into groups"
                )));
            }
        }
        let mut size = self.input_size;
        for level in 1..=self.depth {
            if size % 2 != 0 || size / 2 == 0 {
                return Err(Error::Config(format!(
                    "input size {} collapses to a zero-size or odd feature map at level {level}",
                    self.input_size
                )));
            }
            size /= 2;
        }
        Ok(())
    }

    /// Group count for a `channels`-wide normalization: the configured
    /// count, reduced to the largest divisor of `channels` not above it.
    pub fn groups_for(&self, channels: usize) -> usize {
        (1..=self.norm_groups.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1)
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth
    }
}

/// Named activation site used by Grad-CAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerId {
    Encoder(usize),
    Bottleneck,
    Decoder(usize),
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Encoder(l) => write!(f, "enc{l}"),
            LayerId::Bottleneck => write!(f, "bottleneck"),
            LayerId::Decoder(l) => write!(f, "dec{l}"),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown layer '{s}' (expected encN, bottleneck or decN)"));
        if s == "bottleneck" {
            return Ok(LayerId::Bottleneck);
        }
        if let Some(n) = s.strip_prefix("enc") {
            return n.parse().map(LayerId::Encoder).map_err(|_| bad());
        }
        if let Some(n) = s.strip_prefix("dec") {
            return n.parse().map(LayerId::Decoder).map_err(|_| bad());
        }
        Err(bad())
    }
}

/// Feature source for a decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderInput {
    Upsampled,
    EncoderSkip(usize),
}

#[derive(Debug, Clone)]
struct ConvDef {
    cin: usize,
    cout: usize,
    k: usize,
    w: Range<usize>,
    b: Range<usize>,
}

#[derive(Debug, Clone)]
struct NormDef {
    groups: usize,
    gamma: Range<usize>,
    beta: Range<usize>,
}

#[derive(Debug, Clone)]
struct BlockDef {
    cin: usize,
    cout: usize,
    conv1: ConvDef,
    norm1: NormDef,
    act1: Range<usize>,
    conv2: ConvDef,
    norm2: NormDef,
    act2: Range<usize>,
}

#[derive(Debug, Clone)]
struct UpDef {
    cin: usize,
    cout: usize,
    w: Range<usize>,
    b: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct SegNet {
    cfg: ModelConfig,
    layout: ParamLayout,
    enc: Vec<BlockDef>,
    bottleneck: BlockDef,
    ups: Vec<UpDef>,
    dec: Vec<BlockDef>,
    head: ConvDef,
}

fn add_conv(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize) -> ConvDef {
    let w = layout.add(format!("{name}.weight"), &[cout, cin, k, k]);
    let b = layout.add(format!("{name}.bias"), &[cout]);
    ConvDef { cin, cout, k, w, b }
}

fn add_norm(layout: &mut ParamLayout, name: &str, c: usize, groups: usize) -> NormDef {
    let gamma = layout.add(format!("{name}.gamma"), &[c]);
    let beta = layout.add(format!("{name}.beta"), &[c]);
    NormDef { groups, gamma, beta }
}

fn add_block(layout: &mut ParamLayout, cfg: &ModelConfig, name: &str, cin: usize, cout: usize) -> BlockDef {
    let groups = cfg.groups_for(cout);
    let conv1 = add_conv(layout, &format!("{name}.conv1"), cin, cout, 3);
    let norm1 = add_norm(layout, &format!("{name}.norm1"), cout, groups);
    let act1 = layout.add(format!("{name}.act1.slope"), &[cout]);
    let conv2 = add_conv(layout, &format!("{name}.conv2"), cout, cout, 3);
    let norm2 = add_norm(layout, &format!("{name}.norm2"), cout, groups);
    let act2 = layout.add(format!("{name}.act2.slope"), &[cout]);
    BlockDef {
        cin,
        cout,
        conv1,
        norm1,
        act1,
        conv2,
        norm2,
        act2,
    }
}

/// Splits two ordered, disjoint ranges of `v` into mutable slices.
fn two_mut<'a>(v: &'a mut [f32], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f32], &'a mut [f32]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        }
    }
}

/// Activations kept for the backward pass of one block.
struct BlockTrace {
    h: usize,
    w: usize,
    x: Vec<f32>,
    norm1: GroupNormCache,
    a1: Vec<f32>,
    h1: Vec<f32>,
    norm2: GroupNormCache,
    a2: Vec<f32>,
    mask: Option<Vec<f32>>,
    out: Vec<f32>,
}

/// Forward record of one sample.
pub struct Trace {
    h: usize,
    w: usize,
    enc: Vec<BlockTrace>,
    pool_idx: Vec<Vec<u32>>,
    bottleneck: BlockTrace,
    dec: Vec<BlockTrace>,
}

impl Trace {
    /// Output of a block together with its `(channels, height, width)`.
    pub fn activation(&self, layer: LayerId) -> Option<(&[f32], usize, usize, usize)> {
        let t = match layer {
            LayerId::Encoder(l) => self.enc.get(l)?,
            LayerId::Bottleneck => &self.bottleneck,
            LayerId::Decoder(l) => self.dec.get(l)?,
        };
        let hw = t.h * t.w;
        Some((&t.out, t.out.len() / hw, t.h, t.w))
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

impl SegNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::default();
        let mut enc = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.in_channels;
        for l in 0..cfg.depth {
            let cout = cfg.width(l);
            enc.push(add_block(&mut layout, &cfg, &format!("enc{l}"), cin, cout));
            cin = cout;
        }
        let bottleneck = add_block(&mut layout, &cfg, "bottleneck", cin, cfg.width(cfg.depth));
        let mut ups = vec![None; cfg.depth];
        let mut dec = vec![None; cfg.depth];
        for l in (0..cfg.depth).rev() {
            let below = cfg.width(l + 1);
            let cout = cfg.width(l);
            let w = layout.add(format!("up{l}.weight"), &[cout * 4, below]);
            let b = layout.add(format!("up{l}.bias"), &[cout]);
            ups[l] = Some(UpDef { cin: below, cout, w, b });
            let dec_in = if cfg.skip_connections { 2 * cout } else { cout };
            dec[l] = Some(add_block(&mut layout, &cfg, &format!("dec{l}"), dec_in, cout));
        }
        let head = add_conv(&mut layout, "head", cfg.width(0), cfg.num_classes, 1);
        Ok(Self {
            cfg,
            layout,
            enc,
            bottleneck,
            ups: ups.into_iter().map(Option::unwrap).collect(),
            dec: dec.into_iter().map(Option::unwrap).collect(),
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn layers(&self) -> Vec<LayerId> {
        let mut v: Vec<LayerId> = (0..self.cfg.depth).map(LayerId::Encoder).collect();
        v.push(LayerId::Bottleneck);
        v.extend((0..self.cfg.depth).rev().map(LayerId::Decoder));
        v
    }

    /// Which features each decoder level concatenates, top level first.
    pub fn decoder_inputs(&self, level: usize) -> Vec<DecoderInput> {
        let mut v = vec![DecoderInput::Upsampled];
        if self.cfg.skip_connections {
            v.push(DecoderInput::EncoderSkip(level));
        }
        v
    }

    /// Input channel count of the first convolution of decoder `level`.
    pub fn decoder_in_channels(&self, level: usize) -> usize {
        self.dec[level].cin
    }

    /// He-normal convolutions (PReLU gain), zero biases, unit GroupNorm.
    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0f32; self.layout.total];
        let gain = 2.0 / (1.0 + PRELU_INIT * PRELU_INIT);
        for e in &self.layout.entries {
            let r = e.range();
            let leaf = e.name.rsplit('.').next().unwrap_or("");
            match leaf {
                "weight" => {
                    let fan_in: usize = if e.name.starts_with("up") {
                        e.shape[1]
                    } else {
                        e.shape[1..].iter().product()
                    };
                    let std = if e.name.starts_with("head") {
                        (1.0 / fan_in as f32).sqrt()
                    } else {
                        (gain / fan_in as f32).sqrt()
                    };
                    let normal = Normal::new(0.0, std).expect("finite std");
                    for v in &mut p[r] {
                        *v = normal.sample(&mut rng);
                    }
                }
                "gamma" => p[r].fill(1.0),
                "slope" => p[r].fill(PRELU_INIT),
                _ => {}
            }
        }
        p
    }

    fn conv_fwd(&self, def: &ConvDef, params: &[f32], x: &[f32], h: usize, w: usize, col: &mut Vec<f32>) -> Vec<f32> {
        let s = ConvShape {
            cin: def.cin,
            cout: def.cout,
            k: def.k,
            h,
            w,
        };
        ops::conv_forward(&s, x, &params[def.w.clone()], &params[def.b.clone()], col)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bwd(
        &self,
        def: &ConvDef,
        params: &[f32],
        x: &[f32],
        h: usize,
        w: usize,
        dy: &[f32],
        grads: &mut [f32],
        need_dx: bool,
        col: &mut Vec<f32>,
    ) -> Option<Vec<f32>> {
        let s = ConvShape {
            cin: def.cin,
            cout: def.cout,
            k: def.k,
            h,
            w,
        };
        let (dw, db) = two_mut(grads, &def.w, &def.b);
        ops::conv_backward(&s, x, &params[def.w.clone()], dy, dw, db, need_dx, col)
    }

    fn block_fwd(
        &self,
        def: &BlockDef,
        params: &[f32],
        x: Vec<f32>,
        h: usize,
        w: usize,
        mode: &mut Mode,
        col: &mut Vec<f32>,
    ) -> BlockTrace {
        let hw = h * w;
        let c = def.cout;
        let z1 = self.conv_fwd(&def.conv1, params, &x, h, w, col);
        let (a1, norm1) = ops::group_norm_forward(
            &z1,
            c,
            hw,
            def.norm1.groups,
            &params[def.norm1.gamma.clone()],
            &params[def.norm1.beta.clone()],
        );
        let h1 = ops::prelu_forward(&a1, c, hw, &params[def.act1.clone()]);
        let z2 = self.conv_fwd(&def.conv2, params, &h1, h, w, col);
        let (a2, norm2) = ops::group_norm_forward(
            &z2,
            c,
            hw,
            def.norm2.groups,
            &params[def.norm2.gamma.clone()],
            &params[def.norm2.beta.clone()],
        );
        let mut out = ops::prelu_forward(&a2, c, hw, &params[def.act2.clone()]);
        let p = self.cfg.dropout_rate;
        let mask = match mode.rng() {
            Some(rng) if p > 0.0 => {
                let scale = 1.0 / (1.0 - p);
                let m: Vec<f32> = (0..out.len())
                    .map(|_| if rng.random::<f32>() < p { 0.0 } else { scale })
                    .collect();
                out.iter_mut().zip(&m).for_each(|(o, s)| *o *= s);
                Some(m)
            }
            _ => None,
        };
        BlockTrace {
            h,
            w,
            x,
            norm1,
            a1,
            h1,
            norm2,
            a2,
            mask,
            out,
        }
    }

    fn block_bwd(
        &self,
        def: &BlockDef,
        params: &[f32],
        t: &BlockTrace,
        dout: &[f32],
        grads: &mut [f32],
        need_dx: bool,
        col: &mut Vec<f32>,
    ) -> Option<Vec<f32>> {
        let (h, w) = (t.h, t.w);
        let hw = h * w;
        let c = def.cout;
        let dh2: Vec<f32> = match &t.mask {
            Some(m) => dout.iter().zip(m).map(|(g, s)| g * s).collect(),
            None => dout.to_vec(),
        };
        let da2 = ops::prelu_backward(
            &t.a2,
            &dh2,
            c,
            hw,
            &params[def.act2.clone()],
            &mut grads[def.act2.clone()],
        );
        let dz2 = {
            let (dg, db) = two_mut(grads, &def.norm2.gamma, &def.norm2.beta);
            ops::group_norm_backward(
                &da2,
                &t.norm2,
                c,
                hw,
                def.norm2.groups,
                &params[def.norm2.gamma.clone()],
                dg,
                db,
            )
        };
        let dh1 = self
            .conv_bwd(&def.conv2, params, &t.h1, h, w, &dz2, grads, true, col)
            .expect("dx requested");
        let da1 = ops::prelu_backward(
            &t.a1,
            &dh1,
            c,
            hw,
            &params[def.act1.clone()],
            &mut grads[def.act1.clone()],
        );
        let dz1 = {
            let (dg, db) = two_mut(grads, &def.norm1.gamma, &def.norm1.beta);
            ops::group_norm_backward(
                &da1,
                &t.norm1,
                c,
                hw,
                def.norm1.groups,
                &params[def.norm1.gamma.clone()],
                dg,
                db,
            )
        };
        self.conv_bwd(&def.conv1, params, &t.x, h, w, &dz1, grads, need_dx, col)
    }

    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        if channels != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {channels}",
                self.cfg.in_channels
            )));
        }
        let d = self.cfg.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by {d} (2^depth)")));
        }
        Ok(())
    }

    /// Forward pass of one `(C, H, W)` sample. Returns `(K, H, W)` logits.
    pub fn forward_sample(
        &self,
        params: &[f32],
        x: &[f32],
        h: usize,
        w: usize,
        mode: &mut Mode,
    ) -> Result<(Vec<f32>, Trace)> {
        if params.len() != self.layout.total {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, model needs {}",
                params.len(),
                self.layout.total
            )));
        }
        self.check_input(x.len() / (h * w).max(1), h, w)?;
        if x.len() != self.cfg.in_channels * h * w {
            return Err(Error::Shape("input payload does not match its dimensions".into()));
        }
        let mut col = Vec::new();
        let mut enc = Vec::with_capacity(self.cfg.depth);
        let mut pool_idx = Vec::with_capacity(self.cfg.depth);
        let (mut ch, mut cw) = (h, w);
        let mut cur = x.to_vec();
        for def in &self.enc {
            let t = self.block_fwd(def, params, cur, ch, cw, mode, &mut col);
            let (pooled, idx) = ops::maxpool2_forward(&t.out, def.cout, ch, cw);
            enc.push(t);
            pool_idx.push(idx);
            cur = pooled;
            ch /= 2;
            cw /= 2;
        }
        let bottleneck = self.block_fwd(&self.bottleneck, params, cur, ch, cw, mode, &mut col);
        let mut dec: Vec<Option<BlockTrace>> = (0..self.cfg.depth).map(|_| None).collect();
        for l in (0..self.cfg.depth).rev() {
            let below = if l + 1 == self.cfg.depth {
                &bottleneck.out
            } else {
                &dec[l + 1].as_ref().expect("built deeper level").out
            };
            let up = &self.ups[l];
            let mut input = ops::convt2_forward(
                below,
                up.cin,
                ch,
                cw,
                &params[up.w.clone()],
                &params[up.b.clone()],
                up.cout,
            );
            ch *= 2;
            cw *= 2;
            if self.cfg.skip_connections {
                input.extend_from_slice(&enc[l].out);
            }
            dec[l] = Some(self.block_fwd(&self.dec[l], params, input, ch, cw, mode, &mut col));
        }
        let dec: Vec<BlockTrace> = dec.into_iter().map(Option::unwrap).collect();
        let logits = self.conv_fwd(&self.head, params, &dec[0].out, h, w, &mut col);
        Ok((
            logits,
            Trace {
                h,
                w,
                enc,
                pool_idx,
                bottleneck,
                dec,
            },
        ))
    }

    /// Backpropagates `dlogits`, accumulating parameter gradients into
    /// `grads`. When `tap` is set, also returns the gradient with respect to
    /// that layer's output.
    pub fn backward_sample(
        &self,
        params: &[f32],
        trace: &Trace,
        dlogits: &[f32],
        grads: &mut [f32],
        tap: Option<LayerId>,
    ) -> Option<Vec<f32>> {
        assert_eq!(grads.len(), self.layout.total);
        let mut col = Vec::new();
        let mut tapped = None;
        let depth = self.cfg.depth;
        let (h, w) = (trace.h, trace.w);
        let mut dcur = self
            .conv_bwd(
                &self.head,
                params,
                &trace.dec[0].out,
                h,
                w,
                dlogits,
                grads,
                true,
                &mut col,
            )
            .expect("dx requested");
        let mut skip_grads: Vec<Option<Vec<f32>>> = vec![None; depth];
        for l in 0..depth {
            if tap == Some(LayerId::Decoder(l)) {
                tapped = Some(dcur.clone());
            }
            let t = &trace.dec[l];
            let dinput = self
                .block_bwd(&self.dec[l], params, t, &dcur, grads, true, &mut col)
                .expect("dx requested");
            let up = &self.ups[l];
            let up_len = up.cout * t.h * t.w;
            if self.cfg.skip_connections {
                skip_grads[l] = Some(dinput[up_len..].to_vec());
            }
            let below = if l + 1 == depth {
                &trace.bottleneck
            } else {
                &trace.dec[l + 1]
            };
            let (dw, db) = two_mut(grads, &up.w, &up.b);
            dcur = ops::convt2_backward(
                &below.out,
                up.cin,
                below.h,
                below.w,
                &params[up.w.clone()],
                up.cout,
                &dinput[..up_len],
                dw,
                db,
            );
        }
        if tap == Some(LayerId::Bottleneck) {
            tapped = Some(dcur.clone());
        }
        dcur = self
            .block_bwd(
                &self.bottleneck,
                params,
                &trace.bottleneck,
                &dcur,
                grads,
                true,
                &mut col,
            )
            .expect("dx requested");
        for l in (0..depth).rev() {
            let t = &trace.enc[l];
            let mut dout = ops::maxpool2_backward(&dcur, &trace.pool_idx[l], t.out.len());
            if let Some(s) = &skip_grads[l] {
                dout.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
            if tap == Some(LayerId::Encoder(l)) {
                tapped = Some(dout.clone());
            }
            match self.block_bwd(&self.enc[l], params, t, &dout, grads, l > 0, &mut col) {
                Some(dx) => dcur = dx,
                None => break,
            }
        }
        tapped
    }
}

/// A network description paired with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: SegNet,
    pub params: Vec<f32>,
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let net = SegNet::new(cfg.clone())?;
    let params = net.init_params(seed);
    Ok(Model { net, params })
}

/// Per-pixel class scores, `(K, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMap {
    pub values: Vec<f64>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

/// Per-pixel class probabilities, `(K, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub values: Vec<f64>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl LogitsMap {
    pub fn new(classes: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "{} logits do not match {classes}x{height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            classes,
            height,
            width,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl ProbMap {
    pub fn new(classes: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "{} probabilities do not match {classes}x{height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            classes,
            height,
            width,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.pixels() + i]
    }

    /// Largest class probability at every pixel.
    pub fn max_prob(&self) -> Vec<f64> {
        let m = self.pixels();
        (0..m)
            .map(|i| {
                (0..self.classes)
                    .map(|k| self.values[k * m + i])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }
}

pub fn forward(model: &Model, stack: &SliceStack) -> Result<LogitsMap> {
    model.net.check_input(stack.channels, stack.height, stack.width)?;
    let (z, _) = model
        .net
        .forward_sample(&model.params, &stack.data, stack.height, stack.width, &mut Mode::Eval)?;
    LogitsMap::new(
        model.net.cfg.num_classes,
        stack.height,
        stack.width,
        z.into_iter().map(f64::from).collect(),
    )
}

/// Max-subtracted softmax at every pixel.
pub fn softmax_probs(z: &LogitsMap) -> ProbMap {
    let m = z.pixels();
    let k = z.classes;
    let mut p = vec![0.0; z.values.len()];
    for i in 0..m {
        let top = (0..k).map(|c| z.values[c * m + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (z.values[c * m + i] - top).exp();
            p[c * m + i] = e;
            sum += e;
        }
        for c in 0..k {
            p[c * m + i] /= sum;
        }
    }
    ProbMap {
        values: p,
        classes: k,
        height: z.height,
        width: z.width,
    }
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn predict(p: &ProbMap) -> LabelMap {
    let m = p.pixels();
    let labels = (0..m)
        .map(|i| {
            let mut best = 0;
            for k in 1..p.classes {
                if p.values[k * m + i] > p.values[best * m + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        labels,
        height: p.height,
        width: p.width,
    }
}

/// Pads a stack to the next multiple of `d` by edge replication.
pub fn pad_to_multiple(stack: &SliceStack, d: usize) -> SliceStack {
    let ph = stack.height.div_ceil(d) * d;
    let pw = stack.width.div_ceil(d) * d;
    if (ph, pw) == (stack.height, stack.width) {
        return stack.clone();
    }
    let mut data = Vec::with_capacity(stack.channels * ph * pw);
    for c in 0..stack.channels {
        let plane = stack.channel(c);
        for r in 0..ph {
            let sr = r.min(stack.height - 1);
            for col in 0..pw {
                data.push(plane[sr * stack.width + col.min(stack.width - 1)]);
            }
        }
    }
    SliceStack {
        data,
        channels: stack.channels,
        height: ph,
        width: pw,
        center_index: stack.center_index,
        crop_origin: stack.crop_origin,
    }
}

/// Probabilities for a stack of any size (padded internally, cropped back).
pub fn predict_probs(model: &Model, stack: &SliceStack) -> Result<ProbMap> {
    let padded = pad_to_multiple(stack, model.net.cfg.divisor());
    let probs = softmax_probs(&forward(model, &padded)?);
    if (padded.height, padded.width) == (stack.height, stack.width) {
        return Ok(probs);
    }
    let (h, w) = (stack.height, stack.width);
    let m = padded.height * padded.width;
    let mut values = Vec::with_capacity(probs.classes * h * w);
    for k in 0..probs.classes {
        for r in 0..h {
            let start = k * m + r * padded.width;
            values.extend_from_slice(&probs.values[start..start + w]);
        }
    }
    ProbMap::new(probs.classes, h, w, values)
}

/// Segments every slice of a normalized volume with 2.5D context.
pub fn segment_volume(model: &Model, volume: &Volume) -> Result<LabelVolume> {
    segment_volume_with(model, volume, 1)
}

/// [`segment_volume`] spread over `workers` threads. Inference is pure, so
/// the result does not depend on the worker count.
pub fn segment_volume_with(model: &Model, volume: &Volume, workers: usize) -> Result<LabelVolume> {
    let slices: Vec<usize> = (0..volume.depth()).collect();
    let maps = segment_slices(model, volume, &slices, workers)?;
    LabelVolume::from_slices(&maps, model.net.cfg.num_classes, Provenance::Predicted)
}

/// Label maps for the given slice indices, in the order given.
pub fn segment_slices(model: &Model, volume: &Volume, slices: &[usize], workers: usize) -> Result<Vec<LabelMap>> {
    let c = model.net.cfg.in_channels;
    let one = |z: usize| -> Result<LabelMap> { Ok(predict(&predict_probs(model, &extract_stack(volume, z, c)?)?)) };
    let workers = workers.clamp(1, slices.len().max(1));
    if workers == 1 {
        return slices.iter().map(|&z| one(z)).collect();
    }
    let mut out: Vec<Option<Result<LabelMap>>> = (0..slices.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                scope.spawn(move || {
                    (w..slices.len())
                        .step_by(workers)
                        .map(|i| (i, one(slices[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("segmentation worker panicked") {
                out[i] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("every slice is assigned")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(skip: bool) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            num_classes: 3,
            depth: 2,
            base_width: 4,
            skip_connections: skip,
            dropout_rate: 0.0,
            norm_groups: 2,
            input_size: 8,
        }
    }

    #[test]
    fn reference_budget_is_about_two_million() {
        let net = SegNet::new(ModelConfig::reference()).unwrap();
        let n = net.param_count();
        assert!((1_800_000..=2_200_000).contains(&n), "{n}");
    }

    #[test]
    fn skip_toggle_removes_encoder_inputs() {
        let with = SegNet::new(tiny(true)).unwrap();
        let without = SegNet::new(tiny(false)).unwrap();
        for l in 0..2 {
            assert!(with.decoder_inputs(l).contains(&DecoderInput::EncoderSkip(l)));
            assert_eq!(without.decoder_inputs(l), vec![DecoderInput::Upsampled]);
            assert_eq!(with.decoder_in_channels(l), 2 * without.decoder_in_channels(l));
        }
        assert!(with.param_count() > without.param_count());
    }

    #[test]
    fn zero_size_bottleneck_is_rejected() {
        let cfg = ModelConfig {
            input_size: 8,
            depth: 4,
            ..tiny(true)
        };
        let err = SegNet::new(cfg).unwrap_err();
        assert!(err.to_string().contains("level 4"), "{err}");
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = build_model(&tiny(true), 5).unwrap();
        let b = build_model(&tiny(true), 5).unwrap();
        let c = build_model(&tiny(true), 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn parallel_segmentation_matches_serial() {
        let model = build_model(
            &ModelConfig {
                input_size: 16,
                ..tiny(true)
            },
            3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..5 * 12 * 12).map(|_| rng.random::<f32>()).collect();
        let vol = Volume::new((5, 12, 12), data, None).unwrap();
        let serial = segment_volume(&model, &vol).unwrap();
        for workers in [2, 3, 8] {
            assert_eq!(segment_volume_with(&model, &vol, workers).unwrap(), serial);
        }
    }

    #[test]
    fn layer_names_round_trip() {
        for s in ["enc0", "enc3", "bottleneck", "dec1"] {
            assert_eq!(s.parse::<LayerId>().unwrap().to_string(), s);
        }
        assert!("middle".parse::<LayerId>().is_err());
    }

    fn loss_of(net: &SegNet, params: &[f32], x: &[f32], proj: &[f32]) -> f64 {
        let (z, _) = net.forward_sample(params, x, 8, 8, &mut Mode::Eval).unwrap();
        z.iter().zip(proj).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        for skip in [true, false] {
            let net = SegNet::new(tiny(skip)).unwrap();
            let params = net.init_params(1);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x: Vec<f32> = (0..3 * 64).map(|_| rng.random::<f32>()).collect();
            let proj: Vec<f32> = (0..3 * 64).map(|_| rng.random::<f32>() - 0.5).collect();
            let (_, trace) = net.forward_sample(&params, &x, 8, 8, &mut Mode::Eval).unwrap();
            let mut grads = vec![0.0; params.len()];
            net.backward_sample(&params, &trace, &proj, &mut grads, None);
            // spot-check a spread of parameters across the whole layout
            let eps = 1e-3;
            let mut checked = 0;
            for i in (0..params.len()).step_by(params.len() / 60 + 1) {
                let mut pp = params.clone();
                pp[i] += eps;
                let mut pm = params.clone();
                pm[i] -= eps;
                let num = (loss_of(&net, &pp, &x, &proj) - loss_of(&net, &pm, &x, &proj)) / (2.0 * eps as f64);
                let a = grads[i] as f64;
                assert!(
                    (num - a).abs() <= 3e-2 * (1.0 + num.abs().max(a.abs())),
                    "skip={skip} param {i}: numeric {num}, analytic {a}"
                );
                checked += 1;
            }
            assert!(checked > 30);
        }
    }

    #[test]
    fn tapped_gradient_matches_perturbation_of_activation_path() {
        let net = SegNet::new(tiny(true)).unwrap();
        let params = net.init_params(3);
        let x: Vec<f32> = (0..3 * 64).map(|i| (i as f32 * 0.37).sin()).collect();
        let (z, trace) = net.forward_sample(&params, &x, 8, 8, &mut Mode::Eval).unwrap();
        let mut grads = vec![0.0; params.len()];
        let dz = vec![1.0; z.len()];
        for layer in net.layers() {
            let g = net
                .backward_sample(&params, &trace, &dz, &mut grads, Some(layer))
                .unwrap();
            let (act, c, h, w) = trace.activation(layer).unwrap();
            assert_eq!(g.len(), act.len());
            assert_eq!(act.len(), c * h * w);
        }
    }

    #[test]
    fn softmax_examples() {
        let z = LogitsMap::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let p = softmax_probs(&z);
        assert!((p.values[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((p.values[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let eq = softmax_probs(&LogitsMap::new(4, 1, 1, vec![3.0; 4]).unwrap());
        assert!(eq.values.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let shifted = softmax_probs(&LogitsMap::new(2, 1, 1, vec![101.0, 102.0]).unwrap());
        assert!((shifted.values[0] - p.values[0]).abs() < 1e-12);
    }

    #[test]
    fn predict_ties_go_low() {
        let p = ProbMap::new(3, 1, 2, vec![1.0 / 3.0; 6]).unwrap();
        assert_eq!(predict(&p).labels, vec![0, 0]);
        let one_hot = ProbMap::new(3, 1, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(predict(&one_hot).labels, vec![1, 2]);
    }

    #[test]
    fn eval_forward_is_deterministic_and_finite() {
        let model = build_model(&tiny(true), 9).unwrap();
        let stack = SliceStack::new(3, 16, 8, (0..3 * 128).map(|i| (i % 17) as f32 / 17.0).collect(), 0).unwrap();
        let a = forward(&model, &stack).unwrap();
        let b = forward(&model, &stack).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| v.is_finite()));
        assert_eq!((a.classes, a.height, a.width), (3, 16, 8));
        let bad = SliceStack::new(1, 16, 8, vec![0.0; 128], 0).unwrap();
        assert!(forward(&model, &bad).is_err());
    }

    #[test]
    fn padded_prediction_keeps_input_size() {
        let model = build_model(&tiny(false), 1).unwrap();
        let stack = SliceStack::new(3, 10, 7, vec![0.5; 210], 0).unwrap();
        let p = predict_probs(&model, &stack).unwrap();
        assert_eq!((p.height, p.width), (10, 7));
        for i in 0..70 {
            let s: f64 = (0..3).map(|k| p.get(k, i)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
