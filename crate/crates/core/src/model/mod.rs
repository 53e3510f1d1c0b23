//! Teacher, student and late-fusion networks.
//!
//! A backbone stage is 3×3 convolution → group norm → ReLU → 2×2 average
//! pooling. Classifiers pool the final feature map globally and apply a
//! linear head producing two logits. Optional mechanism blocks are inserted
//! according to [`ModuleFlags`]: spatial reweighting and attention with a
//! retain gate after the last teacher stage, and three-scale fusion over the
//! last three student stages.

pub mod blocks;
mod weights;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{Dfpn, Dpe, Mhra};
pub use weights::{load_weights, read_weights_file, save_weights, WeightEntry};

use crate::error::{Error, Result};
use crate::nn::layers::{global_avg_pool, global_avg_pool_backward};
use crate::nn::param::{join, Param, Parameterized};
use crate::nn::{AvgPool2, Conv2d, GroupNorm, Linear, Relu, Tensor};
use crate::seeding::rng_for;

pub const N_CLASSES: usize = 2;
pub const DEFAULT_INPUT_SIZE: usize = 128;
pub const MHRA_HEADS: usize = 4;
pub const DFPN_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub role: Role,
    pub stage_widths: Vec<usize>,
    pub input_size: usize,
    pub n_classes: usize,
}

impl BackboneConfig {
    pub fn teacher() -> Self {
        Self {
            role: Role::Teacher,
            stage_widths: vec![32, 64, 128, 256],
            input_size: DEFAULT_INPUT_SIZE,
            n_classes: N_CLASSES,
        }
    }

    pub fn student() -> Self {
        Self {
            role: Role::Student,
            stage_widths: vec![16, 32, 64],
            input_size: DEFAULT_INPUT_SIZE,
            n_classes: N_CLASSES,
        }
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn for_role(role: Role) -> Self {
        match role {
            Role::Teacher => Self::teacher(),
            Role::Student => Self::student(),
        }
    }

    /// Spatial side length of the output of stage `i` (0-based).
    pub fn stage_size(&self, i: usize) -> usize {
        self.input_size >> (i + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::Config(
                "stage widths must be non-empty and positive".into(),
            ));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::Config(format!(
                "only {N_CLASSES}-class heads are supported"
            )));
        }
        let div = 1usize << self.stage_widths.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of {div} for {} stages",
                self.input_size,
                self.stage_widths.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModuleFlags {
    pub dpe: bool,
    pub mhra: bool,
    pub dfpn: bool,
}

impl ModuleFlags {
    pub const NONE: ModuleFlags = ModuleFlags {
        dpe: false,
        mhra: false,
        dfpn: false,
    };
    pub const ALL: ModuleFlags = ModuleFlags {
        dpe: true,
        mhra: true,
        dfpn: true,
    };

    pub fn teacher_side(self) -> ModuleFlags {
        ModuleFlags {
            dfpn: false,
            ..self
        }
    }

    pub fn student_side(self) -> ModuleFlags {
        ModuleFlags {
            dpe: false,
            mhra: false,
            ..self
        }
    }

    pub fn any(self) -> bool {
        self.dpe || self.mhra || self.dfpn
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// (N, 2) logits.
    pub logits: Tensor,
    /// Backbone stage outputs in order, each (N, C_i, H_i, W_i).
    pub stage_features: Vec<Tensor>,
    /// Stage index used for attention-transfer and hint taps.
    pub tap: usize,
}

impl ForwardOutput {
    pub fn tap_feature(&self) -> &Tensor {
        &self.stage_features[self.tap]
    }
}

fn norm_groups(channels: usize) -> usize {
    (1..=8)
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv2d,
    norm: GroupNorm,
    relu: Relu,
    pool: AvgPool2,
}

impl Stage {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.conv.forward(x, train);
        let y = self.norm.forward(&y, train);
        let y = self.relu.forward(&y, train);
        self.pool.forward(&y)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.pool.backward(dy);
        let d = self.relu.backward(&d);
        let d = self.norm.backward(&d);
        self.conv.backward(&d)
    }
}

/// Stack of convolutional stages on a single-channel input.
#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut in_c = 1;
        let stages = widths
            .iter()
            .map(|&w| {
                let s = Stage {
                    conv: Conv2d::new(in_c, w, 3, true, rng),
                    norm: GroupNorm::new(norm_groups(w), w),
                    relu: Relu::default(),
                    pool: AvgPool2,
                };
                in_c = w;
                s
            })
            .collect();
        Self { stages }
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map(|s| s.conv.out_channels).unwrap_or(1)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Vec<Tensor> {
        let mut feats: Vec<Tensor> = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let y = stage.forward(if i == 0 { x } else { &feats[i - 1] }, train);
            feats.push(y);
        }
        feats
    }

    /// `stage_grads[i]` is the loss gradient arriving directly at the output
    /// of stage `i` (from the head, a fusion block or a tap loss).
    pub fn backward(&mut self, mut stage_grads: Vec<Option<Tensor>>) -> Option<Tensor> {
        assert_eq!(stage_grads.len(), self.stages.len());
        let mut carry: Option<Tensor> = None;
        for i in (0..self.stages.len()).rev() {
            let g = match (carry.take(), stage_grads[i].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            carry = g.map(|g| self.stages[i].backward(&g));
        }
        carry
    }
}

impl Parameterized for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            s.conv.visit(&join(&p, "conv"), f);
            s.norm.visit(&join(&p, "norm"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            s.conv.visit_mut(&join(&p, "conv"), f);
            s.norm.visit_mut(&join(&p, "norm"), f);
        }
    }
}

/// Single-modality classifier (teacher or student role).
#[derive(Debug)]
pub struct Classifier {
    pub config: BackboneConfig,
    pub flags: ModuleFlags,
    pub backbone: Backbone,
    pub dpe: Option<Dpe>,
    pub mhra: Option<Mhra>,
    pub dfpn: Option<Dfpn>,
    pub head: Linear,
    pooled_hw: Option<(usize, usize)>,
}

/// Builds a classifier with seeded initialization.
pub fn build_model(config: &BackboneConfig, flags: ModuleFlags, seed: u64) -> Result<Classifier> {
    config.validate()?;
    match config.role {
        Role::Teacher if flags.dfpn => {
            return Err(Error::Config(
                "multi-scale fusion is a student-side block".into(),
            ))
        }
        Role::Student if flags.dpe || flags.mhra => {
            return Err(Error::Config(
                "spatial reweighting and attention blocks are teacher-side".into(),
            ))
        }
        _ => {}
    }
    let widths = &config.stage_widths;
    if flags.dfpn && widths.len() < 3 {
        return Err(Error::Config(
            "multi-scale fusion needs at least three stages".into(),
        ));
    }
    let last = *widths.last().unwrap();
    if flags.mhra && !last.is_multiple_of(MHRA_HEADS) {
        return Err(Error::Config(format!(
            "{last} channels do not split into {MHRA_HEADS} heads"
        )));
    }

    // Each component draws from its own stream so that toggling a block
    // leaves every other initial value unchanged.
    let backbone = Backbone::new(widths, &mut rng_for(seed, "backbone"));
    let dpe = flags.dpe.then(|| Dpe::new(last, &mut rng_for(seed, "dpe")));
    let mhra = flags
        .mhra
        .then(|| Mhra::new(last, MHRA_HEADS, &mut rng_for(seed, "mhra")));
    let n = widths.len();
    let dfpn = flags.dfpn.then(|| {
        Dfpn::new(
            widths[n - 1],
            widths[n - 2],
            widths[n - 3],
            DFPN_WIDTH,
            &mut rng_for(seed, "dfpn"),
        )
    });
    let head_in = if flags.dfpn { DFPN_WIDTH } else { last };
    let head = Linear::new(head_in, config.n_classes, &mut rng_for(seed, "head"));
    Ok(Classifier {
        config: config.clone(),
        flags,
        backbone,
        dpe,
        mhra,
        dfpn,
        head,
        pooled_hw: None,
    })
}

impl Classifier {
    /// Index of the stage whose spatial size matches the student's last
    /// stage; for the student it is simply its last stage.
    pub fn tap_index(&self) -> usize {
        let student = BackboneConfig::student();
        let target = self.config.input_size >> student.stage_widths.len();
        (0..self.backbone.n_stages())
            .find(|&i| self.config.stage_size(i) == target)
            .unwrap_or(self.backbone.n_stages() - 1)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<ForwardOutput> {
        let (_, c, h, w) = x.dims4();
        if c != 1 || h != self.config.input_size || w != self.config.input_size {
            return Err(Error::Shape(format!(
                "expected (N,1,{s},{s}) input, got {:?}",
                x.shape,
                s = self.config.input_size
            )));
        }
        let feats = self.backbone.forward(x, train);
        let n = feats.len();
        let mut top = if let Some(dfpn) = &mut self.dfpn {
            dfpn.forward(&feats[n - 1], &feats[n - 2], &feats[n - 3], train)?
        } else {
            feats[n - 1].clone()
        };
        if let Some(dpe) = &mut self.dpe {
            top = dpe.forward(&top, train);
        }
        if let Some(mhra) = &mut self.mhra {
            top = mhra.forward(&top, train);
        }
        let (_, _, th, tw) = top.dims4();
        self.pooled_hw = Some((th, tw));
        let pooled = global_avg_pool(&top);
        let logits = self.head.forward(&pooled, train);
        Ok(ForwardOutput {
            logits,
            tap: self.tap_index(),
            stage_features: feats,
        })
    }

    /// Backpropagates a logit gradient and an optional gradient arriving at
    /// one stage output (tap losses).
    pub fn backward(&mut self, dlogits: &Tensor, tap_grad: Option<(usize, Tensor)>) {
        let (th, tw) = self.pooled_hw.expect("backward before forward");
        let dpooled = self.head.backward(dlogits);
        let mut dtop = global_avg_pool_backward(&dpooled, th, tw);
        if let Some(mhra) = &mut self.mhra {
            dtop = mhra.backward(&dtop);
        }
        if let Some(dpe) = &mut self.dpe {
            dtop = dpe.backward(&dtop);
        }
        let n = self.backbone.n_stages();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if let Some(dfpn) = &mut self.dfpn {
            let (dc, dm, df) = dfpn.backward(&dtop);
            grads[n - 1] = Some(dc);
            grads[n - 2] = Some(dm);
            grads[n - 3] = Some(df);
        } else {
            grads[n - 1] = Some(dtop);
        }
        if let Some((i, g)) = tap_grad {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        self.backbone.backward(grads);
    }
}

impl Parameterized for Classifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        if let Some(b) = &self.dpe {
            b.visit(&join(prefix, "dpe"), f);
        }
        if let Some(b) = &self.mhra {
            b.visit(&join(prefix, "mhra"), f);
        }
        if let Some(b) = &self.dfpn {
            b.visit(&join(prefix, "dfpn"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        if let Some(b) = &mut self.dpe {
            b.visit_mut(&join(prefix, "dpe"), f);
        }
        if let Some(b) = &mut self.mhra {
            b.visit_mut(&join(prefix, "mhra"), f);
        }
        if let Some(b) = &mut self.dfpn {
            b.visit_mut(&join(prefix, "dfpn"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Two-branch model consuming both modalities: a teacher-style CT branch and
/// a student-style X-ray branch, pooled embeddings concatenated before the head.
#[derive(Debug)]
pub struct LateFusion {
    pub input_size: usize,
    pub ct_branch: Backbone,
    pub xray_branch: Backbone,
    pub head: Linear,
    cache: Option<[(usize, usize); 2]>,
}

impl LateFusion {
    pub fn new(input_size: usize, seed: u64) -> Result<Self> {
        let t = BackboneConfig::teacher().with_input_size(input_size);
        let s = BackboneConfig::student().with_input_size(input_size);
        t.validate()?;
        s.validate()?;
        let ct_branch = Backbone::new(&t.stage_widths, &mut rng_for(seed, "ct_branch"));
        let xray_branch = Backbone::new(&s.stage_widths, &mut rng_for(seed, "xray_branch"));
        let dim = ct_branch.out_channels() + xray_branch.out_channels();
        let head = Linear::new(dim, N_CLASSES, &mut rng_for(seed, "head"));
        Ok(Self {
            input_size,
            ct_branch,
            xray_branch,
            head,
            cache: None,
        })
    }

    pub fn ct_embedding_dim(&self) -> usize {
        self.ct_branch.out_channels()
    }

    pub fn forward(
        &mut self,
        xray: Option<&Tensor>,
        ct: Option<&Tensor>,
        train: bool,
    ) -> Result<Tensor> {
        let (xray, ct) = match (xray, ct) {
            (Some(x), Some(c)) => (x, c),
            (None, _) => {
                return Err(Error::InvalidInput(
                    "late fusion requires an X-ray input".into(),
                ))
            }
            (_, None) => {
                return Err(Error::InvalidInput(
                    "late fusion requires a CT input".into(),
                ))
            }
        };
        if xray.shape != ct.shape {
            return Err(Error::Shape(format!(
                "X-ray batch {:?} and CT batch {:?} differ",
                xray.shape, ct.shape
            )));
        }
        let ct_feats = self.ct_branch.forward(ct, train);
        let xr_feats = self.xray_branch.forward(xray, train);
        let ct_top = ct_feats.last().unwrap();
        let xr_top = xr_feats.last().unwrap();
        let (n, cc, ch, cw) = ct_top.dims4();
        let (_, xc, xh, xw) = xr_top.dims4();
        let pc = global_avg_pool(ct_top);
        let px = global_avg_pool(xr_top);
        let mut joint = Tensor::zeros(&[n, cc + xc]);
        for i in 0..n {
            let row = joint.item_mut(i);
            row[..cc].copy_from_slice(pc.item(i));
            row[cc..].copy_from_slice(px.item(i));
        }
        self.cache = Some([(ch, cw), (xh, xw)]);
        Ok(self.head.forward(&joint, train))
    }

    pub fn backward(&mut self, dlogits: &Tensor) {
        let [(ch, cw), (xh, xw)] = self.cache.expect("backward before forward");
        let djoint = self.head.backward(dlogits);
        let (n, dim) = djoint.dims2();
        let cc = self.ct_branch.out_channels();
        let mut dpc = Tensor::zeros(&[n, cc]);
        let mut dpx = Tensor::zeros(&[n, dim - cc]);
        for i in 0..n {
            dpc.item_mut(i).copy_from_slice(&djoint.item(i)[..cc]);
            dpx.item_mut(i).copy_from_slice(&djoint.item(i)[cc..]);
        }
        let mut gc = vec![None; self.ct_branch.n_stages()];
        *gc.last_mut().unwrap() = Some(global_avg_pool_backward(&dpc, ch, cw));
        self.ct_branch.backward(gc);
        let mut gx = vec![None; self.xray_branch.n_stages()];
        *gx.last_mut().unwrap() = Some(global_avg_pool_backward(&dpx, xh, xw));
        self.xray_branch.backward(gx);
    }
}

impl Parameterized for LateFusion {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ct_branch.visit(&join(prefix, "ct_branch"), f);
        self.xray_branch.visit(&join(prefix, "xray_branch"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ct_branch.visit_mut(&join(prefix, "ct_branch"), f);
        self.xray_branch.visit_mut(&join(prefix, "xray_branch"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests;
