//! NLCEN: residual backbone, one NLCE module per stage, a feature pyramid,
//! four deeply supervised level heads and a multi-scale refinement head.

use std::fmt;
use std::str::FromStr;

use nlcen_tensor::{Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::{is_nlce_param, Conv, ConvBn, ForwardCtx};
use crate::nlce::{Nlce, NlceConfig, NlceParts, DEFAULT_CODEWORDS};

/// Weight of each level loss and of the refined loss in the total loss.
pub const LOSS_WEIGHT: f64 = 0.25;

/// Pixel values are mapped to `(x / 255 − MEAN) / STD` inside the model.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoNlce,
    NoNl,
    NoCe,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoNlce, Variant::NoNl, Variant::NoCe, Variant::Full];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNlce => "no-nlce",
            Variant::NoNl => "no-nl",
            Variant::NoCe => "no-ce",
        }
    }

    fn parts(self) -> Option<NlceParts> {
        match self {
            Variant::Full => Some(NlceParts::Full),
            Variant::NoNlce => None,
            Variant::NoNl => Some(NlceParts::EncoderOnly),
            Variant::NoCe => Some(NlceParts::NonLocalOnly),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant `{s}` (expected full, no-nlce, no-nl or no-ce)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub input_hw: usize,
    /// Output channels of stages conv2..conv5.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub pyramid_width: usize,
    pub codewords: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            input_hw: 64,
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: 1,
            pyramid_width: 32,
            codewords: DEFAULT_CODEWORDS,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_hw == 0 || self.input_hw % 32 != 0 {
            return Err(Error::Invalid(format!("input side {} is not a positive multiple of 32", self.input_hw)));
        }
        if self.in_channels == 0 || self.stage_channels.contains(&0) || self.codewords == 0 {
            return Err(Error::Invalid("channel counts and codewords must be positive".into()));
        }
        if self.pyramid_width < 2 {
            return Err(Error::Invalid("pyramid width must be at least 2".into()));
        }
        Ok(())
    }
}

/// Two 3×3 conv-bn layers with an identity skip.
#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvBn,
    b: ConvBn,
}

impl ResBlock {
    fn new(name: &str, ch: usize) -> Self {
        ResBlock {
            a: ConvBn::new(&format!("{name}.a"), ch, ch, 3, 1, true),
            b: ConvBn::new(&format!("{name}.b"), ch, ch, 3, 1, false),
        }
    }

    fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.a.init(store, seed)?;
        self.b.init(store, seed)
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: ForwardCtx) -> Result<Var> {
        let y = self.a.forward(g, store, x, ctx)?;
        let y = self.b.forward(g, store, y, ctx)?;
        let y = g.add(y, x)?;
        Ok(g.relu(y))
    }
}

/// 1×1 reduce → 3×3 → 1×1 restore, identity skip.
#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: ConvBn,
    mid: ConvBn,
    restore: ConvBn,
}

impl Bottleneck {
    fn new(name: &str, width: usize) -> Self {
        let half = (width / 2).max(1);
        Bottleneck {
            reduce: ConvBn::new(&format!("{name}.reduce"), width, half, 1, 1, true),
            mid: ConvBn::new(&format!("{name}.mid"), half, half, 3, 1, true),
            restore: ConvBn::new(&format!("{name}.restore"), half, width, 1, 1, false),
        }
    }

    fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.reduce.init(store, seed)?;
        self.mid.init(store, seed)?;
        self.restore.init(store, seed)
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: ForwardCtx) -> Result<Var> {
        let y = self.reduce.forward(g, store, x, ctx)?;
        let y = self.mid.forward(g, store, y, ctx)?;
        let y = self.restore.forward(g, store, y, ctx)?;
        let y = g.add(y, x)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvBn,
    blocks: Vec<ResBlock>,
    nlce: Option<Nlce>,
}

/// Backbone stage maps `C2..C5`, enhanced maps `E2..E5`, pyramid `P2..P5`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub c: [Var; 4],
    pub e: [Var; 4],
    pub p: [Var; 4],
}

/// Full-resolution two-class logits `[B, 2, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct SegmentationOutput {
    /// Predictions from `P2..P5`.
    pub levels: [Var; 4],
    pub refined: Var,
}

#[derive(Clone, Debug)]
pub struct Nlcen {
    pub cfg: ModelConfig,
    stem: ConvBn,
    stages: Vec<Stage>,
    top: Conv,
    laterals: Vec<Conv>,
    heads: Vec<Conv>,
    refine: Vec<Vec<Bottleneck>>,
    fuse: Conv,
}

impl Nlcen {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels;
        let width = cfg.pyramid_width;
        let stem = ConvBn::new("backbone.stem", cfg.in_channels, ch[0], 3, 2, true);
        let mut stages = Vec::new();
        let mut prev = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let level = i + 2;
            let name = format!("backbone.conv{level}");
            let nlce = cfg.variant.parts().map(|parts| {
                let ncfg = NlceConfig::new(c).with_codewords(cfg.codewords);
                Nlce::new(format!("nlce{level}"), ncfg, parts)
            });
            stages.push(Stage {
                down: ConvBn::new(&format!("{name}.down"), prev, c, 3, 2, true),
                blocks: (0..cfg.blocks_per_stage)
                    .map(|b| ResBlock::new(&format!("{name}.block{b}"), c))
                    .collect(),
                nlce,
            });
            prev = c;
        }
        let top = Conv::new("fpn.top", ch[3], width, 1, 1).with_bias();
        let laterals = (0..3)
            .map(|i| Conv::new(format!("fpn.lateral{}", i + 2), ch[i], width, 1, 1).with_bias())
            .collect();
        let heads = (0..4)
            .map(|i| Conv::new(format!("head{}", i + 2), width, 2, 3, 1).with_bias())
            .collect();
        let refine = (0..4)
            .map(|i| (0..i).map(|j| Bottleneck::new(&format!("refine.p{}.b{j}", i + 2), width)).collect())
            .collect();
        let fuse = Conv::new("refine.fuse", 4 * width, 2, 3, 1).with_bias();
        Ok(Nlcen {
            cfg,
            stem,
            stages,
            top,
            laterals,
            heads,
            refine,
            fuse,
        })
    }

    /// Freshly initialised parameters. Initial values depend only on the
    /// seed and the parameter name, so variants agree on shared layers.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.stem.init(&mut store, seed)?;
        for s in &self.stages {
            s.down.init(&mut store, seed)?;
            for b in &s.blocks {
                b.init(&mut store, seed)?;
            }
            if let Some(n) = &s.nlce {
                n.init(&mut store, seed)?;
            }
        }
        self.top.init(&mut store, seed)?;
        for l in &self.laterals {
            l.init(&mut store, seed)?;
        }
        for h in &self.heads {
            h.init(&mut store, seed)?;
        }
        for r in self.refine.iter().flatten() {
            r.init(&mut store, seed)?;
        }
        self.fuse.init(&mut store, seed)?;
        Ok(store)
    }

    /// Checks that `store` holds exactly this architecture's parameters.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let expected = self.init(0)?;
        let mut diff = Vec::new();
        for p in expected.iter() {
            match store.tensor(&p.name) {
                None => diff.push(format!("missing {}", p.name)),
                Some(t) if t.shape() != p.tensor.shape() => {
                    diff.push(format!("{} has shape {:?}, expected {:?}", p.name, t.shape(), p.tensor.shape()))
                }
                Some(_) => {}
            }
        }
        for name in store.names() {
            if !expected.contains(name) {
                diff.push(format!("unexpected {name}"));
            }
        }
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::ArchitectureMismatch(diff.join(", ")))
        }
    }

    /// Maps 0–255 pixels to the network's input scale.
    pub fn normalize(g: &mut Graph, pixels: Var) -> Var {
        let scale = 1.0 / (255.0 * PIXEL_STD);
        g.scale_shift(pixels, scale, -PIXEL_MEAN / PIXEL_STD)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<[usize; 4]> {
        let shape = g.shape(x);
        match *shape {
            [b, c, h, w] if c == self.cfg.in_channels && h == w && h % 32 == 0 && h > 0 && b > 0 => Ok([b, c, h, w]),
            _ => Err(Error::Shape(format!(
                "expected [B, {}, S, S] input with S divisible by 32, got {shape:?}",
                self.cfg.in_channels
            ))),
        }
    }

    /// Stage maps `C2..C5` of normalised input `x`.
    pub fn backbone(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: ForwardCtx) -> Result<[Var; 4]> {
        self.check_input(g, x)?;
        let mut h = self.stem.forward(g, store, x, ctx)?;
        let mut out = Vec::with_capacity(4);
        for s in &self.stages {
            h = s.down.forward(g, store, h, ctx)?;
            for b in &s.blocks {
                h = b.forward(g, store, h, ctx)?;
            }
            out.push(h);
        }
        Ok(out.try_into().expect("four stages"))
    }

    /// `E_i` for stage `i = level − 2`; identity when the variant has no module.
    pub fn apply_nlce(&self, g: &mut Graph, store: &ParamStore, level: usize, c: Var, ctx: ForwardCtx) -> Result<Var> {
        match &self.stages[level - 2].nlce {
            Some(n) => n.forward(g, store, c, ctx),
            None => Ok(c),
        }
    }

    /// `P5 = top(E5)`, `P_i = lateral_i(E_i) + up(P_{i+1})`.
    pub fn build_pyramid(&self, g: &mut Graph, store: &ParamStore, e: [Var; 4]) -> Result<[Var; 4]> {
        let mut p = [e[3]; 4];
        p[3] = self.top.forward(g, store, e[3])?;
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(g, store, e[i])?;
            let s = g.shape(lat).to_vec();
            let up = g.resize_bilinear(p[i + 1], s[2], s[3])?;
            p[i] = g.add(lat, up)?;
        }
        Ok(p)
    }

    /// Level head: 3×3 conv to two classes, bilinear resize to `side`.
    pub fn predict_level(&self, g: &mut Graph, store: &ParamStore, level: usize, p: Var, side: usize) -> Result<Var> {
        let logits = self.heads[level - 2].forward(g, store, p)?;
        Ok(g.resize_bilinear(logits, side, side)?)
    }

    /// Refinement: 0/1/2/3 bottlenecks on `P2..P5`, upsample to `P2`,
    /// concatenate, predict, resize to `side`.
    pub fn refine(&self, g: &mut Graph, store: &ParamStore, p: [Var; 4], side: usize, ctx: ForwardCtx) -> Result<Var> {
        let target = g.shape(p[0]).to_vec();
        let mut parts = Vec::with_capacity(4);
        for (i, &pi) in p.iter().enumerate() {
            let mut h = pi;
            for b in &self.refine[i] {
                h = b.forward(g, store, h, ctx)?;
            }
            if i > 0 {
                h = g.resize_bilinear(h, target[2], target[3])?;
            }
            parts.push(h);
        }
        let fused = g.concat(&parts, 1)?;
        let logits = self.fuse.forward(g, store, fused)?;
        Ok(g.resize_bilinear(logits, side, side)?)
    }

    pub fn features(&self, g: &mut Graph, store: &ParamStore, pixels: Var, ctx: ForwardCtx) -> Result<PyramidFeatures> {
        let x = Self::normalize(g, pixels);
        let c = self.backbone(g, store, x, ctx)?;
        let mut e = c;
        for (i, ci) in c.iter().enumerate() {
            e[i] = self.apply_nlce(g, store, i + 2, *ci, ctx)?;
        }
        let p = self.build_pyramid(g, store, e)?;
        Ok(PyramidFeatures { c, e, p })
    }

    /// Full forward pass on pixels `[B, C, S, S]` in 0–255 units.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pixels: Var, ctx: ForwardCtx) -> Result<SegmentationOutput> {
        let [_, _, side, _] = self.check_input(g, pixels)?;
        let f = self.features(g, store, pixels, ctx)?;
        let mut levels = f.p;
        for (i, p) in f.p.iter().enumerate() {
            levels[i] = self.predict_level(g, store, i + 2, *p, side)?;
        }
        let refined = self.refine(g, store, f.p, side, ctx)?;
        Ok(SegmentationOutput { levels, refined })
    }
}

/// Whether a parameter belongs to the base network (everything but NLCE).
pub fn is_base_param(name: &str) -> bool {
    !is_nlce_param(name)
}

/// One-hot `[B, 2, H, W]` encoding of binary label planes.
pub fn one_hot(masks: &[&[u8]], h: usize, w: usize) -> Result<Tensor> {
    let b = masks.len();
    let plane = h * w;
    let mut data = vec![0.0; b * 2 * plane];
    for (n, m) in masks.iter().enumerate() {
        if m.len() != plane {
            return Err(Error::Shape(format!("mask has {} pixels, logits have {plane}", m.len())));
        }
        for (i, &v) in m.iter().enumerate() {
            if v > 1 {
                return Err(Error::NonBinaryMask { value: v, index: i });
            }
            data[(n * 2 + v as usize) * plane + i] = 1.0;
        }
    }
    Ok(Tensor::new([b, 2, h, w], data)?)
}

/// Per-pixel negative log-likelihood `−(1/|I|) Σ_i log p_{i, g_i}`,
/// averaged over the batch as well.
pub fn seg_loss(g: &mut Graph, logits: Var, masks: &[&[u8]]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let [b, 2, h, w] = shape[..] else {
        return Err(Error::Shape(format!("expected [B, 2, H, W] logits, got {shape:?}")));
    };
    if masks.len() != b {
        return Err(Error::Shape(format!("{} masks for a batch of {b}", masks.len())));
    }
    let target = g.constant(one_hot(masks, h, w)?);
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, target)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / (b * h * w) as f64))
}

/// `L = λ Σ L_g + λ L_r` with `λ = 0.25`.
pub fn total_loss(g: &mut Graph, levels: [Var; 4], refined: Var) -> Result<Var> {
    let mut sum = levels[0];
    for &l in &levels[1..] {
        sum = g.add(sum, l)?;
    }
    let sum = g.add(sum, refined)?;
    Ok(g.scale(sum, LOSS_WEIGHT))
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(levels: [f64; 4], refined: f64) -> f64 {
    LOSS_WEIGHT * levels.iter().sum::<f64>() + LOSS_WEIGHT * refined
}

/// Level and refined losses plus their weighted total.
pub fn training_loss(g: &mut Graph, out: &SegmentationOutput, masks: &[&[u8]]) -> Result<Var> {
    let mut levels = out.levels;
    for (i, l) in out.levels.iter().enumerate() {
        levels[i] = seg_loss(g, *l, masks)?;
    }
    let refined = seg_loss(g, out.refined, masks)?;
    total_loss(g, levels, refined)
}

/// Argmax labels of `[B, 2, H, W]` logits, one `H·W` plane per image.
/// Ties go to background.
pub fn argmax_masks(logits: &Tensor) -> Vec<Vec<u8>> {
    let s = logits.shape();
    let (b, plane) = (s[0], s[2] * s[3]);
    let d = logits.data();
    (0..b)
        .map(|n| {
            let (bg, fg) = (&d[n * 2 * plane..][..plane], &d[(n * 2 + 1) * plane..][..plane]);
            bg.iter().zip(fg).map(|(a, f)| u8::from(f > a)).collect()
        })
        .collect()
}

