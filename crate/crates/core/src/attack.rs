//! Targeted iterative FGSM.
//!
//! Each step descends the refined-prediction loss towards the inverted
//! ground truth `S_t = 1 − gt`:
//!
//! `x_{t+1} = clip_range(clip_ε(x_t − α · sign(∇_x L_r(f(x_t), S_t))))`
//!
//! Everything is in 0–255 pixel units; the model normalises internally.

use nlcen_tensor::{Graph, ParamStore, Tensor};
use rayon::prelude::*;

use crate::data::{batch_tensor, Image, Mask, SampleRecord};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::metrics::{confusion, mean_scores, ConfusionCounts};
use crate::segnet::{argmax_masks, seg_loss, Nlcen};

/// Intensities of the robustness sweep.
pub const PAPER_INTENSITIES: [f64; 18] = [
    0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0, 22.0, 24.0, 26.0, 28.0, 30.0, 32.0,
];

/// `min(ε + 4, ⌈1.25 ε⌉)` rounded up, at least 1.
pub fn iteration_count(epsilon: f64) -> usize {
    let n = (epsilon + 4.0).min((1.25 * epsilon).ceil()).ceil();
    if n.is_finite() && n >= 1.0 {
        n as usize
    } else {
        1
    }
}

/// Inverted ground truth.
pub fn target_mask(gt: &Mask) -> Mask {
    Mask {
        height: gt.height,
        width: gt.width,
        data: gt.data.iter().map(|&v| 1 - v.min(1)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    /// Overrides [`iteration_count`] when set.
    pub iterations: Option<usize>,
    pub pixel_range: (f64, f64),
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            alpha: 1.0,
            iterations: None,
            pixel_range: (0.0, 255.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.alpha > 0.0) {
            return Err(Error::Invalid(format!(
                "attack needs epsilon > 0 and alpha > 0 (got {}, {})",
                self.epsilon, self.alpha
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.iterations.unwrap_or_else(|| iteration_count(self.epsilon))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed-gradient descent step, projected onto the ε-ball around
/// `original` and then onto the pixel range. `sign(0) = 0`.
pub fn fgsm_step(x: &Tensor, grad: &Tensor, original: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    if x.shape() != grad.shape() || x.shape() != original.shape() {
        return Err(Error::Shape(format!(
            "fgsm step on {:?} with gradient {:?} and original {:?}",
            x.shape(),
            grad.shape(),
            original.shape()
        )));
    }
    let (lo, hi) = cfg.pixel_range;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .zip(original.data())
        .map(|((&xi, &gi), &oi)| {
            let stepped = xi - cfg.alpha * sign(gi);
            stepped.clamp(oi - cfg.epsilon, oi + cfg.epsilon).clamp(lo, hi)
        })
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

/// A differentiable model under attack.
pub trait AttackTarget: Sync {
    /// Gradient of the attack loss towards `target` at pixels `x: [1, C, H, W]`.
    fn loss_grad(&self, x: &Tensor, target: &Mask) -> Result<Tensor>;

    /// Predicted binary mask for pixels `x: [1, C, H, W]`.
    fn predict(&self, x: &Tensor) -> Result<Mask>;
}

/// A network with its parameters, evaluated in inference mode.
#[derive(Clone, Copy)]
pub struct Segmenter<'a> {
    pub net: &'a Nlcen,
    pub params: &'a ParamStore,
}

impl<'a> Segmenter<'a> {
    pub fn new(net: &'a Nlcen, params: &'a ParamStore) -> Self {
        Segmenter { net, params }
    }

    /// Refined logits for a batch of pixels.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.net.forward(&mut g, self.params, xv, ForwardCtx::EVAL)?;
        Ok(g.value(out.refined).clone())
    }

    pub fn predict_images(&self, images: &[&Image]) -> Result<Vec<Mask>> {
        let x = batch_tensor(images)?;
        let logits = self.logits(&x)?;
        let (h, w) = (images[0].height, images[0].width);
        Ok(argmax_masks(&logits)
            .into_iter()
            .map(|data| Mask { height: h, width: w, data })
            .collect())
    }
}

impl AttackTarget for Segmenter<'_> {
    fn loss_grad(&self, x: &Tensor, target: &Mask) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = self.net.forward(&mut g, self.params, xv, ForwardCtx::EVAL)?;
        let loss = seg_loss(&mut g, out.refined, &[&target.data])?;
        Ok(g.backward(loss)?.get(xv)?)
    }

    fn predict(&self, x: &Tensor) -> Result<Mask> {
        let logits = self.logits(x)?;
        let s = x.shape();
        let data = argmax_masks(&logits).swap_remove(0);
        Ok(Mask {
            height: s[2],
            width: s[3],
            data,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AdversarialSample {
    pub original: Tensor,
    pub perturbed: Tensor,
    pub target: Mask,
    pub epsilon: f64,
    pub iterations: usize,
}

impl AdversarialSample {
    /// `‖perturbed − original‖_∞`.
    pub fn linf(&self) -> f64 {
        self.perturbed.max_abs_diff(&self.original)
    }
}

pub fn generate_adversarial(
    model: &impl AttackTarget,
    image: &Image,
    gt: &Mask,
    cfg: &AttackConfig,
) -> Result<AdversarialSample> {
    cfg.validate()?;
    let original = batch_tensor(&[image])?;
    let target = target_mask(gt);
    let steps = cfg.steps();
    let mut x = original.clone();
    for it in 0..steps {
        let grad = model.loss_grad(&x, &target)?;
        if !grad.all_finite() {
            return Err(Error::NonFiniteGradient(it));
        }
        x = fgsm_step(&x, &grad, &original, cfg)?;
    }
    Ok(AdversarialSample {
        original,
        perturbed: x,
        target,
        epsilon: cfg.epsilon,
        iterations: steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub dic: f64,
    pub jsc: f64,
    pub n_images: usize,
}

pub const SWEEP_HEADER: &str = "epsilon,dic,jsc,n_images";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!("{:.6},{:.6},{:.6},{}", self.epsilon, self.dic, self.jsc, self.n_images)
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Clean row (`ε = 0`) followed by one row per intensity. Jobs run in
/// parallel over (intensity, image) pairs; results are reduced in a fixed
/// order, so the table is independent of scheduling.
pub fn sweep(model: &impl AttackTarget, samples: &[SampleRecord], intensities: &[f64], alpha: f64) -> Result<Vec<SweepRow>> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot sweep an empty dataset".into()));
    }
    for &eps in intensities {
        AttackConfig { alpha, ..AttackConfig::new(eps) }.validate()?;
    }
    let levels: Vec<f64> = std::iter::once(0.0).chain(intensities.iter().copied()).collect();
    let jobs: Vec<(usize, usize)> = (0..levels.len())
        .flat_map(|l| (0..samples.len()).map(move |s| (l, s)))
        .collect();
    let counts: Vec<ConfusionCounts> = jobs
        .par_iter()
        .map(|&(l, s)| {
            let rec = &samples[s];
            let x = if levels[l] == 0.0 {
                batch_tensor(&[&rec.image])?
            } else {
                let cfg = AttackConfig { alpha, ..AttackConfig::new(levels[l]) };
                generate_adversarial(model, &rec.image, &rec.mask, &cfg)?.perturbed
            };
            confusion(&model.predict(&x)?.data, &rec.mask.data)
        })
        .collect::<Result<_>>()?;
    Ok(levels
        .iter()
        .zip(counts.chunks(samples.len()))
        .map(|(&epsilon, c)| {
            let (dic, jsc) = mean_scores(c);
            SweepRow {
                epsilon,
                dic,
                jsc,
                n_images: samples.len(),
            }
        })
        .collect())
}
