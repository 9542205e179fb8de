//! Non-local context encoder.
//!
//! The module works on a feature map flattened to rows `[B, N, C]`
//! (`N = H·W`). Two stages:
//!
//! * non-local: `A = softmax_j(θ(x_i)ᵀ φ(x_j))`, `y = A·g(x)`,
//!   `z = W_z y + x`;
//! * context encoding: soft-assign the projected features `z'` to a learned
//!   codebook `d_1..d_K`, aggregate residuals `e_k = Σ_i a_ik (z'_i − d_k)`,
//!   pool `e = Σ_k relu(bn(e_k))` and rescale channels by
//!   `γ = sigmoid(W_γ e)`.
//!
//! The output `z ⊗ γ` has the shape of the input, so the module drops into
//! any network between two layers with equal channel counts.

use nlcen_tensor::{Graph, ParamStore, Tensor, Var};
use rand::RngExt;

use crate::error::{Error, Result};
use crate::layers::{he_uniform, linear, param_rng, BatchNorm, ForwardCtx};

/// Default codebook size.
pub const DEFAULT_CODEWORDS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NlceConfig {
    /// Input (and output) channels `C`.
    pub channels: usize,
    /// Embedding width `C'` of θ, φ and g.
    pub embed: usize,
    /// Codebook size `K`.
    pub codewords: usize,
    /// Codeword width `C''`.
    pub code_dim: usize,
}

impl NlceConfig {
    /// `C' = max(1, C/2)`, `K = 32`, `C'' = C'`.
    pub fn new(channels: usize) -> Self {
        let embed = (channels / 2).max(1);
        NlceConfig {
            channels,
            embed,
            codewords: DEFAULT_CODEWORDS,
            code_dim: embed,
        }
    }

    pub fn with_codewords(mut self, k: usize) -> Self {
        self.codewords = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.embed == 0 || self.codewords == 0 || self.code_dim == 0 {
            return Err(Error::Invalid(format!("degenerate NLCE config {self:?}")));
        }
        Ok(())
    }
}

/// Which halves of the module are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NlceParts {
    Full,
    /// Output `F_z`; no channel attention.
    NonLocalOnly,
    /// `F_z = X`; channel attention only.
    EncoderOnly,
}

impl NlceParts {
    fn non_local(self) -> bool {
        self != NlceParts::EncoderOnly
    }

    fn encoder(self) -> bool {
        self != NlceParts::NonLocalOnly
    }
}

#[derive(Clone, Debug)]
pub struct Nlce {
    pub prefix: String,
    pub cfg: NlceConfig,
    pub parts: NlceParts,
}

impl Nlce {
    pub fn new(prefix: impl Into<String>, cfg: NlceConfig, parts: NlceParts) -> Self {
        Nlce {
            prefix: prefix.into(),
            cfg,
            parts,
        }
    }

    fn p(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    fn bn(&self) -> BatchNorm {
        BatchNorm::new(self.p("bn"), self.cfg.code_dim, 2)
    }

    /// Registers the module's parameters. `W_z` starts at zero so an
    /// untrained module is a residual identity followed by `γ ≈ 0.5`.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.cfg.validate()?;
        let NlceConfig {
            channels: c,
            embed: e,
            codewords: k,
            code_dim: d,
        } = self.cfg;
        if self.parts.non_local() {
            for f in ["theta", "phi", "g"] {
                let name = self.p(f);
                store.register(&name, he_uniform(seed, &name, &[e, c], c))?;
            }
            store.register(&self.p("z"), Tensor::zeros([c, e]))?;
        }
        if self.parts.encoder() {
            let proj = self.p("proj");
            store.register(&proj, he_uniform(seed, &proj, &[d, c], c))?;
            let book = self.p("codebook");
            let bound = 1.0 / (k as f64).sqrt();
            let mut rng = param_rng(seed, &book);
            store.register(&book, Tensor::from_fn([k, d], |_| rng.random_range(-bound..bound)))?;
            let smooth = self.p("smoothing");
            let mut rng = param_rng(seed, &smooth);
            // (0, 1]
            store.register(&smooth, Tensor::from_fn([k], |_| 1.0 - rng.random_range(0.0..1.0)))?;
            self.bn().init(store)?;
            let gamma = self.p("gamma");
            store.register(&gamma, he_uniform(seed, &gamma, &[c, d], d))?;
        }
        Ok(())
    }

    /// Row-normalised affinities `[B, N, N]` between all positions of `x: [B, N, C]`.
    pub fn pairwise_attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let theta = linear(g, store, &self.p("theta"), x)?;
        let phi = linear(g, store, &self.p("phi"), x)?;
        let phi_t = g.transpose(phi)?;
        let logits = g.matmul(theta, phi_t)?;
        let last = g.shape(logits).len() - 1;
        Ok(g.softmax(logits, last)?)
    }

    /// `y = A · g(x)`, `[B, N, C']`.
    pub fn non_local_response(&self, g: &mut Graph, store: &ParamStore, x: Var, attention: Var) -> Result<Var> {
        let gx = linear(g, store, &self.p("g"), x)?;
        Ok(g.matmul(attention, gx)?)
    }

    /// `z = W_z y + x`.
    pub fn enhance(&self, g: &mut Graph, store: &ParamStore, x: Var, y: Var) -> Result<Var> {
        let wy = linear(g, store, &self.p("z"), y)?;
        Ok(g.add(wy, x)?)
    }

    /// Full non-local stage, `[B, N, C] → [B, N, C]`.
    pub fn non_local(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.pairwise_attention(g, store, x)?;
        let y = self.non_local_response(g, store, x, a)?;
        self.enhance(g, store, x, y)
    }

    /// Projected features `z' = proj(F_z)` `[B, N, C'']` and their soft
    /// assignment weights `[B, N, K]` to the codewords.
    pub fn assignment(&self, g: &mut Graph, store: &ParamStore, fz: Var) -> Result<(Var, Var)> {
        let zp = linear(g, store, &self.p("proj"), fz)?;
        let book = g.param(store, &self.p("codebook"))?;
        let s = g.param(store, &self.p("smoothing"))?;
        let neg_d2 = g.neg_sq_distance(zp, book)?;
        let logits = g.mul(neg_d2, s)?;
        let last = g.shape(logits).len() - 1;
        Ok((zp, g.softmax(logits, last)?))
    }

    /// Aggregated residuals `e_k = Σ_i a_ik (z'_i − d_k)`, `[B, K, C'']`.
    pub fn aggregate_residuals(&self, g: &mut Graph, store: &ParamStore, fz: Var) -> Result<Var> {
        let (zp, a) = self.assignment(g, store, fz)?;
        let a_t = g.transpose(a)?;
        let weighted = g.matmul(a_t, zp)?;
        let mass = g.sum(a, &[1])?;
        let shape = g.shape(mass).to_vec();
        let mass = g.reshape(mass, &[shape[0], shape[1], 1])?;
        let book = g.param(store, &self.p("codebook"))?;
        let shifted = g.mul(mass, book)?;
        Ok(g.sub(weighted, shifted)?)
    }

    /// Global context `e = Σ_k relu(bn(e_k))`, `[B, C'']`.
    pub fn encode_context(&self, g: &mut Graph, store: &ParamStore, fz: Var, ctx: ForwardCtx) -> Result<Var> {
        let ek = self.aggregate_residuals(g, store, fz)?;
        let normed = self.bn().forward(g, store, ek, ctx)?;
        let act = g.relu(normed);
        Ok(g.sum(act, &[1])?)
    }

    /// Channel scaling `γ = sigmoid(W_γ e)`, `[B, C]`.
    pub fn channel_attention(&self, g: &mut Graph, store: &ParamStore, e: Var) -> Result<Var> {
        let logits = linear(g, store, &self.p("gamma"), e)?;
        Ok(g.sigmoid(logits))
    }

    /// `F_z ⊗ γ` with `γ: [B, C]` broadcast over positions.
    pub fn rescale(&self, g: &mut Graph, fz: Var, gamma: Var) -> Result<Var> {
        let shape = g.shape(gamma).to_vec();
        let gamma = g.reshape(gamma, &[shape[0], 1, shape[1]])?;
        Ok(g.mul(fz, gamma)?)
    }

    /// Module output on rows `[B, N, C]`.
    pub fn forward_rows(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: ForwardCtx) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != self.cfg.channels {
            return Err(Error::Shape(format!(
                "{}: expected [B, N, {}] rows, got {shape:?}",
                self.prefix, self.cfg.channels
            )));
        }
        let fz = if self.parts.non_local() {
            self.non_local(g, store, x)?
        } else {
            x
        };
        if !self.parts.encoder() {
            return Ok(fz);
        }
        let e = self.encode_context(g, store, fz, ctx)?;
        let gamma = self.channel_attention(g, store, e)?;
        self.rescale(g, fz, gamma)
    }

    /// Module output on a feature map `[B, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: ForwardCtx) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::Shape(format!("{}: expected [B, C, H, W], got {shape:?}", self.prefix)));
        };
        let rows = to_rows(g, x, [b, c, h, w])?;
        let out = self.forward_rows(g, store, rows, ctx)?;
        from_rows(g, out, [b, c, h, w])
    }
}

/// `[B, C, H, W] → [B, H·W, C]`.
pub fn to_rows(g: &mut Graph, x: Var, [b, c, h, w]: [usize; 4]) -> Result<Var> {
    let flat = g.reshape(x, &[b, c, h * w])?;
    Ok(g.transpose(flat)?)
}

/// `[B, H·W, C] → [B, C, H, W]`.
pub fn from_rows(g: &mut Graph, rows: Var, [b, c, h, w]: [usize; 4]) -> Result<Var> {
    let t = g.transpose(rows)?;
    Ok(g.reshape(t, &[b, c, h, w])?)
}
