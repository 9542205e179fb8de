//! Non-local context encoding network (NLCEN) for binary segmentation,
//! with a targeted iterative-FGSM attack and a robustness harness.
//!
//! ```
//! use nlcen::{ForwardCtx, ModelConfig, Nlcen, Variant};
//! use nlcen_tensor::{Graph, Tensor};
//!
//! let cfg = ModelConfig { input_hw: 32, stage_channels: [2, 2, 2, 2], pyramid_width: 4, codewords: 2, ..ModelConfig::default() };
//! let net = Nlcen::new(cfg)?;
//! let params = net.init(7)?;
//! let mut g = Graph::new();
//! let x = g.constant(Tensor::full([1, 1, 32, 32], 128.0));
//! let out = net.forward(&mut g, &params, x, ForwardCtx::EVAL)?;
//! assert_eq!(g.shape(out.refined), &[1, 2, 32, 32]);
//! # Ok::<(), nlcen::Error>(())
//! ```

pub mod attack;
pub mod config;
pub mod data;
mod error;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod nlce;
pub mod segnet;
pub mod train;

pub use error::{Error, Result};
pub use layers::ForwardCtx;
pub use nlce::{Nlce, NlceConfig, NlceParts};
pub use segnet::{ModelConfig, Nlcen, Variant};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/nlce.md")]
    mod nlce {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/attack.md")]
    mod attack {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
