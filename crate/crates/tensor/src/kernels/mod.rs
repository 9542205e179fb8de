//! Slice-level forward/backward kernels used by the graph ops.

pub(crate) mod broadcast;
pub(crate) mod conv;
pub(crate) mod norm;
pub(crate) mod resize;
pub(crate) mod softmax;
