//! Name-addressed op dispatch, for callers that build graphs from data.

use std::str::FromStr;

use crate::error::{mismatch, Result, TensorError};
use crate::graph::{Graph, NormMode, Var};

/// An op together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Conv2d { stride: usize, padding: usize },
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Relu,
    Sigmoid,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Exp,
    NegSquaredDistance,
    ReduceSum { axes: Vec<usize> },
    /// `None` normalises with batch statistics; `Some((mean, var))` with
    /// the given running statistics. Inputs are `[x, gamma, beta]`.
    BatchNorm2d { running: Option<(Vec<f64>, Vec<f64>)> },
    BilinearResize { height: usize, width: usize },
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    Transpose,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LogSoftmax { .. } => "log_softmax",
            OpKind::Exp => "exp",
            OpKind::NegSquaredDistance => "neg_squared_distance",
            OpKind::ReduceSum { .. } => "reduce_sum",
            OpKind::BatchNorm2d { .. } => "batchnorm2d",
            OpKind::BilinearResize { .. } => "bilinear_resize",
            OpKind::Concat { .. } => "concat",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Transpose => "transpose",
        }
    }
}

/// Parses attribute-free kinds; kinds that need attributes must be built
/// directly.
impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "relu" => OpKind::Relu,
            "sigmoid" => OpKind::Sigmoid,
            "exp" => OpKind::Exp,
            "neg_squared_distance" => OpKind::NegSquaredDistance,
            "transpose" => OpKind::Transpose,
            other => return Err(TensorError::UnknownOp(other.to_string())),
        })
    }
}

impl Graph {
    /// Applies `kind` to `inputs`.
    pub fn forward_op(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul
            | OpKind::Conv2d { .. }
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::NegSquaredDistance => Some(2),
            OpKind::BatchNorm2d { .. } => Some(3),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(mismatch(
                    kind.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            &OpKind::Conv2d { stride, padding } => self.conv2d(inputs[0], inputs[1], stride, padding),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            &OpKind::ScalarMul(s) => Ok(self.scale(inputs[0], s)),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Sigmoid => Ok(self.sigmoid(inputs[0])),
            &OpKind::Softmax { axis } => self.softmax(inputs[0], axis),
            &OpKind::LogSoftmax { axis } => self.log_softmax(inputs[0], axis),
            OpKind::Exp => Ok(self.exp(inputs[0])),
            OpKind::NegSquaredDistance => self.neg_sq_distance(inputs[0], inputs[1]),
            OpKind::ReduceSum { axes } => self.sum(inputs[0], axes),
            OpKind::BatchNorm2d { running } => {
                let mode = match running {
                    None => NormMode::Batch,
                    Some((mean, var)) => NormMode::Running { mean, var },
                };
                self.batch_norm(inputs[0], inputs[1], inputs[2], 1, mode).map(|(v, _)| v)
            }
            &OpKind::BilinearResize { height, width } => self.resize_bilinear(inputs[0], height, width),
            &OpKind::Concat { axis } => self.concat(inputs, axis),
            OpKind::Reshape { shape } => self.reshape(inputs[0], shape),
            OpKind::Transpose => self.transpose(inputs[0]),
        }
    }
}
