//! Batch normalisation over every axis except one channel axis.

pub(crate) struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance, used for normalisation.
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) fn moments(x: &[f64], (outer, ch, inner): (usize, usize, usize)) -> BatchMoments {
    let count = outer * inner;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for o in 0..outer {
            let base = (o * ch + c) * inner;
            s += x[base..base + inner].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for o in 0..outer {
            let base = (o * ch + c) * inner;
            v += x[base..base + inner].iter().map(|t| (t - m) * (t - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / count as f64;
    }
    BatchMoments { mean, var, count }
}

/// Writes `(x - mean) * inv_std` per channel.
pub(crate) fn normalize(
    x: &[f64],
    (outer, ch, inner): (usize, usize, usize),
    mean: &[f64],
    inv_std: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for c in 0..ch {
            let base = (o * ch + c) * inner;
            for i in base..base + inner {
                out[i] = (x[i] - mean[c]) * inv_std[c];
            }
        }
    }
    out
}
