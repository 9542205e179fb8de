/// Views a shape as `[outer, len, inner]` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-shifted softmax (or log-softmax) along the middle axis.
pub(crate) fn forward(x: &[f64], (outer, len, inner): (usize, usize, usize), log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            if log {
                let lse = total.ln();
                for k in 0..len {
                    out[at(k)] = x[at(k)] - max - lse;
                }
            } else {
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
    }
    out
}

/// Gradient through softmax given its output `y`.
pub(crate) fn backward(y: &[f64], dy: &[f64], dims: (usize, usize, usize), log: bool) -> Vec<f64> {
    let (outer, len, inner) = dims;
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            if log {
                let total: f64 = (0..len).map(|k| dy[at(k)]).sum();
                for k in 0..len {
                    dx[at(k)] = dy[at(k)] - y[at(k)].exp() * total;
                }
            } else {
                let dot: f64 = (0..len).map(|k| dy[at(k)] * y[at(k)]).sum();
                for k in 0..len {
                    dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
                }
            }
        }
    }
    dx
}
