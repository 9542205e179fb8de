//! Scalar reference implementations shared by the integration tests.
#![allow(dead_code)]

use nlcen::{Nlce, NlceConfig, NlceParts};
use nlcen_tensor::{ParamStore, Tensor, BN_EPS};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(store: &ParamStore, name: &str) -> Mat {
    let t = store.tensor(name).unwrap_or_else(|| panic!("no {name}"));
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn vector(store: &ParamStore, name: &str) -> Vec<f64> {
    store.tensor(name).unwrap_or_else(|| panic!("no {name}")).data().to_vec()
}

pub fn apply(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Deterministic, irregular fixture values.
pub fn fixture(n: usize, salt: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * 0.731 + salt).sin() * 0.8).collect()
}

/// An NLCE with every parameter set to fixture values (W_z included).
pub fn fixture_nlce(c: usize, k: usize) -> (Nlce, ParamStore) {
    let nlce = Nlce::new("nlce2", NlceConfig::new(c).with_codewords(k), NlceParts::Full);
    let mut store = ParamStore::new();
    nlce.init(&mut store, 1).unwrap();
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for (i, name) in names.iter().enumerate() {
        if name.contains(".bn.") {
            continue;
        }
        let shape = store.tensor(name).unwrap().shape().to_vec();
        let len = shape.iter().product();
        let mut vals = fixture(len, i as f64);
        if name.ends_with("smoothing") {
            vals.iter_mut().for_each(|v| *v = v.abs() + 0.2);
        }
        store.set(name, Tensor::new(shape, vals).unwrap()).unwrap();
    }
    (nlce, store)
}

/// Row-wise softmax of θ(x_i)ᵀφ(x_j), by explicit exp/sum over all pairs.
pub fn attention(x: &Mat, theta: &Mat, phi: &Mat) -> Mat {
    let n = x.len();
    let th: Mat = x.iter().map(|xi| apply(theta, xi)).collect();
    let ph: Mat = x.iter().map(|xi| apply(phi, xi)).collect();
    (0..n)
        .map(|i| {
            let f: Vec<f64> = (0..n)
                .map(|j| th[i].iter().zip(&ph[j]).map(|(a, b)| a * b).sum::<f64>().exp())
                .collect();
            let norm: f64 = f.iter().sum();
            f.iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// `z_i = W_z Σ_j a_ij W_g x_j + x_i`.
pub fn enhanced(x: &Mat, store: &ParamStore, p: &str) -> Mat {
    let a = attention(x, &mat(store, &format!("{p}.theta")), &mat(store, &format!("{p}.phi")));
    let wg = mat(store, &format!("{p}.g"));
    let wz = mat(store, &format!("{p}.z"));
    let gx: Mat = x.iter().map(|xj| apply(&wg, xj)).collect();
    (0..x.len())
        .map(|i| {
            let mut y = vec![0.0; gx[0].len()];
            for (j, gj) in gx.iter().enumerate() {
                for (yc, g) in y.iter_mut().zip(gj) {
                    *yc += a[i][j] * g;
                }
            }
            apply(&wz, &y).iter().zip(&x[i]).map(|(a, b)| a + b).collect()
        })
        .collect()
}

/// Soft-assignment weights `[N][K]` and aggregated residuals `[K][C'']`.
pub fn residuals(zp: &Mat, book: &Mat, smooth: &[f64]) -> (Mat, Mat) {
    let k = book.len();
    let d = book[0].len();
    let mut weights = Vec::new();
    let mut agg = vec![vec![0.0; d]; k];
    for z in zp {
        let dist: Vec<f64> = book
            .iter()
            .map(|dk| z.iter().zip(dk).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let un: Vec<f64> = (0..k).map(|kk| (-smooth[kk] * dist[kk]).exp()).collect();
        let r: f64 = un.iter().sum();
        let w: Vec<f64> = un.iter().map(|u| u / r).collect();
        for kk in 0..k {
            for c in 0..d {
                agg[kk][c] += w[kk] * (z[c] - book[kk][c]);
            }
        }
        weights.push(w);
    }
    (weights, agg)
}

/// Batch-norm over the K aggregated residuals, using the stored running
/// statistics (`batch = false`) or the statistics of `agg` itself.
pub fn bn_relu_sum(agg: &Mat, store: &ParamStore, p: &str, batch: bool) -> Vec<f64> {
    let k = agg.len();
    let d = agg[0].len();
    let gamma = vector(store, &format!("{p}.bn.weight"));
    let beta = vector(store, &format!("{p}.bn.bias"));
    let (mean, var) = if batch {
        let mean: Vec<f64> = (0..d).map(|c| agg.iter().map(|r| r[c]).sum::<f64>() / k as f64).collect();
        let var = (0..d)
            .map(|c| agg.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / k as f64)
            .collect();
        (mean, var)
    } else {
        (vector(store, &format!("{p}.bn.running_mean")), vector(store, &format!("{p}.bn.running_var")))
    };
    (0..d)
        .map(|c| {
            agg.iter()
                .map(|r| (gamma[c] * (r[c] - mean[c]) / (var[c] + BN_EPS).sqrt() + beta[c]).max(0.0))
                .sum()
        })
        .collect()
}

/// Full module on one image given as rows `[N][C]`.
pub fn nlce_oracle(x: &Mat, store: &ParamStore, p: &str, batch_bn: bool) -> Mat {
    let fz = enhanced(x, store, p);
    let proj = mat(store, &format!("{p}.proj"));
    let zp: Mat = fz.iter().map(|z| apply(&proj, z)).collect();
    let (_, agg) = residuals(&zp, &mat(store, &format!("{p}.codebook")), &vector(store, &format!("{p}.smoothing")));
    let e = bn_relu_sum(&agg, store, p, batch_bn);
    let gamma: Vec<f64> = apply(&mat(store, &format!("{p}.gamma")), &e).into_iter().map(sigmoid).collect();
    fz.iter()
        .map(|z| z.iter().zip(&gamma).map(|(a, b)| a * b).collect())
        .collect()
}

pub fn rows_tensor(x: &Mat) -> Tensor {
    let (n, c) = (x.len(), x[0].len());
    Tensor::new([1, n, c], x.concat()).unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Planar feature map `[C][H][W]`.
pub type Map = Vec<Vec<Vec<f64>>>;

pub fn to_map(t: &Tensor, b: usize) -> Map {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let d = &t.data()[b * c * h * w..][..c * h * w];
    (0..c)
        .map(|ci| (0..h).map(|y| d[(ci * h + y) * w..][..w].to_vec()).collect())
        .collect()
}

pub fn flat(m: &Map) -> Vec<f64> {
    m.iter().flatten().flatten().copied().collect()
}

/// Direct convolution: weight `[Co, Ci, k, k]`, zero padding `k / 2`.
pub fn conv(x: &Map, store: &ParamStore, name: &str, stride: usize, bias: bool) -> Map {
    let w = store.tensor(&format!("{name}.weight")).unwrap();
    let [co, ci, k, _] = w.shape()[..] else { panic!() };
    let wd = w.data();
    let b = if bias { vector(store, &format!("{name}.bias")) } else { vec![0.0; co] };
    let (h, wi) = (x[0].len(), x[0][0].len());
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wi + 2 * pad - k) / stride + 1;
    (0..co)
        .map(|o| {
            (0..oh)
                .map(|y| {
                    (0..ow)
                        .map(|xx| {
                            let mut acc = b[o];
                            for i in 0..ci {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let sy = (y * stride + ky) as isize - pad as isize;
                                        let sx = (xx * stride + kx) as isize - pad as isize;
                                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wi {
                                            acc += wd[((o * ci + i) * k + ky) * k + kx] * x[i][sy as usize][sx as usize];
                                        }
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Inference-mode batch norm with the stored running statistics.
pub fn bn_eval(x: &Map, store: &ParamStore, name: &str) -> Map {
    let g = vector(store, &format!("{name}.weight"));
    let b = vector(store, &format!("{name}.bias"));
    let m = vector(store, &format!("{name}.running_mean"));
    let v = vector(store, &format!("{name}.running_var"));
    x.iter()
        .enumerate()
        .map(|(c, plane)| {
            plane
                .iter()
                .map(|row| row.iter().map(|&val| g[c] * (val - m[c]) / (v[c] + BN_EPS).sqrt() + b[c]).collect())
                .collect()
        })
        .collect()
}

pub fn relu(x: &Map) -> Map {
    x.iter().map(|p| p.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()).collect()
}

pub fn add(a: &Map, b: &Map) -> Map {
    a.iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect())
        .collect()
}

/// Bilinear resize with half-pixel centres, edge-clamped.
pub fn resize(x: &Map, oh: usize, ow: usize) -> Map {
    let (h, w) = (x[0].len(), x[0][0].len());
    let src = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    x.iter()
        .map(|plane| {
            (0..oh)
                .map(|y| {
                    let (y0, y1, fy) = src(y, h, oh);
                    (0..ow)
                        .map(|xx| {
                            let (x0, x1, fx) = src(xx, w, ow);
                            let top = plane[y0][x0] * (1.0 - fx) + plane[y0][x1] * fx;
                            let bot = plane[y1][x0] * (1.0 - fx) + plane[y1][x1] * fx;
                            top * (1.0 - fy) + bot * fy
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Conv → inference batch norm → optional relu.
pub fn conv_bn(x: &Map, store: &ParamStore, name: &str, stride: usize, act: bool) -> Map {
    let y = bn_eval(&conv(x, store, &format!("{name}.conv"), stride, false), store, &format!("{name}.bn"));
    if act {
        relu(&y)
    } else {
        y
    }
}
