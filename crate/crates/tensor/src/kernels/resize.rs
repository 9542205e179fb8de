/// Source taps for one output coordinate of a linear resample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre linear taps (`align_corners = false`), clamped at the border.
pub(crate) fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Resamples `planes` stacked `[h, w]` planes to `[out_h, out_w]`.
pub(crate) fn forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f64> {
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.lo * w..(a.lo + 1) * w];
            let r1 = &src[a.hi * w..(a.hi + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.lo] + b.frac * (r0[b.hi] - r0[b.lo]);
                let bot = r1[b.lo] + b.frac * (r1[b.hi] - r1[b.lo]);
                dst[oy * out_w + ox] = top + a.frac * (bot - top);
            }
        }
    }
    out
}

pub(crate) fn backward(
    dout: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f64> {
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &dout[p * out_h * out_w..(p + 1) * out_h * out_w];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let top = v * (1.0 - a.frac);
                let bot = v * a.frac;
                d[a.lo * w + b.lo] += top * (1.0 - b.frac);
                d[a.lo * w + b.hi] += top * b.frac;
                d[a.hi * w + b.lo] += bot * (1.0 - b.frac);
                d[a.hi * w + b.hi] += bot * b.frac;
            }
        }
    }
    dx
}
