//! Building blocks shared by both architectures. Activations are stored
//! channel-major with time innermost: `[channel][row][time]`.

pub(crate) const STD_FLOOR: f64 = 1e-8;
pub(crate) const NORM_FLOOR: f64 = 1e-12;

pub(crate) fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x <= 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not strictly positive.
pub(crate) fn relu_backward(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += a * s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Zero-padded copy of a `[cin][h][w]` tensor, shape `[cin][h+2][w+2]`.
pub(crate) fn pad1(input: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2, w + 2);
    let mut pad = vec![0.0; cin * hp * wp];
    for c in 0..cin {
        for y in 0..h {
            let dst = c * hp * wp + (y + 1) * wp + 1;
            pad[dst..dst + w].copy_from_slice(&input[(c * h + y) * w..(c * h + y + 1) * w]);
        }
    }
    pad
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

/// 3x3 same-padded convolution (cross-correlation). Returns pre-activations.
pub(crate) fn conv3x3_forward(pad: &[f64], s: ConvShape, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let (hp, wp) = (s.h + 2, s.w + 2);
    let mut out = vec![0.0; s.cout * s.h * s.w];
    for co in 0..s.cout {
        let o = &mut out[co * s.h * s.w..(co + 1) * s.h * s.w];
        o.fill(bias[co]);
        for ci in 0..s.cin {
            for dy in 0..3 {
                for dx in 0..3 {
                    let k = weights[((co * s.cin + ci) * 3 + dy) * 3 + dx];
                    for y in 0..s.h {
                        let src = ci * hp * wp + (y + dy) * wp + dx;
                        axpy(k, &pad[src..src + s.w], &mut o[y * s.w..(y + 1) * s.w]);
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv3x3_forward`] given the pre-activation gradient.
/// Returns the input gradient; weight and bias gradients are accumulated
/// into `dparams` when given.
pub(crate) fn conv3x3_backward(
    pad: &[f64],
    s: ConvShape,
    weights: &[f64],
    dpre: &[f64],
    dparams: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let (hp, wp) = (s.h + 2, s.w + 2);
    let mut dpad = vec![0.0; s.cin * hp * wp];
    let mut dparams = dparams;
    for co in 0..s.cout {
        let g = &dpre[co * s.h * s.w..(co + 1) * s.h * s.w];
        if let Some((_, db)) = dparams.as_mut() {
            db[co] += g.iter().sum::<f64>();
        }
        for ci in 0..s.cin {
            for dy in 0..3 {
                for dx in 0..3 {
                    let wi = ((co * s.cin + ci) * 3 + dy) * 3 + dx;
                    let k = weights[wi];
                    let mut acc = 0.0;
                    for y in 0..s.h {
                        let src = ci * hp * wp + (y + dy) * wp + dx;
                        let grow = &g[y * s.w..(y + 1) * s.w];
                        if dparams.is_some() {
                            acc += dot(grow, &pad[src..src + s.w]);
                        }
                        axpy(k, grow, &mut dpad[src..src + s.w]);
                    }
                    if let Some((dw, _)) = dparams.as_mut() {
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    let mut din = vec![0.0; s.cin * s.h * s.w];
    for c in 0..s.cin {
        for y in 0..s.h {
            let src = c * hp * wp + (y + 1) * wp + 1;
            din[(c * s.h + y) * s.w..(c * s.h + y + 1) * s.w].copy_from_slice(&dpad[src..src + s.w]);
        }
    }
    din
}

/// Position-wise dense layer on `[cin][t]` producing `[cout][t]` pre-activations.
pub(crate) fn dense_forward(input: &[f64], cin: usize, t: usize, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let mut out = vec![0.0; cout * t];
    for co in 0..cout {
        let o = &mut out[co * t..(co + 1) * t];
        o.fill(bias[co]);
        for ci in 0..cin {
            axpy(weights[co * cin + ci], &input[ci * t..(ci + 1) * t], o);
        }
    }
    out
}

pub(crate) fn dense_backward(
    input: &[f64],
    cin: usize,
    t: usize,
    weights: &[f64],
    dpre: &[f64],
    dparams: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let cout = dpre.len() / t;
    let mut din = vec![0.0; cin * t];
    let mut dparams = dparams;
    for co in 0..cout {
        let g = &dpre[co * t..(co + 1) * t];
        if let Some((dw, db)) = dparams.as_mut() {
            db[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                dw[co * cin + ci] += dot(g, &input[ci * t..(ci + 1) * t]);
            }
        }
        for ci in 0..cin {
            axpy(weights[co * cin + ci], g, &mut din[ci * t..(ci + 1) * t]);
        }
    }
    din
}

/// Mean and standard deviation over time of each row of a `[rows][t]` tensor,
/// concatenated as `[means..., stds...]`.
pub(crate) fn stats_pool(input: &[f64], rows: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * rows];
    let tf = t as f64;
    for r in 0..rows {
        let row = &input[r * t..(r + 1) * t];
        let mean = row.iter().sum::<f64>() / tf;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tf;
        out[r] = mean;
        out[rows + r] = var.sqrt().max(STD_FLOOR);
    }
    out
}

pub(crate) fn stats_pool_backward(input: &[f64], pooled: &[f64], rows: usize, t: usize, grad: &[f64]) -> Vec<f64> {
    let mut din = vec![0.0; rows * t];
    let tf = t as f64;
    for r in 0..rows {
        let (mean, std) = (pooled[r], pooled[rows + r]);
        let gm = grad[r] / tf;
        let gs = if std > STD_FLOOR {
            grad[rows + r] / (tf * std)
        } else {
            0.0
        };
        for (d, &v) in din[r * t..(r + 1) * t].iter_mut().zip(&input[r * t..(r + 1) * t]) {
            *d = gm + gs * (v - mean);
        }
    }
    din
}

/// `W p + b` for a row-major `W` of shape `out x in`.
pub(crate) fn affine(p: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + dot(&weights[o * p.len()..(o + 1) * p.len()], p))
        .collect()
}

pub(crate) fn affine_backward(
    p: &[f64],
    weights: &[f64],
    grad: &[f64],
    dparams: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let n = p.len();
    let mut dp = vec![0.0; n];
    for (o, &g) in grad.iter().enumerate() {
        axpy(g, &weights[o * n..(o + 1) * n], &mut dp);
    }
    if let Some((dw, db)) = dparams {
        for (o, &g) in grad.iter().enumerate() {
            db[o] += g;
            axpy(g, p, &mut dw[o * n..(o + 1) * n]);
        }
    }
    dp
}

pub(crate) fn l2_normalize(z: &[f64]) -> (Vec<f64>, f64) {
    let norm = dot(z, z).sqrt().max(NORM_FLOOR);
    (z.iter().map(|v| v / norm).collect(), norm)
}

/// Gradient through `e = z / |z|`.
pub(crate) fn l2_normalize_backward(e: &[f64], norm: f64, grad: &[f64]) -> Vec<f64> {
    let proj = dot(e, grad);
    e.iter().zip(grad).map(|(ei, gi)| (gi - ei * proj) / norm).collect()
}
