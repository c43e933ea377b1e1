//! Plain nested-loop reference implementations used as test oracles.

#![allow(dead_code)]

use pmt_tensor::{ParamId, ParamStore, Tensor, NORM_EPS};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn param(store: &ParamStore<f64>, id: ParamId) -> Mat {
    let t = store.value(id);
    if t.rank() == 1 {
        vec![t.data().to_vec()]
    } else {
        mat(t)
    }
}

pub fn vector(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn layer_norm(a: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
            r.iter()
                .enumerate()
                .map(|(j, x)| (x - mean) / (var + NORM_EPS).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn elu(a: &Mat) -> Mat {
    map(a, |x| if x > 0.0 { x } else { x.exp() - 1.0 })
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    map(a, |x| x * s)
}

/// `x W + b` with the bias broadcast over rows.
pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    matmul(x, w).into_iter().map(|r| r.iter().zip(b).map(|(v, c)| v + c).collect()).collect()
}

pub fn hcat(parts: &[Mat]) -> Mat {
    (0..parts[0].len()).map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &[f64]) -> f64 {
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    assert_eq!(flat.len(), b.len(), "oracle and tape sizes differ");
    flat.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Nested-loop spatial decomposition of `x[T,H,W,D]` with window `r`.
pub fn spatial_oracle(x: &[f64], [t, h, w, d]: [usize; 4], r: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; (h / r) * (w / r) * d];
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                for di in 0..d {
                    let v = x[((ti * h + hi) * w + wi) * d + di];
                    let o = &mut out[((hi / r) * (w / r) + wi / r) * d + di];
                    *o = o.max(v);
                }
            }
        }
    }
    out
}

/// Nested-loop temporal decomposition of `x[T,H,W,D]` with window `r`.
pub fn temporal_oracle(x: &[f64], [t, h, w, d]: [usize; 4], r: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; (t / r) * d];
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                for di in 0..d {
                    let v = x[((ti * h + hi) * w + wi) * d + di];
                    let o = &mut out[(ti / r) * d + di];
                    *o = o.max(v);
                }
            }
        }
    }
    out
}
