//! Top-down context fusion and the language-guided readout.

use pmt_tensor::{Real, Var};

use crate::bottom_up::StreamPair;
use crate::config::{ModelConfig, TopDown};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{ContextualParams, Linear};
use pmt_tensor::ParamId;

#[derive(Debug, Clone, Copy)]
pub struct CmbOutput {
    pub out: Var,
    /// `softmax(f(other) f(same)ᵀ)`, `[N_o × N_a]`.
    pub w1: Var,
    /// `softmax(f(target) f(other)ᵀ)`, `[N_t × N_o]`.
    pub w2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Readout {
    /// `[1 × D]`.
    pub o: Var,
    /// Weights over spatial positions, `[1 × N_s]`.
    pub eta: Var,
    /// Weights over temporal positions, `[1 × N_m]`.
    pub gamma: Var,
    /// `(alpha, beta)` as a length-2 vector.
    pub mix: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    pub s_hat: Var,
    pub m_hat: Var,
    pub readout: Readout,
}

#[derive(Debug, Clone)]
pub struct PyramidOutputs {
    /// Index `l - 1` holds level `l`.
    pub levels: Vec<LevelOutput>,
    /// Every attention matrix built by the fusion steps.
    pub attention: Vec<Var>,
}

fn rows<F: Real>(g: &mut Graph<F>, v: Var) -> Result<Var> {
    let shape = g.tape.shape(v);
    let d = *shape.last().ok_or_else(|| Error::Input("rank-0 stream".into()))?;
    let n = shape.iter().product::<usize>() / d;
    Ok(g.tape.reshape(v, &[n, d])?)
}

fn activated<F: Real>(g: &mut Graph<F>, x: Var, f: &Linear) -> Result<Var> {
    let y = g.linear(x, f)?;
    Ok(g.tape.elu(y))
}

/// Contextual matching: route `same` through `other` and add the result to
/// `target`. All inputs are `[N × D]` row matrices.
pub fn cmb<F: Real>(g: &mut Graph<F>, target: Var, same: Var, other: Var, f: &Linear) -> Result<CmbOutput> {
    let fo = activated(g, other, f)?;
    let fs = activated(g, same, f)?;
    let ft = activated(g, target, f)?;
    let fs_t = g.tape.transpose(fs)?;
    let s1 = g.tape.matmul(fo, fs_t)?;
    let w1 = g.tape.softmax(s1)?;
    let bridge = g.tape.matmul(w1, same)?;
    let fo_t = g.tape.transpose(fo)?;
    let s2 = g.tape.matmul(ft, fo_t)?;
    let w2 = g.tape.softmax(s2)?;
    let ctx = g.tape.matmul(w2, bridge)?;
    let out = g.tape.add(target, ctx)?;
    Ok(CmbOutput { out, w1, w2 })
}

/// Single-head attention from `target` straight to `same`.
pub fn direct_attention<F: Real>(g: &mut Graph<F>, target: Var, same: Var, f: &Linear) -> Result<(Var, Var)> {
    let ft = activated(g, target, f)?;
    let fs = activated(g, same, f)?;
    let fs_t = g.tape.transpose(fs)?;
    let s = g.tape.matmul(ft, fs_t)?;
    let w = g.tape.softmax(s)?;
    let ctx = g.tape.matmul(w, same)?;
    Ok((g.tape.add(target, ctx)?, w))
}

/// `target + nearest-upsample(above)`, both in grid layout.
pub fn upsample_add<F: Real>(g: &mut Graph<F>, target: Var, above: Var) -> Result<Var> {
    let ts = g.tape.shape(target).to_vec();
    let us = g.tape.shape(above).to_vec();
    if ts.len() != us.len() || ts.iter().zip(&us).any(|(t, u)| t % u != 0) {
        return Err(Error::Tensor(pmt_tensor::TensorError::ShapeMismatch {
            op: "upsample_add",
            lhs: ts,
            rhs: us,
        }));
    }
    let factors: Vec<usize> = ts.iter().zip(&us).map(|(t, u)| t / u).collect();
    let up = g.tape.upsample_nearest(above, &factors)?;
    Ok(g.tape.add(target, up)?)
}

/// Language-weighted pooling of both streams mixed by `softmax(mix)`.
pub fn readout<F: Real>(g: &mut Graph<F>, s_hat: Var, m_hat: Var, g_bar: Var, mix: ParamId) -> Result<Readout> {
    let pool = |g: &mut Graph<F>, x: Var| -> Result<(Var, Var)> {
        let xt = g.tape.transpose(x)?;
        let scores = g.tape.matmul(g_bar, xt)?;
        let w = g.tape.softmax(scores)?;
        Ok((g.tape.matmul(w, x)?, w))
    };
    let (s_term, eta) = pool(g, s_hat)?;
    let (m_term, gamma) = pool(g, m_hat)?;
    let logits = g.p(mix);
    let w = g.tape.softmax(logits)?;
    let alpha = g.tape.slice(w, 0, 0, 1)?;
    let beta = g.tape.slice(w, 0, 1, 1)?;
    let a = g.tape.mul_scalar(s_term, alpha)?;
    let b = g.tape.mul_scalar(m_term, beta)?;
    let o = g.tape.add(a, b)?;
    Ok(Readout { o, eta, gamma, mix: w })
}

fn context_map(maps: &[Option<Linear>], idx: usize) -> Result<Linear> {
    maps.get(idx)
        .copied()
        .flatten()
        .ok_or_else(|| Error::Config(format!("no context map for level {}", idx + 1)))
}

/// Contextual streams and readouts for every level, fused from the top.
pub fn run_top_down<F: Real>(
    g: &mut Graph<F>,
    bottom: &[StreamPair],
    g_bar: Var,
    ctx: &ContextualParams,
    cfg: &ModelConfig,
) -> Result<PyramidOutputs> {
    let levels = bottom.len();
    if levels == 0 || levels != ctx.mix.len() {
        return Err(Error::Input(format!(
            "top-down pathway got {levels} levels for {} readouts",
            ctx.mix.len()
        )));
    }
    let mut hats: Vec<StreamPair> = bottom.to_vec();
    let mut attention = Vec::new();
    for i in (0..levels - 1).rev() {
        let cur = bottom[i];
        let above = hats[i + 1];
        let (s_hat, m_hat) = match cfg.topdown {
            TopDown::None => (cur.s, cur.m),
            TopDown::Upsample => (upsample_add(g, cur.s, above.s)?, upsample_add(g, cur.m, above.m)?),
            TopDown::Cmb | TopDown::Attention => {
                let fs = context_map(&ctx.f_spatial, i)?;
                let fm = context_map(&ctx.f_temporal, i)?;
                let s_rows = rows(g, cur.s)?;
                let s_above = rows(g, above.s)?;
                let (s_out, m_out) = if cfg.topdown == TopDown::Cmb {
                    let s = cmb(g, s_rows, s_above, above.m, &fs)?;
                    let m = cmb(g, cur.m, above.m, s_above, &fm)?;
                    attention.extend([s.w1, s.w2, m.w1, m.w2]);
                    (s.out, m.out)
                } else {
                    let (s, ws) = direct_attention(g, s_rows, s_above, &fs)?;
                    let (m, wm) = direct_attention(g, cur.m, above.m, &fm)?;
                    attention.extend([ws, wm]);
                    (s, m)
                };
                let shape = g.tape.shape(cur.s).to_vec();
                (g.tape.reshape(s_out, &shape)?, m_out)
            }
        };
        hats[i] = StreamPair { s: s_hat, m: m_hat };
    }
    let mut out = Vec::with_capacity(levels);
    for (i, hat) in hats.iter().enumerate() {
        let s_rows = rows(g, hat.s)?;
        let r = readout(g, s_rows, hat.m, g_bar, ctx.mix[i])?;
        out.push(LevelOutput {
            s_hat: hat.s,
            m_hat: hat.m,
            readout: r,
        });
    }
    Ok(PyramidOutputs { levels: out, attention })
}
