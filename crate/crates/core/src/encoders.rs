//! Video feature map `X` from frames and language features `G` from tokens.

use pmt_tensor::{ConvGeometry, Real, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{LanguageEncoderParams, LstmParams, VideoEncoderParams};

const BLOCK_STRIDES: [[usize; 3]; 3] = [[1, 2, 2], [1, 2, 2], [1, 1, 1]];

/// Token features `G[T_G × D]` and their row mean `G_bar[1 × D]`.
#[derive(Debug, Clone, Copy)]
pub struct LanguageFeature {
    pub g: Var,
    pub g_bar: Var,
}

/// Encode `frames[T × H_in × W_in × 3]` into `X[T × H × W × D]`.
pub fn encode_video<F: Real>(
    g: &mut Graph<F>,
    p: &VideoEncoderParams,
    cfg: &ModelConfig,
    frames: Var,
) -> Result<Var> {
    let shape = g.tape.shape(frames).to_vec();
    let expect = [cfg.frames, cfg.height, cfg.width, 3];
    if shape != expect {
        return Err(Error::Input(format!("clip shape {shape:?}, expected {expect:?}")));
    }
    let (t, h, w) = cfg.grid();
    let mut x = g.tape.permute(frames, &[3, 0, 1, 2])?;
    let mut extents = [cfg.frames, cfg.height, cfg.width];
    for (block, stride) in p.blocks.iter().zip(BLOCK_STRIDES) {
        let geom = ConvGeometry {
            kernel: [3, 3, 3],
            stride,
            pad: [1, 1, 1],
        };
        extents = geom.output_extents(extents)?;
        let cols = g.tape.im2col3d(x, geom)?;
        let wv = g.p(block.w);
        let bv = g.p(block.b);
        let y = g.tape.matmul(wv, cols)?;
        let y = g.tape.add_row_bias(y, bv)?;
        let y = g.tape.elu(y);
        let c = g.tape.shape(y)[0];
        x = g.tape.reshape(y, &[c, extents[0], extents[1], extents[2]])?;
    }
    debug_assert_eq!(extents, [t, h, w]);
    let c = g.tape.shape(x)[0];
    let flat = g.tape.reshape(x, &[c, t * h * w])?;
    let pw = g.p(p.proj.w);
    let pb = g.p(p.proj.b);
    let y = g.tape.matmul(pw, flat)?;
    let y = g.tape.add_row_bias(y, pb)?;
    let y = g.tape.transpose(y)?;
    let y = g.tape.reshape(y, &[t, h, w, cfg.d_model])?;
    let pos = g.p(p.pos);
    Ok(g.tape.add(y, pos)?)
}

/// Embedding rows for `ids`, then a linear map to width `D`.
pub fn embed_tokens<F: Real>(
    g: &mut Graph<F>,
    p: &LanguageEncoderParams,
    cfg: &ModelConfig,
    ids: &[usize],
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let table = g.p(p.embedding);
    let rows = g.tape.gather_rows(table, ids)?;
    g.linear(rows, &p.proj)
}

/// Run one direction of the gated recurrence; hidden states in token order.
fn lstm_direction<F: Real>(g: &mut Graph<F>, p: &LstmParams, xs: Var, hidden: usize, reverse: bool) -> Result<Var> {
    let steps = g.tape.shape(xs)[0];
    let w_ih = g.p(p.w_ih);
    let w_hh = g.p(p.w_hh);
    let b = g.p(p.b);
    let pre = g.tape.matmul(xs, w_ih)?;
    let pre = g.tape.add_bias(pre, b)?;
    let mut h = g.tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = g.tape.constant(Tensor::zeros(&[1, hidden]));
    let mut states = vec![h; steps];
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let xt = g.tape.slice(pre, 0, t, 1)?;
        let rec = g.tape.matmul(h, w_hh)?;
        let gates = g.tape.add(xt, rec)?;
        let i = g.tape.slice(gates, 1, 0, hidden)?;
        let f = g.tape.slice(gates, 1, hidden, hidden)?;
        let cand = g.tape.slice(gates, 1, 2 * hidden, hidden)?;
        let o = g.tape.slice(gates, 1, 3 * hidden, hidden)?;
        let i = g.tape.sigmoid(i);
        let f = g.tape.sigmoid(f);
        let cand = g.tape.tanh(cand);
        let o = g.tape.sigmoid(o);
        let keep = g.tape.mul(f, c)?;
        let write = g.tape.mul(i, cand)?;
        c = g.tape.add(keep, write)?;
        let tc = g.tape.tanh(c);
        h = g.tape.mul(o, tc)?;
        states[t] = h;
    }
    Ok(g.tape.concat(&states, 0)?)
}

/// Bidirectional recurrence over `embeddings[T_G × D]`; forward and backward
/// hidden states (width `D/2` each) are concatenated per token.
pub fn encode_language<F: Real>(
    g: &mut Graph<F>,
    p: &LanguageEncoderParams,
    cfg: &ModelConfig,
    embeddings: Var,
) -> Result<LanguageFeature> {
    if cfg.d_model % 2 != 0 {
        return Err(Error::Config(format!("d_model {} must be even", cfg.d_model)));
    }
    let hidden = cfg.d_model / 2;
    let fwd = lstm_direction(g, &p.forward, embeddings, hidden, false)?;
    let bwd = lstm_direction(g, &p.backward, embeddings, hidden, true)?;
    let gv = g.tape.concat(&[fwd, bwd], 1)?;
    let mean = g.tape.mean_rows(gv)?;
    let g_bar = g.tape.reshape(mean, &[1, cfg.d_model])?;
    Ok(LanguageFeature { g: gv, g_bar })
}
