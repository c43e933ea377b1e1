//! Spatial/temporal decomposition, residual merging and the multimodal
//! transformer block, stacked over the pyramid levels.

use pmt_tensor::{Real, Tape, Var};

use crate::config::ModelConfig;
use crate::encoders::LanguageFeature;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{BlockParams, HeadParams, StreamParams};

/// Spatial stream `S[h × w × D]` and temporal stream `M[t × D]` of one level.
#[derive(Debug, Clone, Copy)]
pub struct StreamPair {
    pub s: Var,
    pub m: Var,
}

fn feature_map(tape: &Tape<impl Real>, x: Var) -> Result<[usize; 4]> {
    tape.shape(x)
        .try_into()
        .map_err(|_| Error::Tensor(pmt_tensor::TensorError::Dimension {
            op: "decompose",
            detail: format!("expected [T, H, W, D], got {:?}", tape.shape(x)),
        }))
}

/// Max over all frames and each `window × window` spatial patch.
pub fn decompose_spatial<F: Real>(tape: &mut Tape<F>, x: Var, window: usize) -> Result<Var> {
    let [t, h, w, d] = feature_map(tape, x)?;
    let pooled = tape.max_pool_windows(x, &[t, window, window, 1])?;
    Ok(tape.reshape(pooled, &[h / window, w / window, d])?)
}

/// Max over the whole frame and each length-`window` run of frames.
pub fn decompose_temporal<F: Real>(tape: &mut Tape<F>, x: Var, window: usize) -> Result<Var> {
    let [t, h, w, d] = feature_map(tape, x)?;
    let pooled = tape.max_pool_windows(x, &[window, h, w, 1])?;
    Ok(tape.reshape(pooled, &[t / window, d])?)
}

/// `raw + pool(prev)`, with a non-overlapping max-pool of `window` over every
/// axis but the channel axis bringing `prev` to the shape of `raw`.
pub fn residual_merge<F: Real>(tape: &mut Tape<F>, raw: Var, prev: Var, window: usize) -> Result<Var> {
    let rank = tape.shape(prev).len();
    let pooled = if window > 1 {
        let mut windows = vec![window; rank];
        windows[rank - 1] = 1;
        tape.max_pool_windows(prev, &windows)?
    } else {
        prev
    };
    Ok(tape.add(raw, pooled)?)
}

/// One attention head. Queries come from the normalized visual rows, keys
/// and values from the normalized language rows; returns the head output
/// `[N × D/heads]` and the attention matrix `[N × T_G]`.
pub fn mca_head<F: Real>(
    g: &mut Graph<F>,
    stream_ln: Var,
    lang_ln: Var,
    head: &HeadParams,
    divisor: f64,
) -> Result<(Var, Var)> {
    let wq = g.p(head.w_q);
    let wk = g.p(head.w_k);
    let wv = g.p(head.w_v);
    let q = g.tape.matmul(stream_ln, wq)?;
    let k = g.tape.matmul(lang_ln, wk)?;
    let v = g.tape.matmul(lang_ln, wv)?;
    let kt = g.tape.transpose(k)?;
    let scores = g.tape.matmul(q, kt)?;
    let scores = g.tape.scale(scores, F::lit(1.0 / divisor));
    let attn = g.tape.softmax(scores)?;
    let out = g.tape.matmul(attn, v)?;
    Ok((out, attn))
}

/// Cross-modal attention with residual mixing, then a residual feed-forward
/// stage. `stream` is any `[..., D]` tensor; it is flattened to rows for the
/// block and restored on return.
pub fn transformer_block<F: Real>(
    g: &mut Graph<F>,
    stream: Var,
    lang: Var,
    block: &BlockParams,
    sp: &StreamParams,
    divisor: f64,
) -> Result<Var> {
    let shape = g.tape.shape(stream).to_vec();
    let d = *shape.last().ok_or_else(|| Error::Input("rank-0 stream".into()))?;
    let n = shape.iter().product::<usize>() / d;
    let rows = g.tape.reshape(stream, &[n, d])?;

    let s_ln = g.layer_norm(rows, sp.ln_attn.gain, sp.ln_attn.bias)?;
    let l_ln = g.layer_norm(lang, block.ln_lang.gain, block.ln_lang.bias)?;
    let mut heads = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        heads.push(mca_head(g, s_ln, l_ln, head, divisor)?.0);
    }
    let cat = g.tape.concat(&heads, 1)?;
    let mixer = g.p(sp.mixer);
    let mixed = g.tape.matmul(cat, mixer)?;
    let attended = g.tape.add(mixed, rows)?;

    let f_ln = g.layer_norm(attended, sp.ln_ffn.gain, sp.ln_ffn.bias)?;
    let hdn = g.linear(f_ln, &sp.ffn_in)?;
    let hdn = g.tape.elu(hdn);
    let f = g.linear(hdn, &sp.ffn_out)?;
    let f = g.tape.elu(f);
    let out = g.tape.add(f, attended)?;
    Ok(g.tape.reshape(out, &shape)?)
}

/// Interacted stream pairs for levels `1..=L`.
pub fn run_bottom_up<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    lang: &LanguageFeature,
    blocks: &[BlockParams],
    cfg: &ModelConfig,
) -> Result<Vec<StreamPair>> {
    let divisor = cfg.attention_divisor();
    let mut out: Vec<StreamPair> = Vec::with_capacity(cfg.levels);
    for (l, block) in (1..=cfg.levels).zip(blocks) {
        let r = cfg.window(l);
        let mut s = decompose_spatial(&mut g.tape, x, r)?;
        let mut m = decompose_temporal(&mut g.tape, x, r)?;
        if let Some(prev) = out.last() {
            let step = if cfg.no_decomposition { 1 } else { 2 };
            s = residual_merge(&mut g.tape, s, prev.s, step)?;
            m = residual_merge(&mut g.tape, m, prev.m, step)?;
        }
        let s = transformer_block(g, s, lang.g, block, &block.spatial, divisor)?;
        let m = transformer_block(g, m, lang.g, block, &block.temporal, divisor)?;
        out.push(StreamPair { s, m });
    }
    Ok(out)
}
