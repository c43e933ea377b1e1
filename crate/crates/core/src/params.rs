//! Parameter layout of the full model and its initialization.

use pmt_tensor::rng::{seeded, xavier_uniform};
use pmt_tensor::{ParamId, ParamStore, Real, Rng, Tensor};

use crate::config::{ModelConfig, TopDown};

/// Affine layer over row matrices: `w[in × out]`, `b[out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Convolution as a matrix over unfolded columns: `w[out × in·27]`, `b[out]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct VideoEncoderParams {
    pub blocks: [Conv; 3],
    /// 1×1×1 projection to the model width: `w[D × C]`, `b[D]`.
    pub proj: Conv,
    /// `T × H × W × D` positional table.
    pub pos: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    /// Gates stacked as `[input, forget, cell, output]` along the columns.
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct LanguageEncoderParams {
    pub embedding: ParamId,
    pub proj: Linear,
    pub forward: LstmParams,
    pub backward: LstmParams,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct StreamParams {
    pub ln_attn: Norm,
    /// Head-concatenation mixer `D × D`, no bias.
    pub mixer: ParamId,
    pub ln_ffn: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// One pyramid level: attention shared by both streams, per-stream mixing.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln_lang: Norm,
    pub heads: Vec<HeadParams>,
    pub spatial: StreamParams,
    pub temporal: StreamParams,
}

#[derive(Debug, Clone)]
pub struct ContextualParams {
    /// Activated affine map per level below the top, spatial stream.
    pub f_spatial: Vec<Option<Linear>>,
    pub f_temporal: Vec<Option<Linear>>,
    /// Two readout logits per level; softmax gives `(alpha, beta)`.
    pub mix: Vec<ParamId>,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderParams {
    pub hidden: Linear,
    pub bn: Norm,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct PmtParams {
    pub video: VideoEncoderParams,
    pub language: LanguageEncoderParams,
    pub blocks: Vec<BlockParams>,
    pub context: ContextualParams,
    pub decoders: Vec<DecoderParams>,
}

struct Builder<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    rng: Rng,
}

impl<F: Real> Builder<'_, F> {
    fn xavier(&mut self, name: String, group: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let t = xavier_uniform(&mut self.rng, shape, fan_in, fan_out);
        self.store.add(name, group, t)
    }

    fn zeros(&mut self, name: String, group: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, group, Tensor::zeros(shape))
    }

    fn linear(&mut self, name: &str, group: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.xavier(format!("{name}.w"), group, &[fan_in, fan_out], fan_in, fan_out),
            b: self.zeros(format!("{name}.b"), group, &[fan_out]),
        }
    }

    fn conv(&mut self, name: &str, group: &str, fan_out: usize, fan_in: usize) -> Conv {
        Conv {
            w: self.xavier(format!("{name}.w"), group, &[fan_out, fan_in], fan_in, fan_out),
            b: self.zeros(format!("{name}.b"), group, &[fan_out]),
        }
    }

    fn norm(&mut self, name: &str, group: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.gain"), group, Tensor::ones(&[d])),
            bias: self.zeros(format!("{name}.bias"), group, &[d]),
        }
    }

    fn lstm(&mut self, name: &str, group: &str, d_in: usize, hidden: usize) -> LstmParams {
        LstmParams {
            w_ih: self.xavier(format!("{name}.w_ih"), group, &[d_in, 4 * hidden], d_in, 4 * hidden),
            w_hh: self.xavier(format!("{name}.w_hh"), group, &[hidden, 4 * hidden], hidden, 4 * hidden),
            b: self.zeros(format!("{name}.b"), group, &[4 * hidden]),
        }
    }

    fn stream(&mut self, name: &str, group: &str, d: usize) -> StreamParams {
        StreamParams {
            ln_attn: self.norm(&format!("{name}.ln_attn"), group, d),
            mixer: self.xavier(format!("{name}.mixer"), group, &[d, d], d, d),
            ln_ffn: self.norm(&format!("{name}.ln_ffn"), group, d),
            ffn_in: self.linear(&format!("{name}.ffn_in"), group, d, 4 * d),
            ffn_out: self.linear(&format!("{name}.ffn_out"), group, 4 * d, d),
        }
    }
}

/// Parameter group names, used by the gradient-check report.
pub const GROUP_VIDEO: &str = "video_encoder";
pub const GROUP_LANGUAGE: &str = "language_encoder";

pub fn group_block(level: usize) -> String {
    format!("bottom_up.l{level}")
}

pub fn group_context(level: usize) -> String {
    format!("top_down.l{level}")
}

pub fn group_decoder(level: usize) -> String {
    format!("decoder.l{level}")
}

impl PmtParams {
    /// Register every tensor in `store`, Xavier-uniform weights, zero biases
    /// and unit normalization gains, drawn from `seed`.
    pub fn init<F: Real>(cfg: &ModelConfig, store: &mut ParamStore<F>, seed: u64) -> PmtParams {
        let mut b = Builder { store, rng: seeded(seed) };
        let d = cfg.d_model;
        let (t, h, w) = cfg.grid();

        let gv = GROUP_VIDEO;
        let mut c_in = 3;
        let mut blocks = Vec::with_capacity(3);
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            blocks.push(b.conv(&format!("video.conv{i}"), gv, c_out, c_in * 27));
            c_in = c_out;
        }
        let video = VideoEncoderParams {
            blocks: [blocks[0], blocks[1], blocks[2]],
            proj: b.conv("video.proj", gv, d, c_in),
            pos: b.zeros("video.pos".into(), gv, &[t, h, w, d]),
        };

        let gl = GROUP_LANGUAGE;
        let hidden = d / 2;
        let language = LanguageEncoderParams {
            embedding: b.xavier("lang.embedding".into(), gl, &[cfg.vocab_size, d], cfg.vocab_size, d),
            proj: b.linear("lang.proj", gl, d, d),
            forward: b.lstm("lang.lstm_fwd", gl, d, hidden),
            backward: b.lstm("lang.lstm_bwd", gl, d, hidden),
        };

        let dh = d / cfg.heads;
        let blocks = (1..=cfg.levels)
            .map(|l| {
                let g = group_block(l);
                let heads = (0..cfg.heads)
                    .map(|k| HeadParams {
                        w_q: b.xavier(format!("block{l}.head{k}.w_q"), &g, &[d, dh], d, dh),
                        w_k: b.xavier(format!("block{l}.head{k}.w_k"), &g, &[d, dh], d, dh),
                        w_v: b.xavier(format!("block{l}.head{k}.w_v"), &g, &[d, dh], d, dh),
                    })
                    .collect();
                BlockParams {
                    ln_lang: b.norm(&format!("block{l}.ln_lang"), &g, d),
                    heads,
                    spatial: b.stream(&format!("block{l}.spatial"), &g, d),
                    temporal: b.stream(&format!("block{l}.temporal"), &g, d),
                }
            })
            .collect();

        let uses_f = matches!(cfg.topdown, TopDown::Cmb | TopDown::Attention);
        let mut f_spatial = Vec::new();
        let mut f_temporal = Vec::new();
        let mut mix = Vec::new();
        for l in 1..=cfg.levels {
            let g = group_context(l);
            let below_top = l < cfg.levels && uses_f;
            f_spatial.push(below_top.then(|| b.linear(&format!("context{l}.f_spatial"), &g, d, d)));
            f_temporal.push(below_top.then(|| b.linear(&format!("context{l}.f_temporal"), &g, d, d)));
            mix.push(b.zeros(format!("context{l}.mix"), &g, &[2]));
        }
        let context = ContextualParams {
            f_spatial,
            f_temporal,
            mix,
        };

        let out = cfg.output_width();
        let decoders = (1..=cfg.levels)
            .map(|l| {
                let g = group_decoder(l);
                let name = format!("decoder{l}");
                DecoderParams {
                    hidden: b.linear(&format!("{name}.hidden"), &g, d, d),
                    bn: b.norm(&format!("{name}.bn"), &g, d),
                    running_mean: b.store.add_buffer(format!("{name}.running_mean"), &g, Tensor::zeros(&[d])),
                    running_var: b.store.add_buffer(format!("{name}.running_var"), &g, Tensor::ones(&[d])),
                    out: b.linear(&format!("{name}.out"), &g, d, out),
                }
            })
            .collect();

        PmtParams {
            video,
            language,
            blocks,
            context,
            decoders,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;

    #[test]
    fn init_is_deterministic_and_grouped() {
        let cfg = ModelConfig::tiny(Task::OpenEnded);
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        PmtParams::init(&cfg, &mut a, 7);
        PmtParams::init(&cfg, &mut b, 7);
        assert_eq!(a, b);
        let groups = a.groups();
        for g in ["video_encoder", "language_encoder", "bottom_up.l1", "bottom_up.l2", "top_down.l1", "decoder.l2"] {
            assert!(groups.iter().any(|x| x == g), "missing group {g}");
        }
        let rm = a.find("decoder1.running_mean").unwrap();
        assert!(!a.get(rm).trainable);
    }

    #[test]
    fn xavier_bounds_hold() {
        let cfg = ModelConfig::default();
        let mut s = ParamStore::<f32>::new();
        let p = PmtParams::init(&cfg, &mut s, 1);
        let w = s.value(p.blocks[0].spatial.mixer);
        let bound = (6.0f32 / 128.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(s.value(p.decoders[0].hidden.b).data().iter().all(|&v| v == 0.0));
    }
}
