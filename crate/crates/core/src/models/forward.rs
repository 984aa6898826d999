use super::params::{LayerSlots, Layout};
use super::{Arch, ModelConfig, ModelError};
use crate::tensorcore::{GemmQuant, Tape, TensorError, Var};

const RMS_EPS: f64 = 1e-6;

/// Tolerance of the nGPT unit-norm hidden-state check.
pub const HIDDEN_NORM_TOL: f64 = 1e-6;

/// Tape handles produced by one forward pass.
pub(crate) struct Built {
    pub logits: Var,
    /// `(layer, gemm name, input, weight)` for every quantizable GEMM.
    pub gemms: Vec<(usize, &'static str, Var, Var)>,
    /// Residual stream after each block.
    pub hidden: Vec<Var>,
}

pub(crate) fn check_tokens(cfg: &ModelConfig, ids: &[usize], seq: usize) -> Result<(), ModelError> {
    if seq == 0 || seq > cfg.seq_len || ids.is_empty() || ids.len() % seq != 0 {
        return Err(ModelError::Sequence {
            len: ids.len(),
            seq,
            max: cfg.seq_len,
        });
    }
    if let Some((index, &token)) = ids.iter().enumerate().find(|(_, &t)| t >= cfg.vocab_size) {
        return Err(ModelError::Token {
            index,
            token,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

struct Ctx<'a> {
    cfg: &'a ModelConfig,
    quant: Option<GemmQuant>,
    step: u64,
    gemm_id: u64,
    gemms: Vec<(usize, &'static str, Var, Var)>,
}

impl Ctx<'_> {
    fn linear(
        &mut self,
        t: &mut Tape,
        layer: usize,
        name: &'static str,
        x: Var,
        w: Var,
    ) -> Result<Var, TensorError> {
        let key = (self.step << 16) | self.gemm_id;
        self.gemm_id += 1;
        let q = self.quant.as_ref().map(|q| q.reseeded(key));
        self.gemms.push((layer, name, x, w));
        t.linear(x, w, q.as_ref())
    }
}

/// Record the forward pass of `ids` (a batch of `ids.len() / seq`
/// sequences) onto `t`. `vars` are the parameter handles in layout order.
pub(crate) fn build(
    t: &mut Tape,
    cfg: &ModelConfig,
    lay: &Layout,
    vars: &[Var],
    ids: &[usize],
    seq: usize,
    step: u64,
) -> Result<Built, ModelError> {
    check_tokens(cfg, ids, seq)?;
    let mut cx = Ctx {
        cfg,
        quant: cfg
            .quant
            .as_ref()
            .map(|q| GemmQuant::new(q, cfg.quantize_backward)),
        step,
        gemm_id: 0,
        gemms: Vec::new(),
    };
    let top = |e| ModelError::at(None, e);
    let x = t.embedding(vars[lay.emb], ids).map_err(top)?;
    let mut h = match cfg.arch {
        Arch::Gpt => x,
        Arch::Ngpt => t.row_normalize(x).map_err(top)?,
    };
    let mut hidden = Vec::with_capacity(lay.layers.len());
    for (l, slots) in lay.layers.iter().enumerate() {
        h = match cfg.arch {
            Arch::Gpt => gpt_block(t, &mut cx, l, slots, vars, h, seq),
            Arch::Ngpt => ngpt_block(t, &mut cx, l, slots, vars, h, seq),
        }
        .map_err(|e| ModelError::at(Some(l), e))?;
        if cfg.arch == Arch::Ngpt {
            check_unit_rows(t, h, l)?;
        }
        hidden.push(h);
    }
    let logits = match cfg.arch {
        Arch::Gpt => {
            let g = lay.final_gain.expect("gpt layout has a final gain");
            let n = t.rms_norm(h, RMS_EPS).map_err(top)?;
            let n = t.mul_row(n, vars[g]).map_err(top)?;
            t.linear(n, vars[lay.head], None).map_err(top)?
        }
        Arch::Ngpt => {
            let sz = lay.s_z.expect("ngpt layout has s_z");
            let z = t.linear(h, vars[lay.head], None).map_err(top)?;
            let s = t
                .scale(vars[sz], (cfg.d_model as f64).sqrt())
                .map_err(top)?;
            t.mul_row(z, s).map_err(top)?
        }
    };
    Ok(Built {
        logits,
        gemms: cx.gemms,
        hidden,
    })
}

fn check_unit_rows(t: &Tape, h: Var, layer: usize) -> Result<(), ModelError> {
    let v = t.value(h);
    for (position, row) in v.data().chunks(v.cols()).enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > HIDDEN_NORM_TOL {
            return Err(ModelError::Invariant(format!(
                "hidden state at layer {layer}, position {position} has norm {n}"
            )));
        }
    }
    Ok(())
}

fn attention_core(
    t: &mut Tape,
    cx: &mut Ctx,
    l: usize,
    s: &LayerSlots,
    vars: &[Var],
    x: Var,
) -> Result<(Var, Var, Var), TensorError> {
    let q = cx.linear(t, l, "wq", x, vars[s.wq])?;
    let k = cx.linear(t, l, "wk", x, vars[s.wk])?;
    let v = cx.linear(t, l, "wv", x, vars[s.wv])?;
    Ok((q, k, v))
}

fn gpt_block(
    t: &mut Tape,
    cx: &mut Ctx,
    l: usize,
    s: &LayerSlots,
    vars: &[Var],
    h: Var,
    seq: usize,
) -> Result<Var, TensorError> {
    let (heads, dh) = (cx.cfg.n_heads, cx.cfg.head_dim);
    let a = t.rms_norm(h, RMS_EPS)?;
    let a = t.mul_row(a, vars[s.attn_mix])?;
    let (q, k, v) = attention_core(t, cx, l, s, vars, a)?;
    let o = t.causal_attention(q, k, v, seq, heads, 1.0 / (dh as f64).sqrt())?;
    let o = cx.linear(t, l, "wo", o, vars[s.wo])?;
    let h = t.add(h, o)?;

    let m = t.rms_norm(h, RMS_EPS)?;
    let m = t.mul_row(m, vars[s.mlp_mix])?;
    let u = cx.linear(t, l, "w_u", m, vars[s.w_u])?;
    let nu = cx.linear(t, l, "w_v", m, vars[s.w_v])?;
    let g = t.silu(nu)?;
    let p = t.mul(u, g)?;
    let d = cx.linear(t, l, "w_down", p, vars[s.w_down])?;
    t.add(h, d)
}

/// `Norm(h + |alpha| * (x - h))` with `x` already unit-norm.
fn slerp_step(t: &mut Tape, h: Var, x: Var, alpha: Var, factor: f64) -> Result<Var, TensorError> {
    let a = t.scale(alpha, factor)?;
    let a = t.abs(a)?;
    let diff = t.sub(x, h)?;
    let step = t.mul_row(diff, a)?;
    let h = t.add(h, step)?;
    t.row_normalize(h)
}

fn ngpt_block(
    t: &mut Tape,
    cx: &mut Ctx,
    l: usize,
    s: &LayerSlots,
    vars: &[Var],
    h: Var,
    seq: usize,
) -> Result<Var, TensorError> {
    let cfg = cx.cfg;
    let (heads, dh) = (cfg.n_heads, cfg.head_dim);
    let sd = (cfg.d_model as f64).sqrt();
    let alpha_factor = super::params::ALPHA_INIT * sd;

    let (q, k, v) = attention_core(t, cx, l, s, vars, h)?;
    let sqk = t.scale(vars[s.s_qk.expect("ngpt slot")], sd)?;
    let q = t.normalize(q, dh)?;
    let q = t.mul_row(q, sqk)?;
    let k = t.normalize(k, dh)?;
    let k = t.mul_row(k, sqk)?;
    let o = t.causal_attention(q, k, v, seq, heads, (dh as f64).sqrt())?;
    let o = t.row_normalize(o)?;
    let o = cx.linear(t, l, "wo", o, vars[s.wo])?;
    let h_a = t.row_normalize(o)?;
    let h = slerp_step(t, h, h_a, vars[s.attn_mix], alpha_factor)?;

    let u = cx.linear(t, l, "w_u", h, vars[s.w_u])?;
    let u = t.mul_row(u, vars[s.s_u.expect("ngpt slot")])?;
    let nu = cx.linear(t, l, "w_v", h, vars[s.w_v])?;
    let sv = t.scale(vars[s.s_v.expect("ngpt slot")], sd)?;
    let nu = t.mul_row(nu, sv)?;
    let g = t.silu(nu)?;
    let p = t.mul(u, g)?;
    let p = t.row_normalize(p)?;
    let d = cx.linear(t, l, "w_down", p, vars[s.w_down])?;
    let h_m = t.row_normalize(d)?;
    slerp_step(t, h, h_m, vars[s.mlp_mix], alpha_factor)
}
