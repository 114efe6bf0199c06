//! Transformer building blocks expressed on the autograd tape.

use crate::autograd::{Tape, Var};
use crate::error::{config_err, contract_err, Result};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: store.add(&format!("{name}.w"), in_dim, out_dim, Init::XavierUniform),
            b: Some(store.add(&format!("{name}.b"), 1, out_dim, Init::Zeros)),
            in_dim,
            out_dim,
        }
    }

    /// A projection without an additive bias. Used for attention keys, where a
    /// bias shifts every logit of a query row equally and so never matters.
    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: store.add(&format!("{name}.w"), in_dim, out_dim, Init::XavierUniform),
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).fill(0.0);
        if let Some(b) = self.b {
            store.get_mut(b).fill(0.0);
        }
    }

    /// Sets the weight to the identity (square layers only) and the bias to zero.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let w = store.get_mut(self.w);
        assert_eq!(w.nrows(), w.ncols(), "identity needs a square layer");
        w.fill(0.0);
        w.diag_mut().fill(1.0);
        if let Some(b) = self.b {
            store.get_mut(b).fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), 1, dim, Init::Ones),
            beta: store.add(&format!("{name}.beta"), 1, dim, Init::Zeros),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention on already-projected `q`, `k`, `v`.
///
/// Each head sees a contiguous slice of `dim / heads` channels and scales its
/// logits by `1/sqrt(dim / heads)`. `bias` is added to every head's logits
/// (e.g. a causal mask). Returns the concatenated head outputs and the
/// per-head nodes, whose probabilities [`Tape::attention_probs`] exposes.
pub fn multi_head_attention(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let (_, dq) = t.shape(q);
    let (nk, dk) = t.shape(k);
    let (nv, dv) = t.shape(v);
    if dq != dk || dk != dv {
        return Err(config_err!(
            "attention widths differ: q {dq}, k {dk}, v {dv}"
        ));
    }
    if nk == 0 || nk != nv {
        return Err(config_err!(
            "attention needs matching nonempty keys/values, got {nk} keys and {nv} values"
        ));
    }
    if heads == 0 || dq % heads != 0 {
        return Err(config_err!("width {dq} is not divisible by {heads} heads"));
    }
    let dh = dq / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                t.slice_cols(q, h * dh, dh),
                t.slice_cols(k, h * dh, dh),
                t.slice_cols(v, h * dh, dh),
            )
        };
        let o = t.attention(qh, kh, vh, scale, bias);
        outs.push(o);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        t.concat_cols(&outs)
    };
    Ok((out, outs))
}

/// Attention with learned projections. Queries come from the `dim`-wide
/// sequence, keys and values from a `ctx_dim`-wide context.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("width {dim} is not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim),
            k: Linear::without_bias(store, &format!("{name}.k"), ctx_dim, dim),
            v: Linear::new(store, &format!("{name}.v"), ctx_dim, dim),
            o: Linear::new(store, &format!("{name}.o"), dim, dim),
            heads,
        })
    }

    pub fn ctx_dim(&self) -> usize {
        self.k.in_dim
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        x: Var,
        ctx: Var,
        bias: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        if t.shape(ctx).1 != self.ctx_dim() {
            return Err(config_err!(
                "context width {} does not match attention context width {}",
                t.shape(ctx).1,
                self.ctx_dim()
            ));
        }
        if t.shape(x).1 != self.q.in_dim {
            return Err(config_err!(
                "query width {} does not match attention width {}",
                t.shape(x).1,
                self.q.in_dim
            ));
        }
        let q = self.q.forward(t, x);
        let k = self.k.forward(t, ctx);
        let v = self.v.forward(t, ctx);
        let (mixed, probs) = multi_head_attention(t, q, k, v, self.heads, bias)?;
        Ok((self.o.forward(t, mixed), probs))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * MLP_RATIO),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * MLP_RATIO, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.fc1.forward(t, x);
        let h = t.gelu(h);
        self.fc2.forward(t, h)
    }
}

/// Pre-norm encoder layer: self-attention then feed-forward, each residual.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim),
        })
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let h = self.ln1.forward(t, x);
        let (a, probs) = self.attn.forward(t, h, h, None)?;
        let x = t.add(x, a);
        let h = self.ln2.forward(t, x);
        let f = self.ffn.forward(t, h);
        Ok((t.add(x, f), probs))
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.attn.o.zero(store);
        self.ffn.fc2.zero(store);
    }
}

/// Decoder layer: self-attention, cross-attention into an external context,
/// feed-forward. Pre-norm on the query stream, residual around each part.
#[derive(Clone, Debug)]
pub struct SaCaFfnBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl SaCaFfnBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, ctx_dim, heads)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim),
        })
    }

    pub fn ctx_dim(&self) -> usize {
        self.cross_attn.ctx_dim()
    }

    /// `self_bias` is added to the self-attention logits (causal masking).
    pub fn forward(
        &self,
        t: &mut Tape,
        x: Var,
        context: Var,
        self_bias: Option<Var>,
    ) -> Result<Var> {
        if t.shape(context).1 != self.ctx_dim() {
            return Err(config_err!(
                "context width {} does not match block context width {}",
                t.shape(context).1,
                self.ctx_dim()
            ));
        }
        if t.shape(context).0 == 0 {
            return Err(contract_err!("empty cross-attention context"));
        }
        let h = self.ln1.forward(t, x);
        let (a, _) = self.self_attn.forward(t, h, h, self_bias)?;
        let x = t.add(x, a);
        let h = self.ln2.forward(t, x);
        let (c, _) = self.cross_attn.forward(t, h, context, None)?;
        let x = t.add(x, c);
        let h = self.ln3.forward(t, x);
        let f = self.ffn.forward(t, h);
        Ok(t.add(x, f))
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.self_attn.o.zero(store);
        self.cross_attn.o.zero(store);
        self.ffn.fc2.zero(store);
    }
}
