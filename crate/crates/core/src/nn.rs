//! Layers shared by the encoders, projectors and language model.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Session, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn from N(0, gain²/in_dim), zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = gain / (in_dim as f64).sqrt();
        let w = store.add_normal(format!("{name}.w"), vec![in_dim, out_dim], std, rng)?;
        let b = if bias {
            Some(store.add_filled(format!("{name}.b"), vec![out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let y = s.graph.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_filled(format!("{name}.gamma"), vec![dim], 1.0)?,
            beta: store.add_filled(format!("{name}.beta"), vec![dim], 0.0)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.graph.layernorm(x, g, b)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))` with
/// a GELU MLP of width `4·dim`.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
    heads: usize,
    causal: bool,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        residual_gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let lin = |store: &mut ParamStore, n: &str, i, o, gain, rng: &mut _| {
            Linear::new(store, &format!("{name}.{n}"), i, o, true, gain, rng)
        };
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            wq: lin(store, "attn.wq", dim, dim, 1.0, rng)?,
            wk: lin(store, "attn.wk", dim, dim, 1.0, rng)?,
            wv: lin(store, "attn.wv", dim, dim, 1.0, rng)?,
            wo: lin(store, "attn.wo", dim, dim, residual_gain, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: lin(store, "mlp.fc1", dim, 4 * dim, 1.0, rng)?,
            fc2: lin(store, "mlp.fc2", 4 * dim, dim, residual_gain, rng)?,
            dim,
            heads,
            causal,
        })
    }

    /// `x` is `[batch, len, dim]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], self.dim);
        let (h, dh) = (self.heads, self.dim / self.heads);

        let n1 = self.ln1.forward(s, x)?;
        let split = |s: &mut Session, lin: &Linear, n1| -> Result<Var> {
            let y = lin.forward(s, n1)?;
            let y = s.graph.reshape(y, vec![b, t, h, dh])?;
            let y = s.graph.permute(y, &[0, 2, 1, 3])?;
            s.graph.reshape(y, vec![b * h, t, dh])
        };
        let q = split(s, &self.wq, n1)?;
        let k = split(s, &self.wk, n1)?;
        let v = split(s, &self.wv, n1)?;
        let kt = s.graph.transpose(k)?;
        let scores = s.graph.matmul(q, kt)?;
        let scores = s.graph.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        let attn = if self.causal {
            s.graph.softmax_causal(scores)?
        } else {
            s.graph.softmax(scores)
        };
        let ctx = s.graph.matmul(attn, v)?;
        let ctx = s.graph.reshape(ctx, vec![b, h, t, dh])?;
        let ctx = s.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.graph.reshape(ctx, vec![b, t, d])?;
        let out = self.wo.forward(s, ctx)?;
        let x = s.graph.add(x, out)?;

        let n2 = self.ln2.forward(s, x)?;
        let hid = self.fc1.forward(s, n2)?;
        let hid = s.graph.gelu(hid);
        let out = self.fc2.forward(s, hid)?;
        s.graph.add(x, out)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, 1.0, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, 1.0, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.graph.gelu(h);
        self.fc2.forward(s, h)
    }
}
