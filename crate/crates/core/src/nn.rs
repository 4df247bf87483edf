//! Layer building blocks. Each layer owns only [`ParamId`]s; values live in
//! the [`ParamStore`](crate::ParamStore) and are read through a [`Graph`].

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::build(pb, name, in_dim, out_dim, true)
    }

    pub fn no_bias(pb: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::build(pb, name, in_dim, out_dim, false)
    }

    fn build(pb: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut s = pb.scope(name);
        let w = s.glorot("w", &[in_dim, out_dim], in_dim, out_dim)?;
        let b = if bias {
            Some(s.constant("b", &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Convolution over the time axis with weights `[k×C_in×C_out]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub pad_left: usize,
}

impl Conv1d {
    /// Centred, length-preserving convolution; the kernel must be odd.
    pub fn same(pb: &mut ParamBuilder<'_>, name: &str, kernel: usize, c_in: usize, c_out: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(alloc::format!(
                "same-padded convolution needs an odd kernel, got {kernel}"
            )));
        }
        Self::padded(pb, name, kernel, c_in, c_out, kernel / 2)
    }

    /// Length-preserving convolution with an explicit left padding
    /// (`kernel / 2` for the even kernels of a convolution bank).
    pub fn padded(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        pad_left: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let w = s.glorot("w", &[kernel, c_in, c_out], kernel * c_in, kernel * c_out)?;
        let b = s.constant("b", &[c_out], 0.0)?;
        Ok(Self { w, b, kernel, pad_left })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv1d(x, w, b, self.pad_left)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            gamma: s.constant("gamma", &[dim], 1.0)?,
            beta: s.constant("beta", &[dim], 0.0)?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Gated recurrent unit with reset/update gates, PyTorch gate layout `(r, z, n)`.
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            w_ih: s.glorot("w_ih", &[input_dim, 3 * hidden], input_dim, 3 * hidden)?,
            w_hh: s.glorot("w_hh", &[hidden, 3 * hidden], hidden, 3 * hidden)?,
            b_ih: s.constant("b_ih", &[3 * hidden], 0.0)?,
            b_hh: s.constant("b_hh", &[3 * hidden], 0.0)?,
            input_dim,
            hidden,
        })
    }

    /// `x · W_ih + b_ih` for every row at once.
    pub fn project_inputs(&self, g: &mut Graph<'_>, xs: Var) -> Result<Var> {
        let w = g.param(self.w_ih);
        let b = g.param(self.b_ih);
        let p = g.matmul(xs, w)?;
        g.add_row(p, b)
    }

    /// One recurrence given the projected input row `[1×3H]` and state `[1×H]`.
    pub fn step(&self, g: &mut Graph<'_>, x_proj: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let w_hh = g.param(self.w_hh);
        let b_hh = g.param(self.b_hh);
        let hp = g.matmul(h, w_hh)?;
        let hp = g.add_row(hp, b_hh)?;
        let both = g.add(x_proj, hp)?;
        let rz = g.slice_cols(both, 0, 2 * hd)?;
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, hd)?;
        let z = g.slice_cols(rz, hd, hd)?;
        let xn = g.slice_cols(x_proj, 2 * hd, hd)?;
        let hn = g.slice_cols(hp, 2 * hd, hd)?;
        let rhn = g.mul(r, hn)?;
        let n = g.add(xn, rhn)?;
        let n = g.tanh(n);
        // h' = (1 - z)·n + z·h = n + z·(h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    /// Runs over all rows of `xs [T×in]` from a zero state; returns `[T×H]`
    /// in input order even when `reverse` is set.
    pub fn run(&self, g: &mut Graph<'_>, xs: Var, reverse: bool) -> Result<Var> {
        let t = g.dims(xs).0;
        let proj = self.project_inputs(g, xs)?;
        let mut h = g.zeros(&[1, self.hidden]);
        let mut outs = Vec::with_capacity(t);
        let order: Vec<usize> = if reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for i in order {
            let xr = g.row(proj, i)?;
            h = self.step(g, xr, h)?;
            outs.push(h);
        }
        if reverse {
            outs.reverse();
        }
        g.concat_rows(&outs)
    }
}

/// Forward and backward GRUs with concatenated outputs `[T×2H]`.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            fwd: Gru::new(&mut s, "fwd", input_dim, hidden)?,
            bwd: Gru::new(&mut s, "bwd", input_dim, hidden)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, xs: Var) -> Result<Var> {
        let f = self.fwd.run(g, xs, false)?;
        let b = self.bwd.run(g, xs, true)?;
        g.concat_cols(&[f, b])
    }
}

/// LSTM cell, gate layout `(i, f, g, o)`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            w_ih: s.glorot("w_ih", &[input_dim, 4 * hidden], input_dim, 4 * hidden)?,
            w_hh: s.glorot("w_hh", &[hidden, 4 * hidden], hidden, 4 * hidden)?,
            b: s.constant("b", &[4 * hidden], 0.0)?,
            hidden,
        })
    }

    /// Returns the new `(h, c)`.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b = g.param(self.b);
        let xi = g.matmul(x, w_ih)?;
        let hh = g.matmul(h, w_hh)?;
        let pre = g.add(xi, hh)?;
        let pre = g.add_row(pre, b)?;
        let if_pre = g.slice_cols(pre, 0, 2 * hd)?;
        let if_gate = g.sigmoid(if_pre);
        let i = g.slice_cols(if_gate, 0, hd)?;
        let f = g.slice_cols(if_gate, hd, hd)?;
        let gg = g.slice_cols(pre, 2 * hd, hd)?;
        let gg = g.tanh(gg);
        let o = g.slice_cols(pre, 3 * hd, hd)?;
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, gg)?;
        let c2 = g.add(fc, ig)?;
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }
}

/// Scaled dot-product attention split over `heads` column groups of
/// already-projected `q [Tq×d]`, `k`, `v [Tk×d]`. Returns the concatenated
/// head outputs `[Tq×d]` and each head's attention matrix `[Tq×Tk]`.
pub fn multi_head_attend(g: &mut Graph<'_>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let d = g.dims(q).1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(alloc::format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let (o, p) = attend_head(g, qh, kh, vh, scale)?;
        outs.push(o);
        probs.push(p);
    }
    Ok((g.concat_cols(&outs)?, probs))
}

/// `softmax(q·kᵀ·scale)·v` for one head; returns `(output, weights)`.
pub fn attend_head(g: &mut Graph<'_>, q: Var, k: Var, v: Var, scale: f64) -> Result<(Var, Var)> {
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, scale);
    let p = g.softmax_rows(s)?;
    Ok((g.matmul(p, v)?, p))
}

/// Self-attention with bias-carrying Q/K/V/O projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(alloc::format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        let mut s = pb.scope(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", dim, dim)?,
            k: Linear::new(&mut s, "k", dim, dim)?,
            v: Linear::new(&mut s, "v", dim, dim)?,
            o: Linear::new(&mut s, "o", dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let (cat, _) = multi_head_attend(g, q, k, v, self.heads)?;
        self.o.forward(g, cat)
    }
}

/// `y = relu(H·x)·T + x·(1 - T)` with `T = sigmoid(T·x)`.
#[derive(Debug, Clone)]
pub struct Highway {
    pub h: Linear,
    pub t: Linear,
}

impl Highway {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            h: Linear::new(&mut s, "h", dim, dim)?,
            t: Linear::new(&mut s, "t", dim, dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.h.forward(g, x)?;
        let h = g.relu(h);
        let t = self.t.forward(g, x)?;
        let t = g.sigmoid(t);
        // x + T·(H - x)
        let d = g.sub(h, x)?;
        let td = g.mul(t, d)?;
        g.add(x, td)
    }
}

/// Linear → ReLU → dropout.
#[derive(Debug, Clone)]
pub struct Prenet {
    pub proj: Linear,
    pub dropout: f64,
}

impl Prenet {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(pb, name, in_dim, out_dim)?,
            dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.proj.forward(g, x)?;
        let y = g.relu(y);
        Ok(g.dropout(y, self.dropout))
    }
}
