use latpfn_autodiff::{Graph, Real, Result, Var};

use super::params::{Bound, Group, Init, ParamId};

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool, group: Group) -> Self {
        let w = init.normal(
            format!("{name}.w"),
            &[fan_in, fan_out],
            (1.0 / fan_in as f64).sqrt(),
            group,
        );
        let b = bias.then(|| init.zeros(format!("{name}.b"), &[fan_out], group));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.get(self.w), self.b.map(|b| p.get(b)))
    }
}

/// Two-layer feedforward with GELU.
#[derive(Clone, Debug)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init, name: &str, d: usize, hidden: usize, group: Group) -> Self {
        Self {
            up: Linear::new(init, &format!("{name}.up"), d, hidden, true, group),
            down: Linear::new(init, &format!("{name}.down"), hidden, d, true, group),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

/// Multi-head attention from `xq [B, Lq, d]` onto `xkv [B, Lk, d]`.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize, group: Group) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), d, d, false, group),
            k: Linear::new(init, &format!("{name}.k"), d, d, false, group),
            v: Linear::new(init, &format!("{name}.v"), d, d, false, group),
            o: Linear::new(init, &format!("{name}.o"), d, d, true, group),
            heads,
        }
    }

    fn split<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        let x = g.reshape(x, &[b, l, self.heads, d / self.heads])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, xq: Var, xkv: Var) -> Result<Var> {
        let s = g.shape(xq).to_vec();
        let q = self.q.forward(g, p, xq)?;
        let k = self.k.forward(g, p, xkv)?;
        let v = self.v.forward(g, p, xkv)?;
        let (q, k, v) = (self.split(g, q)?, self.split(g, k)?, self.split(g, v)?);
        let a = g.scaled_dot_attention(q, k, v, None)?;
        let a = g.permute(a, &[0, 2, 1, 3])?;
        let a = g.reshape(a, &s)?;
        self.o.forward(g, p, a)
    }
}

/// Self-attention in which every token may only attend to itself. The
/// softmax over a single admissible key is exactly 1, so the block reduces to
/// the value and output projections; query and key projections would never
/// influence the result and are not allocated.
#[derive(Clone, Debug)]
pub(crate) struct DiagonalSelfAttention {
    pub v: Linear,
    pub o: Linear,
}

impl DiagonalSelfAttention {
    pub fn new(init: &mut Init, name: &str, d: usize, group: Group) -> Self {
        Self {
            v: Linear::new(init, &format!("{name}.v"), d, d, false, group),
            o: Linear::new(init, &format!("{name}.o"), d, d, true, group),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let v = self.v.forward(g, p, x)?;
        self.o.forward(g, p, v)
    }
}

pub(crate) fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, eps: f64) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    g.layer_norm(x, axis, T::c(eps))
}
