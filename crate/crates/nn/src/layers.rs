//! Parameterised building blocks shared by the extractors and sizers.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{Builder, ParamId};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn new(b: &mut Builder, name: &str, n_in: usize, n_out: usize, bias: bool) -> Self {
        Self {
            w: b.glorot(&format!("{name}/w"), &[n_in, n_out], n_in, n_out),
            b: bias.then(|| b.zeros(&format!("{name}/b"), &[n_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Same-size convolution with causal time padding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv {
    pub k: ParamId,
    pub b: ParamId,
    pub left: usize,
}

impl Conv {
    /// `kh` spans time, `kw` spans assets; asset padding is symmetric.
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, kh: usize, kw: usize) -> Self {
        let field = kh * kw;
        Self {
            k: b.glorot(&format!("{name}/k"), &[c_out, c_in, kh, kw], c_in * field, c_out * field),
            b: b.zeros(&format!("{name}/b"), &[c_out]),
            left: (kw - 1) / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let k = g.param(self.k);
        let b = g.param(self.b);
        g.conv2d(x, k, b, self.left)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, n: usize) -> Self {
        Self {
            gamma: b.fill(&format!("{name}/gamma"), &[n], 1.0),
            beta: b.zeros(&format!("{name}/beta"), &[n]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let ga = g.param(self.gamma);
        let be = g.param(self.beta);
        g.layer_norm(x, ga, be)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    /// Forget-gate bias starts at 1.
    pub fn new(b: &mut Builder, name: &str, n_in: usize, hidden: usize) -> Self {
        let wx = b.glorot(&format!("{name}/wx"), &[n_in, 4 * hidden], n_in, 4 * hidden);
        let wh = b.glorot(&format!("{name}/wh"), &[hidden, 4 * hidden], hidden, 4 * hidden);
        let bias = b.zeros(&format!("{name}/b"), &[4 * hidden]);
        b.params.get_mut(bias).as_slice_mut().unwrap()[hidden..2 * hidden].fill(1.0);
        Self { wx, wh, b: bias, hidden }
    }

    /// `x` is `[B, T, D]`; initial states are `[B, H]` (zeros when absent).
    pub fn forward(&self, g: &mut Graph, x: Var, state: Option<(Var, Var)>) -> Var {
        let (h0, c0) = state.unwrap_or_else(|| {
            let bsz = g.shape(x)[0];
            let z = g.constant(crate::graph::Tensor::zeros(ndarray::IxDyn(&[bsz, self.hidden])));
            (z, z)
        });
        let wx = g.param(self.wx);
        let wh = g.param(self.wh);
        let b = g.param(self.b);
        g.lstm(x, wx, wh, b, h0, c0)
    }
}

/// `σ(W₄x + b₄) ⊙ (W₅x + b₅)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Glu {
    pub gate: Dense,
    pub value: Dense,
}

impl Glu {
    pub fn new(b: &mut Builder, name: &str, n_in: usize, n_out: usize) -> Self {
        Self {
            gate: Dense::new(b, &format!("{name}/gate"), n_in, n_out, true),
            value: Dense::new(b, &format!("{name}/value"), n_in, n_out, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let a = self.gate.forward(g, x);
        let a = g.sigmoid(a);
        let v = self.value.forward(g, x);
        g.mul(a, v)
    }
}

/// `LayerNorm(skip + GLU(dropout(x)))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateAddNorm {
    pub glu: Glu,
    pub norm: LayerNorm,
}

impl GateAddNorm {
    pub fn new(b: &mut Builder, name: &str, n_in: usize, n_out: usize) -> Self {
        Self {
            glu: Glu::new(b, &format!("{name}/glu"), n_in, n_out),
            norm: LayerNorm::new(b, &format!("{name}/norm"), n_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, skip: Var, dropout: f64) -> Var {
        let x = g.dropout(x, dropout);
        let y = self.glu.forward(g, x);
        let y = g.add(skip, y);
        self.norm.forward(g, y)
    }
}

/// Gated residual network with optional static context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grn {
    pub skip: Option<Dense>,
    pub hidden: Dense,
    pub context: Option<Dense>,
    pub inner: Dense,
    pub out: GateAddNorm,
}

impl Grn {
    pub fn new(b: &mut Builder, name: &str, n_in: usize, n_hidden: usize, n_out: usize, context: Option<usize>) -> Self {
        Self {
            skip: (n_in != n_out).then(|| Dense::new(b, &format!("{name}/skip"), n_in, n_out, true)),
            hidden: Dense::new(b, &format!("{name}/w2"), n_in, n_hidden, true),
            context: context.map(|c| Dense::new(b, &format!("{name}/w3"), c, n_hidden, false)),
            inner: Dense::new(b, &format!("{name}/w1"), n_hidden, n_hidden, true),
            out: GateAddNorm::new(b, &format!("{name}/gate"), n_hidden, n_out),
        }
    }

    /// `ctx` must broadcast against the hidden projection of `x`.
    pub fn forward(&self, g: &mut Graph, x: Var, ctx: Option<Var>, dropout: f64) -> Var {
        let skip = match &self.skip {
            Some(d) => d.forward(g, x),
            None => x,
        };
        let mut h = self.hidden.forward(g, x);
        if let (Some(w3), Some(c)) = (&self.context, ctx) {
            let c = w3.forward(g, c);
            h = g.add(h, c);
        }
        let h = g.elu(h);
        let h = self.inner.forward(g, h);
        self.out.forward(g, h, skip, dropout)
    }
}
