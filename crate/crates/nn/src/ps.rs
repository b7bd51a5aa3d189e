//! Position sizers: map reduced features `[B, T, N_A]` to weights in [−1, 1].

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::layers::{Dense, GateAddNorm, Grn, Lstm};
use crate::params::{Builder, ParamId};

pub const TFT_HEADS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsKind {
    Lstm,
    Tft,
}

impl PsKind {
    pub fn label(self) -> &'static str {
        match self {
            PsKind::Lstm => "LSTM",
            PsKind::Tft => "TFT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsConfig {
    pub kind: PsKind,
    pub hidden_layer_size: usize,
    pub dropout_rate: f64,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
}

fn default_heads() -> usize {
    TFT_HEADS
}

impl PsConfig {
    pub fn lstm(hidden_layer_size: usize, dropout_rate: f64) -> Self {
        Self {
            kind: PsKind::Lstm,
            hidden_layer_size,
            dropout_rate,
            n_heads: TFT_HEADS,
        }
    }

    pub fn tft(hidden_layer_size: usize, dropout_rate: f64) -> Self {
        Self {
            kind: PsKind::Tft,
            ..Self::lstm(hidden_layer_size, dropout_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layer_size == 0 {
            return Err(NnError::Config("hidden_layer_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if self.kind == PsKind::Tft && (self.n_heads == 0 || self.hidden_layer_size % self.n_heads != 0) {
            return Err(NnError::Config("hidden_layer_size must be a multiple of n_heads".into()));
        }
        Ok(())
    }
}

/// Attention behaviour of the TFT sizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Learned,
    /// Every row attends only to itself.
    Identity,
}

#[derive(Debug, Clone, Copy)]
pub struct PsOutput {
    /// `[B, T, N_A]`.
    pub weights: Var,
    /// Mean-over-heads attention `[B, T, T]` (TFT).
    pub attention: Option<Var>,
    /// Input selection weights over {features, date} `[B, T, 2]` (TFT).
    pub vsn: Option<Var>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmPs {
    pub lstm: Lstm,
    pub out: Dense,
    pub dropout: f64,
}

impl LstmPs {
    fn new(b: &mut Builder, n_assets: usize, c: &PsConfig) -> Self {
        Self {
            lstm: Lstm::new(b, "ps/lstm", n_assets, c.hidden_layer_size),
            out: Dense::new(b, "ps/out", c.hidden_layer_size, n_assets, true),
            dropout: c.dropout_rate,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let x = g.dropout(x, self.dropout);
        let h = self.lstm.forward(g, x, None);
        let y = self.out.forward(g, h);
        g.tanh(y)
    }
}

/// Interpretable multi-head attention: per-head queries and keys, one shared
/// value projection, heads averaged before the output projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpretableAttention {
    pub heads: usize,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
}

impl InterpretableAttention {
    fn new(b: &mut Builder, hidden: usize, heads: usize) -> Self {
        let d = hidden / heads;
        Self {
            heads,
            q: Dense::new(b, "ps/attn/q", hidden, heads * d, true),
            k: Dense::new(b, "ps/attn/k", hidden, heads * d, true),
            v: Dense::new(b, "ps/attn/v", hidden, d, true),
            o: Dense::new(b, "ps/attn/o", d, hidden, true),
        }
    }

    /// Returns (output `[B, T, H]`, mean attention `[B, T, T]`).
    pub fn forward(&self, g: &mut Graph, x: Var, mode: AttentionMode) -> (Var, Var) {
        let s = g.shape(x);
        let (bsz, t) = (s[0], s[1]);
        let h = self.heads;
        let v = self.v.forward(g, x);
        let d = g.shape(v)[2];
        let (mixed, mean_p) = match mode {
            AttentionMode::Identity => {
                let eye = Array2::<f64>::eye(t).into_shape_with_order((1, t, t)).unwrap();
                let eye = Tensor::from_shape_fn(IxDyn(&[bsz, t, t]), |i| eye[[0, i[1], i[2]]]);
                let p = g.constant(eye);
                (g.bmm(p, v, false), p)
            }
            AttentionMode::Learned => {
                let split = |g: &mut Graph, y: Var| {
                    let y = g.reshape(y, &[bsz, t, h, d]);
                    let y = g.permute(y, &[0, 2, 1, 3]);
                    g.reshape(y, &[bsz * h, t, d])
                };
                let q = self.q.forward(g, x);
                let q = split(g, q);
                let k = self.k.forward(g, x);
                let k = split(g, k);
                let scores = g.bmm(q, k, true);
                let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
                let p = g.softmax(scores, true);
                let p4 = g.reshape(p, &[bsz, h, t, t]);
                let mean_p = g.mean_axis(p4, 1);
                let mean_p = g.reshape(mean_p, &[bsz, t, t]);
                // Averaging heads before the shared value projection is exact.
                (g.bmm(mean_p, v, false), mean_p)
            }
        };
        (self.o.forward(g, mixed), mean_p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TftPs {
    pub hidden: usize,
    pub dropout: f64,
    pub n_static: usize,
    /// Static context lookup tables `[n_static, H]`: selection, enrichment,
    /// initial hidden state, initial cell state.
    pub static_selection: ParamId,
    pub static_enrichment: ParamId,
    pub static_h: ParamId,
    pub static_c: ParamId,
    pub feature_proj: Dense,
    pub date_proj: Dense,
    pub feature_grn: Grn,
    pub date_grn: Grn,
    pub selection_grn: Grn,
    pub lstm: Lstm,
    pub lstm_gate: GateAddNorm,
    pub enrichment: Grn,
    pub attention: InterpretableAttention,
    pub attention_gate: GateAddNorm,
    pub decoder: Grn,
    pub final_gate: GateAddNorm,
    pub out: Dense,
}

impl TftPs {
    fn new(b: &mut Builder, n_assets: usize, n_date: usize, n_static: usize, c: &PsConfig) -> Self {
        let h = c.hidden_layer_size;
        let table = |b: &mut Builder, n: &str| b.glorot(&format!("ps/static/{n}"), &[n_static, h], n_static, h);
        Self {
            hidden: h,
            dropout: c.dropout_rate,
            n_static,
            static_selection: table(b, "selection"),
            static_enrichment: table(b, "enrichment"),
            static_h: table(b, "h"),
            static_c: table(b, "c"),
            feature_proj: Dense::new(b, "ps/vsn/feature_proj", n_assets, h, true),
            date_proj: Dense::new(b, "ps/vsn/date_proj", n_date, h, true),
            feature_grn: Grn::new(b, "ps/vsn/feature_grn", h, h, h, None),
            date_grn: Grn::new(b, "ps/vsn/date_grn", h, h, h, None),
            selection_grn: Grn::new(b, "ps/vsn/selection", n_assets + n_date, h, 2, Some(h)),
            lstm: Lstm::new(b, "ps/lstm", h, h),
            lstm_gate: GateAddNorm::new(b, "ps/lstm_gate", h, h),
            enrichment: Grn::new(b, "ps/enrichment", h, h, h, Some(h)),
            attention: InterpretableAttention::new(b, h, c.n_heads),
            attention_gate: GateAddNorm::new(b, "ps/attn_gate", h, h),
            decoder: Grn::new(b, "ps/decoder", h, h, h, None),
            final_gate: GateAddNorm::new(b, "ps/final_gate", h, h),
            out: Dense::new(b, "ps/out", h, n_assets, true),
        }
    }

    fn lookup(&self, g: &mut Graph, table: ParamId, ids: &[usize]) -> Var {
        let onehot = Tensor::from_shape_fn(IxDyn(&[ids.len(), self.n_static]), |i| (ids[i[0]] == i[1]) as u8 as f64);
        let oh = g.constant(onehot);
        let t = g.param(table);
        g.linear(oh, t, None)
    }

    /// Input selection: returns (selected `[B, T, H]`, weights `[B, T, 2]`).
    pub fn select_inputs(&self, g: &mut Graph, x: Var, dates: Var, ids: &[usize]) -> Var2 {
        let bsz = ids.len();
        let cs = self.lookup(g, self.static_selection, ids);
        let cs = g.reshape(cs, &[bsz, 1, self.hidden]);
        let xf = self.feature_proj.forward(g, x);
        let xf = self.feature_grn.forward(g, xf, None, self.dropout);
        let xd = self.date_proj.forward(g, dates);
        let xd = self.date_grn.forward(g, xd, None, self.dropout);
        let flat = g.concat(&[x, dates], 2);
        let logits = self.selection_grn.forward(g, flat, Some(cs), self.dropout);
        let v = g.softmax(logits, false);
        let vf = g.narrow(v, 2, 0, 1);
        let vd = g.narrow(v, 2, 1, 1);
        let a = g.mul(xf, vf);
        let b = g.mul(xd, vd);
        (g.add(a, b), v)
    }

    /// Temporal processing up to the attention input: returns (φ, θ).
    pub fn encode(&self, g: &mut Graph, selected: Var, ids: &[usize]) -> Var2 {
        let bsz = ids.len();
        let h0 = self.lookup(g, self.static_h, ids);
        let c0 = self.lookup(g, self.static_c, ids);
        let inp = g.dropout(selected, self.dropout);
        let lstm_out = self.lstm.forward(g, inp, Some((h0, c0)));
        let phi = self.lstm_gate.forward(g, lstm_out, selected, self.dropout);
        let ce = self.lookup(g, self.static_enrichment, ids);
        let ce = g.reshape(ce, &[bsz, 1, self.hidden]);
        let theta = self.enrichment.forward(g, phi, Some(ce), self.dropout);
        (phi, theta)
    }

    /// Everything after attention: weights `[B, T, N_A]`.
    pub fn decode(&self, g: &mut Graph, attended: Var, phi: Var, theta: Var) -> Var {
        let delta = self.attention_gate.forward(g, attended, theta, self.dropout);
        let psi = self.decoder.forward(g, delta, None, self.dropout);
        let y = self.final_gate.forward(g, psi, phi, self.dropout);
        let y = self.out.forward(g, y);
        g.tanh(y)
    }

    fn forward(&self, g: &mut Graph, x: Var, dates: Var, ids: &[usize], mode: AttentionMode) -> PsOutput {
        let (selected, v) = self.select_inputs(g, x, dates, ids);
        let (phi, theta) = self.encode(g, selected, ids);
        let (attended, p) = self.attention.forward(g, theta, mode);
        PsOutput {
            weights: self.decode(g, attended, phi, theta),
            attention: Some(p),
            vsn: Some(v),
        }
    }
}

pub type Var2 = (Var, Var);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PositionSizer {
    Lstm(LstmPs),
    Tft(TftPs),
}

impl PositionSizer {
    pub fn new(b: &mut Builder, config: &PsConfig, n_assets: usize, n_date: usize, n_static: usize) -> Result<Self> {
        config.validate()?;
        if n_static == 0 {
            return Err(NnError::Config("at least one static context id is required".into()));
        }
        Ok(match config.kind {
            PsKind::Lstm => PositionSizer::Lstm(LstmPs::new(b, n_assets, config)),
            PsKind::Tft => PositionSizer::Tft(TftPs::new(b, n_assets, n_date, n_static, config)),
        })
    }

    /// `x` is `[B, T, N_A]`, `dates` is `[B, T, n_date]`, one static id per batch row.
    pub fn forward(&self, g: &mut Graph, x: Var, dates: Var, ids: &[usize], mode: AttentionMode) -> Result<PsOutput> {
        match self {
            PositionSizer::Lstm(m) => Ok(PsOutput {
                weights: m.forward(g, x),
                attention: None,
                vsn: None,
            }),
            PositionSizer::Tft(m) => {
                if let Some(&bad) = ids.iter().find(|&&i| i >= m.n_static) {
                    return Err(NnError::Config(format!("static context id {bad} out of range")));
                }
                Ok(m.forward(g, x, dates, ids, mode))
            }
        }
    }
}
