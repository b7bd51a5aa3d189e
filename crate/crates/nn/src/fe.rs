//! Feature extractors: map `X` (`[B, T, N_A]`) to a reduced feature series of
//! the same shape. Internally tensors are `[B, C, T, N_A]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, Dense};
use crate::params::{Builder, ParamId};

/// FlexCIM filter footprint: CS spans 5 assets, TS spans 10 days.
pub const FLEX_CS_WIDTH: usize = 5;
pub const FLEX_TS_LENGTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum FeConfig {
    OrigCim { n_filters: usize, ts_filter_length: usize },
    FlexCim { n_filters: usize, n_filter_layers: usize },
    DeepLob { n_filters: usize },
    AxialLob { n_filters: usize, n_axial_heads: usize },
}

impl FeConfig {
    pub fn n_filters(&self) -> usize {
        match *self {
            FeConfig::OrigCim { n_filters, .. }
            | FeConfig::FlexCim { n_filters, .. }
            | FeConfig::DeepLob { n_filters }
            | FeConfig::AxialLob { n_filters, .. } => n_filters,
        }
    }

    /// Number of feature types `N_T` entering dimensionality reduction.
    pub fn n_types(&self) -> usize {
        match *self {
            FeConfig::OrigCim { .. } => 4,
            FeConfig::FlexCim { n_filter_layers, .. } => 3 * n_filter_layers + 1,
            FeConfig::DeepLob { .. } => 4,
            FeConfig::AxialLob { .. } => 3,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FeConfig::OrigCim { .. } => "OrigCIM",
            FeConfig::FlexCim { .. } => "FlexCIM",
            FeConfig::DeepLob { .. } => "DeepLOB",
            FeConfig::AxialLob { .. } => "AxialLOB",
        }
    }

    pub fn feature_type_labels(&self) -> Vec<String> {
        match *self {
            FeConfig::OrigCim { .. } => ["cs", "ts", "combined", "passthrough"].map(String::from).to_vec(),
            FeConfig::FlexCim { n_filter_layers, .. } => {
                let mut v = vec!["passthrough".to_string()];
                for l in 1..=n_filter_layers {
                    v.extend(["cs", "ts", "combined"].map(|k| format!("layer{l}_{k}")));
                }
                v
            }
            FeConfig::DeepLob { .. } => ["inception_1", "inception_3", "inception_5", "passthrough"]
                .map(String::from)
                .to_vec(),
            FeConfig::AxialLob { .. } => ["embedding", "time_attention", "asset_attention"].map(String::from).to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.n_filters() == 0 {
            return bad("n_filters must be positive");
        }
        match *self {
            FeConfig::OrigCim { ts_filter_length, .. } if ts_filter_length == 0 => bad("ts_filter_length must be positive"),
            FeConfig::FlexCim { n_filter_layers, .. } if n_filter_layers == 0 => bad("n_filter_layers must be positive"),
            FeConfig::AxialLob { n_filters, n_axial_heads } if n_axial_heads == 0 || n_filters % n_axial_heads != 0 => {
                bad("n_filters must be a multiple of n_axial_heads")
            }
            _ => Ok(()),
        }
    }
}

/// Reduced features plus optional diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct FeOutput {
    /// `[B, T, N_A]`.
    pub features: Var,
    /// FlexCIM variable-selection weights `[B, T, N_T]`.
    pub vsn: Option<Var>,
    /// AxialLOB time-axis attention `[B·N_A·heads, T, T]`.
    pub time_attention: Option<Var>,
}

/// Two-stage 1×1 reduction: each feature type `n_filters → 1` (ELU), then the
/// `N_T` type channels `→ 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimReduce {
    pub per_type: Vec<Conv>,
    pub mix: Option<Conv>,
}

impl DimReduce {
    fn new(b: &mut Builder, name: &str, n_filters: usize, n_types: usize, mix: bool) -> Self {
        Self {
            per_type: (0..n_types)
                .map(|j| Conv::new(b, &format!("{name}/type{j}"), n_filters, 1, 1, 1))
                .collect(),
            mix: mix.then(|| Conv::new(b, &format!("{name}/mix"), n_types, 1, 1, 1)),
        }
    }

    /// Stage one: `[B, N_T, T, A]`.
    pub fn stage_one(&self, g: &mut Graph, types: &[Var]) -> Var {
        let reduced: Vec<Var> = self
            .per_type
            .iter()
            .zip(types)
            .map(|(c, &t)| {
                let y = c.forward(g, t);
                g.elu(y)
            })
            .collect();
        g.concat(&reduced, 1)
    }

    /// Both stages: `[B, T, A]`.
    pub fn forward(&self, g: &mut Graph, types: &[Var]) -> Var {
        let s = self.stage_one(g, types);
        let y = self.mix.as_ref().expect("mixing stage").forward(g, s);
        squeeze_channel(g, y)
    }
}

fn squeeze_channel(g: &mut Graph, y: Var) -> Var {
    let s = g.shape(y);
    g.reshape(y, &[s[0], s[2], s[3]])
}

fn conv_elu(g: &mut Graph, c: &Conv, x: Var) -> Var {
    let y = c.forward(g, x);
    g.elu(y)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrigCim {
    pub n_assets: usize,
    pub cs: Conv,
    pub ts: Conv,
    pub combined: Conv,
    pub passthrough: Conv,
    pub reduce: DimReduce,
}

impl OrigCim {
    fn new(b: &mut Builder, n_assets: usize, n_filters: usize, l1: usize) -> Self {
        Self {
            n_assets,
            cs: Conv::new(b, "fe/cs", 1, n_filters, 1, n_assets),
            ts: Conv::new(b, "fe/ts", 1, n_filters, l1, 1),
            combined: Conv::new(b, "fe/combined", 1, n_filters, l1, n_assets),
            passthrough: Conv::new(b, "fe/passthrough", 1, n_filters, 1, 1),
            reduce: DimReduce::new(b, "fe/reduce", n_filters, 4, true),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let types: Vec<Var> = [&self.cs, &self.ts, &self.combined, &self.passthrough]
            .iter()
            .map(|c| conv_elu(g, c, x))
            .collect();
        self.reduce.forward(g, &types)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlexLayer {
    pub cs: Conv,
    pub ts: Conv,
    pub combined: Conv,
    pub trunk: Conv,
}

/// Softmax weighting over feature-type channels with a gated per-type
/// transform. Weights depend only on cross-asset summaries, so the parameter
/// count is independent of `N_A`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeVsn {
    pub n_types: usize,
    pub hidden: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub wg: ParamId,
    pub bg: ParamId,
    pub weight_hidden: Dense,
    pub weight_logits: Dense,
}

impl TypeVsn {
    fn new(b: &mut Builder, name: &str, n_types: usize, hidden: usize) -> Self {
        let weight_logits = Dense::new(b, &format!("{name}/logits"), n_types, n_types, true);
        // Uniform selection at initialisation.
        b.params.get_mut(weight_logits.w).fill(0.0);
        Self {
            n_types,
            hidden,
            w1: b.glorot(&format!("{name}/w1"), &[n_types, hidden], 1, hidden),
            b1: b.zeros(&format!("{name}/b1"), &[n_types, hidden]),
            w2: b.glorot(&format!("{name}/w2"), &[n_types, hidden], hidden, 1),
            b2: b.zeros(&format!("{name}/b2"), &[n_types]),
            wg: b.glorot(&format!("{name}/wg"), &[n_types], 1, 1),
            bg: b.zeros(&format!("{name}/bg"), &[n_types]),
            weight_hidden: Dense::new(b, &format!("{name}/hidden"), 2 * n_types, n_types, true),
            weight_logits,
        }
    }

    /// `u` is `[B, N_T, T, A]`; returns (`[B, T, A]`, ν `[B, T, N_T]`).
    pub fn forward(&self, g: &mut Graph, u: Var) -> (Var, Var) {
        let s = g.shape(u);
        let (bsz, nt, t, a) = (s[0], s[1], s[2], s[3]);
        let u = g.permute(u, &[0, 2, 3, 1]);
        let u5 = g.reshape(u, &[bsz, t, a, nt, 1]);
        let (w1, b1, w2, b2, wg, bg) = (
            g.param(self.w1),
            g.param(self.b1),
            g.param(self.w2),
            g.param(self.b2),
            g.param(self.wg),
            g.param(self.bg),
        );
        let h = g.mul(u5, w1);
        let h = g.add(h, b1);
        let h = g.elu(h);
        let h = g.mul(h, w2);
        let lin = g.sum_axis(h, 4);
        let lin = g.reshape(lin, &[bsz, t, a, nt]);
        let lin = g.add(lin, b2);
        let gate = g.mul(u, wg);
        let gate = g.add(gate, bg);
        let gate = g.sigmoid(gate);
        let gated = g.mul(gate, lin);
        let transformed = g.add(u, gated);

        let mean = g.mean_axis(u, 2);
        let sq = g.square(u);
        let ms = g.mean_axis(sq, 2);
        let ms = g.add_scalar(ms, 1e-8);
        let rms = g.sqrt(ms);
        let summary = g.concat(&[mean, rms], 3);
        let hid = self.weight_hidden.forward(g, summary);
        let hid = g.elu(hid);
        let logits = self.weight_logits.forward(g, hid);
        let nu = g.softmax(logits, false);

        let mixed = g.mul(transformed, nu);
        let out = g.sum_axis(mixed, 3);
        let out = g.reshape(out, &[bsz, t, a]);
        let nu = g.reshape(nu, &[bsz, t, nt]);
        (out, nu)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlexCim {
    pub passthrough: Conv,
    pub layers: Vec<FlexLayer>,
    pub reduce: DimReduce,
    pub vsn: TypeVsn,
}

impl FlexCim {
    fn new(b: &mut Builder, n_filters: usize, n_layers: usize) -> Self {
        let passthrough = Conv::new(b, "fe/passthrough", 1, n_filters, 1, 1);
        let layers = (0..n_layers)
            .map(|l| {
                let c_in = if l == 0 { 1 } else { n_filters };
                let p = format!("fe/layer{}", l + 1);
                FlexLayer {
                    cs: Conv::new(b, &format!("{p}/cs"), c_in, n_filters, 1, FLEX_CS_WIDTH),
                    ts: Conv::new(b, &format!("{p}/ts"), c_in, n_filters, FLEX_TS_LENGTH, 1),
                    combined: Conv::new(b, &format!("{p}/combined"), c_in, n_filters, FLEX_TS_LENGTH, FLEX_CS_WIDTH),
                    trunk: Conv::new(b, &format!("{p}/trunk"), 3 * n_filters, n_filters, 1, 1),
                }
            })
            .collect();
        let n_types = 3 * n_layers + 1;
        Self {
            passthrough,
            layers,
            reduce: DimReduce::new(b, "fe/reduce", n_filters, n_types, false),
            vsn: TypeVsn::new(b, "fe/vsn", n_types, n_filters),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let mut types = vec![conv_elu(g, &self.passthrough, x)];
        let mut trunk = x;
        for layer in &self.layers {
            let cs = conv_elu(g, &layer.cs, trunk);
            let ts = conv_elu(g, &layer.ts, trunk);
            let co = conv_elu(g, &layer.combined, trunk);
            let cat = g.concat(&[cs, ts, co], 1);
            trunk = conv_elu(g, &layer.trunk, cat);
            types.extend([cs, ts, co]);
        }
        let u = self.reduce.stage_one(g, &types);
        self.vsn.forward(g, u)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepLob {
    pub convs: Vec<Conv>,
    pub inception: Vec<Conv>,
    pub reduce: DimReduce,
}

impl DeepLob {
    fn new(b: &mut Builder, n_filters: usize) -> Self {
        let convs = (0..3)
            .map(|i| Conv::new(b, &format!("fe/conv{}", i + 1), if i == 0 { 1 } else { n_filters }, n_filters, 3, 1))
            .collect();
        let inception = [1, 3, 5]
            .iter()
            .map(|&k| Conv::new(b, &format!("fe/inception{k}"), n_filters, n_filters, k, 1))
            .collect();
        Self {
            convs,
            inception,
            reduce: DimReduce::new(b, "fe/reduce", n_filters, 4, true),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = conv_elu(g, c, h);
        }
        let mut types: Vec<Var> = self.inception.iter().map(|c| conv_elu(g, c, h)).collect();
        types.push(h);
        self.reduce.forward(g, &types)
    }
}

/// Multi-head self-attention over the middle axis of `[N, L, C]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfAttention {
    pub heads: usize,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub gate: Dense,
}

impl SelfAttention {
    fn new(b: &mut Builder, name: &str, channels: usize, heads: usize) -> Self {
        let d = |b: &mut Builder, n: &str| Dense::new(b, &format!("{name}/{n}"), channels, channels, true);
        Self {
            heads,
            q: d(b, "q"),
            k: d(b, "k"),
            v: d(b, "v"),
            o: d(b, "o"),
            gate: d(b, "gate"),
        }
    }

    /// Gated residual attention; returns (`x + σ(gate(x)) ⊙ attn(x)`, probabilities `[N·h, L, L]`).
    pub fn forward(&self, g: &mut Graph, x: Var, causal: bool) -> (Var, Var) {
        let s = g.shape(x);
        let (n, l, c) = (s[0], s[1], s[2]);
        let h = self.heads;
        let d = c / h;
        let split = |g: &mut Graph, y: Var| {
            let y = g.reshape(y, &[n, l, h, d]);
            let y = g.permute(y, &[0, 2, 1, 3]);
            g.reshape(y, &[n * h, l, d])
        };
        let q = self.q.forward(g, x);
        let q = split(g, q);
        let k = self.k.forward(g, x);
        let k = split(g, k);
        let v = self.v.forward(g, x);
        let v = split(g, v);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let p = g.softmax(scores, causal);
        let y = g.bmm(p, v, false);
        let y = g.reshape(y, &[n, h, l, d]);
        let y = g.permute(y, &[0, 2, 1, 3]);
        let y = g.reshape(y, &[n, l, c]);
        let y = self.o.forward(g, y);
        let gate = self.gate.forward(g, x);
        let gate = g.sigmoid(gate);
        let y = g.mul(gate, y);
        (g.add(x, y), p)
    }
}

/// Sinusoidal encodings `[len, channels]`.
pub fn positional_encoding(len: usize, channels: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, channels), |(p, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / channels as f64);
        let a = p as f64 * rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxialLob {
    pub embed: Conv,
    pub time: SelfAttention,
    pub asset: SelfAttention,
    pub reduce: DimReduce,
}

impl AxialLob {
    fn new(b: &mut Builder, n_filters: usize, heads: usize) -> Self {
        Self {
            embed: Conv::new(b, "fe/embed", 1, n_filters, 1, 1),
            time: SelfAttention::new(b, "fe/time", n_filters, heads),
            asset: SelfAttention::new(b, "fe/asset", n_filters, heads),
            reduce: DimReduce::new(b, "fe/reduce", n_filters, 3, true),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let e = self.embed.forward(g, x);
        let s = g.shape(e);
        let (bsz, c, t, a) = (s[0], s[1], s[2], s[3]);
        let pe_t = positional_encoding(t, c).t().as_standard_layout().into_owned().into_shape_with_order((c, t, 1)).unwrap();
        let pe_a = positional_encoding(a, c).t().as_standard_layout().into_owned().into_shape_with_order((c, 1, a)).unwrap();
        let pt = g.constant(pe_t.into_dyn());
        let pa = g.constant(pe_a.into_dyn());
        let e = g.add(e, pt);
        let e = g.add(e, pa);

        let z = g.permute(e, &[0, 3, 2, 1]);
        let z = g.reshape(z, &[bsz * a, t, c]);
        let (z, p_time) = self.time.forward(g, z, true);
        let z = g.reshape(z, &[bsz, a, t, c]);
        let after_time = g.permute(z, &[0, 3, 2, 1]);

        let z = g.permute(after_time, &[0, 2, 3, 1]);
        let z = g.reshape(z, &[bsz * t, a, c]);
        let (z, _) = self.asset.forward(g, z, false);
        let z = g.reshape(z, &[bsz, t, a, c]);
        let after_asset = g.permute(z, &[0, 3, 1, 2]);

        (self.reduce.forward(g, &[e, after_time, after_asset]), p_time)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FeatureExtractor {
    OrigCim(OrigCim),
    FlexCim(FlexCim),
    DeepLob(DeepLob),
    AxialLob(AxialLob),
}

impl FeatureExtractor {
    pub fn new(b: &mut Builder, config: &FeConfig, n_assets: usize) -> Result<Self> {
        config.validate()?;
        Ok(match *config {
            FeConfig::OrigCim { n_filters, ts_filter_length } => {
                FeatureExtractor::OrigCim(OrigCim::new(b, n_assets, n_filters, ts_filter_length))
            }
            FeConfig::FlexCim { n_filters, n_filter_layers } => {
                FeatureExtractor::FlexCim(FlexCim::new(b, n_filters, n_filter_layers))
            }
            FeConfig::DeepLob { n_filters } => FeatureExtractor::DeepLob(DeepLob::new(b, n_filters)),
            FeConfig::AxialLob { n_filters, n_axial_heads } => {
                FeatureExtractor::AxialLob(AxialLob::new(b, n_filters, n_axial_heads))
            }
        })
    }

    /// `x` is `[B, T, N_A]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<FeOutput> {
        let s = g.shape(x);
        if s.len() != 3 {
            return Err(NnError::Shape(format!("expected [B, T, N_A] input, got {s:?}")));
        }
        if let FeatureExtractor::OrigCim(m) = self {
            if s[2] != m.n_assets {
                return Err(NnError::Shape(format!(
                    "OrigCIM was built for {} assets but the input has {}; rebuild and retrain",
                    m.n_assets, s[2]
                )));
            }
        }
        let x4 = g.reshape(x, &[s[0], 1, s[1], s[2]]);
        let mut out = FeOutput {
            features: x,
            vsn: None,
            time_attention: None,
        };
        match self {
            FeatureExtractor::OrigCim(m) => out.features = m.forward(g, x4),
            FeatureExtractor::FlexCim(m) => {
                let (f, nu) = m.forward(g, x4);
                out.features = f;
                out.vsn = Some(nu);
            }
            FeatureExtractor::DeepLob(m) => out.features = m.forward(g, x4),
            FeatureExtractor::AxialLob(m) => {
                let (f, p) = m.forward(g, x4);
                out.features = f;
                out.time_attention = Some(p);
            }
        }
        Ok(out)
    }
}

/// Trainable scalars of a standalone extractor.
pub fn count_fe_parameters(config: &FeConfig, n_assets: usize) -> Result<usize> {
    let mut b = Builder::new(0);
    FeatureExtractor::new(&mut b, config, n_assets)?;
    Ok(b.finish().n_scalars())
}

/// Runs an extractor on a single `[T, N_A]` window.
pub fn extract(params: &crate::params::ParamSet, fe: &FeatureExtractor, x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut g = Graph::new(params);
    let (t, a) = x.dim();
    let xv = g.constant(x.clone().into_shape_with_order((1, t, a)).unwrap().into_dyn());
    let out = fe.forward(&mut g, xv)?;
    Ok(g.value(out.features).clone().into_shape_with_order((t, a)).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tensor;
    use ndarray::IxDyn;
    use crate::params::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_x(seed: u64, t: usize, a: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, a), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn build(config: FeConfig, n_assets: usize) -> (ParamSet, FeatureExtractor) {
        let mut b = Builder::new(11);
        let fe = FeatureExtractor::new(&mut b, &config, n_assets).unwrap();
        (b.finish(), fe)
    }

    fn all_configs() -> Vec<FeConfig> {
        vec![
            FeConfig::OrigCim { n_filters: 4, ts_filter_length: 3 },
            FeConfig::FlexCim { n_filters: 3, n_filter_layers: 2 },
            FeConfig::DeepLob { n_filters: 4 },
            FeConfig::AxialLob { n_filters: 4, n_axial_heads: 2 },
        ]
    }

    #[test]
    fn output_shapes() {
        for c in all_configs() {
            let (ps, fe) = build(c, 6);
            let y = extract(&ps, &fe, &random_x(1, 12, 6)).unwrap();
            assert_eq!(y.dim(), (12, 6), "{}", c.label());
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn every_extractor_is_causal() {
        for c in all_configs() {
            let (ps, fe) = build(c, 6);
            let x = random_x(2, 15, 6);
            let base = extract(&ps, &fe, &x).unwrap();
            let k = 8;
            let mut cut = x.clone();
            cut.slice_mut(ndarray::s![k + 1.., ..]).fill(0.0);
            let y = extract(&ps, &fe, &cut).unwrap();
            for t in 0..=k {
                for a in 0..6 {
                    assert!((y[[t, a]] - base[[t, a]]).abs() < 1e-12, "{} row {t}", c.label());
                }
            }
        }
    }

    #[test]
    fn orig_cim_zero_input_gives_zero() {
        let (ps, fe) = build(FeConfig::OrigCim { n_filters: 4, ts_filter_length: 5 }, 5);
        let y = extract(&ps, &fe, &Array2::zeros((10, 5))).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orig_cim_rejects_other_universe_sizes() {
        let (ps, fe) = build(FeConfig::OrigCim { n_filters: 2, ts_filter_length: 3 }, 5);
        assert!(matches!(extract(&ps, &fe, &random_x(0, 10, 6)), Err(NnError::Shape(_))));
    }

    #[test]
    fn orig_cim_ts_filter_is_causal_mean() {
        let (mut ps, fe) = build(FeConfig::OrigCim { n_filters: 1, ts_filter_length: 3 }, 4);
        let FeatureExtractor::OrigCim(m) = &fe else { unreachable!() };
        for v in ps.values_mut() {
            v.fill(0.0);
        }
        ps.get_mut(m.ts.k).fill(1.0 / 3.0);
        ps.get_mut(m.reduce.per_type[1].k).fill(1.0);
        ps.get_mut(m.reduce.mix.as_ref().unwrap().k)
            .assign(&Tensor::from_shape_vec(IxDyn(&[1, 4, 1, 1]), vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        // Positive inputs keep every ELU in its identity region.
        let x = random_x(5, 20, 4).mapv(|v| v.abs() + 0.01);
        let y = extract(&ps, &fe, &x).unwrap();
        for t in 0..20usize {
            for a in 0..4 {
                let lo = t.saturating_sub(2);
                let want: f64 = (lo..=t).map(|s| x[[s, a]]).sum::<f64>() / 3.0;
                assert!((y[[t, a]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flex_cim_vsn_rows_sum_to_one() {
        let config = FeConfig::FlexCim { n_filters: 3, n_filter_layers: 3 };
        assert_eq!(config.n_types(), 10);
        assert_eq!(config.feature_type_labels().len(), 10);
        let (ps, fe) = build(config, 7);
        let mut g = Graph::new(&ps);
        let x = g.constant(random_x(3, 16, 7).into_shape_with_order((1, 16, 7)).unwrap().into_dyn());
        let out = fe.forward(&mut g, x).unwrap();
        let nu = g.value(out.vsn.unwrap());
        assert_eq!(nu.shape(), &[1, 16, 10]);
        for t in 0..16 {
            let s: f64 = (0..10).map(|j| nu[[0, t, j]]).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!((0..10).all(|j| nu[[0, t, j]] >= 0.0));
        }
    }

    #[test]
    fn flex_cim_size_is_universe_free() {
        let c = FeConfig::FlexCim { n_filters: 8, n_filter_layers: 3 };
        assert_eq!(count_fe_parameters(&c, 20).unwrap(), count_fe_parameters(&c, 50).unwrap());
        let d = FeConfig::DeepLob { n_filters: 8 };
        assert_eq!(count_fe_parameters(&d, 20).unwrap(), count_fe_parameters(&d, 50).unwrap());
        let o = FeConfig::OrigCim { n_filters: 8, ts_filter_length: 3 };
        assert!(count_fe_parameters(&o, 50).unwrap() > count_fe_parameters(&o, 20).unwrap());
    }

    #[test]
    fn deeplob_is_asset_equivariant() {
        let (ps, fe) = build(FeConfig::DeepLob { n_filters: 3 }, 5);
        let x = random_x(4, 14, 5);
        let perm = [3, 0, 4, 1, 2];
        let xp = Array2::from_shape_fn((14, 5), |(t, a)| x[[t, perm[a]]]);
        let y = extract(&ps, &fe, &x).unwrap();
        let yp = extract(&ps, &fe, &xp).unwrap();
        for t in 0..14 {
            for a in 0..5 {
                assert!((yp[[t, a]] - y[[t, perm[a]]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn axial_time_attention_rows_sum_to_one() {
        let (ps, fe) = build(FeConfig::AxialLob { n_filters: 4, n_axial_heads: 2 }, 3);
        let mut g = Graph::new(&ps);
        let x = g.constant(random_x(6, 9, 3).into_shape_with_order((1, 9, 3)).unwrap().into_dyn());
        let out = fe.forward(&mut g, x).unwrap();
        let p = g.value(out.time_attention.unwrap());
        assert_eq!(p.shape(), &[6, 9, 9]);
        for n in 0..6 {
            for i in 0..9 {
                let s: f64 = (0..9).map(|j| p[[n, i, j]]).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!((i + 1..9).all(|j| p[[n, i, j]] == 0.0));
            }
        }
    }

    #[test]
    fn reduction_is_pointwise_in_time_and_asset() {
        let mut b = Builder::new(2);
        let r = DimReduce::new(&mut b, "r", 3, 2, true);
        let ps = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha8Rng| Tensor::from_shape_fn(IxDyn(&[1, 3, 4, 5]), |_| rng.random::<f64>() - 0.5);
        let (a, bb) = (mk(&mut rng), mk(&mut rng));
        let run = |a: &Tensor, bb: &Tensor| {
            let mut g = Graph::new(&ps);
            let (va, vb) = (g.constant(a.clone()), g.constant(bb.clone()));
            let y = r.forward(&mut g, &[va, vb]);
            g.value(y).clone()
        };
        let base = run(&a, &bb);
        let mut a2 = a.clone();
        a2[[0, 1, 2, 3]] += 1.0;
        let moved = run(&a2, &bb);
        for t in 0..4 {
            for i in 0..5 {
                let changed = (moved[[0, t, i]] - base[[0, t, i]]).abs() > 0.0;
                assert_eq!(changed, (t, i) == (2, 3));
            }
        }
    }

    #[test]
    fn reduction_channel_path() {
        // N_F = 64 (4 types × 16 filters): 16 → 1 per type, then 4 → 1.
        let mut b = Builder::new(0);
        let r = DimReduce::new(&mut b, "r", 16, 4, true);
        let ps = b.finish();
        assert!(r.per_type.iter().all(|c| ps.get(c.k).shape() == [1, 16, 1, 1]));
        assert_eq!(ps.get(r.mix.as_ref().unwrap().k).shape(), &[1, 4, 1, 1]);
    }

    #[test]
    fn zero_reduction_weights_give_bias() {
        let mut b = Builder::new(0);
        let r = DimReduce::new(&mut b, "r", 3, 2, true);
        let mut ps = b.finish();
        for v in ps.values_mut() {
            v.fill(0.0);
        }
        ps.get_mut(r.mix.as_ref().unwrap().b).fill(0.25);
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::from_elem(IxDyn(&[1, 3, 4, 2]), 3.0));
        let y = r.forward(&mut g, &[x, x]);
        assert!(g.value(y).iter().all(|&v| v == 0.25));
    }
}
