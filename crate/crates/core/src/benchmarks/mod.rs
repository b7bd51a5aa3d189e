//! Benchmark strategies: Long-only, JT, LM, MOP, BAZ and their combinations.

pub mod lambdamart;
mod suite;

use chrono::NaiveDate;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{PricePanel, ReturnsPanel};
use crate::objective::{StrategyResult, WeightsMatrix};
use crate::stats::{self, EwStats};
use crate::ANNUALISATION;

pub use suite::{run_suite, BenchmarkSuite, SuiteConfig};

pub const LOOKBACKS: [usize; 5] = [5, 21, 63, 126, 252];
pub const MACD_PAIRS: [(usize, usize); 3] = [(8, 24), (16, 48), (24, 96)];
const MACD_PRICE_SPAN: usize = 63;
const MACD_SIGNAL_SPAN: usize = 252;
const MACD_RESPONSE_NORM: f64 = 0.89;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalKind {
    PastReturn(usize),
    Macd(usize, usize),
    MacdCombined,
    LmRank,
}

/// Dimensionless score per date and asset; `None` where undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub values: Array2<Option<f64>>,
    pub kind: SignalKind,
}

impl Signal {
    /// Restricts to consecutive rows.
    pub fn slice_rows(&self, rows: std::ops::Range<usize>) -> Signal {
        Signal {
            dates: self.dates[rows.clone()].to_vec(),
            assets: self.assets.clone(),
            values: self.values.slice(ndarray::s![rows, ..]).to_owned(),
            kind: self.kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    LongOnly,
    LongShort,
}

impl Side {
    pub fn label(self) -> &'static str {
        match self {
            Side::LongOnly => "LO",
            Side::LongShort => "LS",
        }
    }
}

/// Unit long positions, zero where `active` is false.
pub fn long_only(dates: Vec<NaiveDate>, assets: Vec<String>, active: Option<&Array2<bool>>) -> WeightsMatrix {
    let mut w = WeightsMatrix::long_only(dates, assets);
    if let Some(active) = active {
        for ((r, c), v) in w.values.indexed_iter_mut() {
            if !active[[r, c]] {
                *v = 0.0;
            }
        }
    }
    w
}

/// Trailing `k`-day compounded return `Π(1 + r) − 1`, missing until `k`
/// returns are available.
pub fn past_return_signal(r: &ReturnsPanel, k: usize) -> Result<Signal> {
    if k == 0 {
        return Err(Error::InvalidArgument("lookback must be positive".into()));
    }
    let (n, a) = r.values.dim();
    let mut values = Array2::from_elem((n, a), None);
    for i in 0..a {
        // Prefix sums of log growth keep this O(n).
        let mut cum = vec![0.0; n + 1];
        for t in 0..n {
            let x = r.values[[t, i]];
            let x = if x.is_finite() { x } else { 0.0 };
            cum[t + 1] = cum[t] + (1.0 + x).ln();
        }
        for t in (k - 1)..n {
            values[[t, i]] = Some((cum[t + 1] - cum[t + 1 - k]).exp() - 1.0);
        }
    }
    Ok(Signal {
        dates: r.dates.clone(),
        assets: r.assets.clone(),
        values,
        kind: SignalKind::PastReturn(k),
    })
}

/// Prices with gaps forward-filled; `None` before the first observation.
fn filled_prices(p: &PricePanel, col: usize) -> Vec<Option<f64>> {
    let mut last = None;
    (0..p.n_rows())
        .map(|t| {
            if p.mask[[t, col]] {
                last = Some(p.values[[t, col]]);
            }
            last
        })
        .collect()
}

/// Normalised MACD `z = q / ewstd_252(q)` with
/// `q = (EWMA_S(p) − EWMA_L(p)) / ewstd_63(p)` and EWMA decay `1/S`.
fn macd_z(prices: &[Option<f64>], s: usize, l: usize) -> Vec<Option<f64>> {
    let mut fast = EwStats::with_alpha(1.0 / s as f64);
    let mut slow = EwStats::with_alpha(1.0 / l as f64);
    let mut pstd = EwStats::new(MACD_PRICE_SPAN);
    let mut qstd = EwStats::new(MACD_SIGNAL_SPAN);
    prices
        .iter()
        .map(|p| {
            let p = (*p)?;
            fast.update(p);
            slow.update(p);
            pstd.update(p);
            let sp = pstd.std();
            let q = if sp > 0.0 { (fast.mean() - slow.mean()) / sp } else { 0.0 };
            qstd.update(q);
            let sq = qstd.std();
            Some(if sq > 0.0 { q / sq } else { 0.0 })
        })
        .collect()
}

/// Response `z·exp(−z²/4)/0.89`, peaking near `|z| = √2`.
pub fn macd_response(z: f64) -> f64 {
    z * (-z * z / 4.0).exp() / MACD_RESPONSE_NORM
}

/// Single MACD (`Some((S, L))`) or the combined indicator averaging the
/// response over all three timescale pairs (`None`).
pub fn macd_signal(p: &PricePanel, pair: Option<(usize, usize)>) -> Result<Signal> {
    if let Some((s, l)) = pair {
        if s == 0 || l <= s {
            return Err(Error::InvalidArgument(format!("bad MACD pair ({s}, {l})")));
        }
    }
    let (n, a) = p.values.dim();
    let mut values = Array2::from_elem((n, a), None);
    for i in 0..a {
        let prices = filled_prices(p, i);
        match pair {
            Some((s, l)) => {
                for (t, z) in macd_z(&prices, s, l).into_iter().enumerate() {
                    values[[t, i]] = z;
                }
            }
            None => {
                let zs: Vec<Vec<Option<f64>>> = MACD_PAIRS.iter().map(|&(s, l)| macd_z(&prices, s, l)).collect();
                for t in 0..n {
                    let parts: Option<Vec<f64>> = zs.iter().map(|z| z[t].map(macd_response)).collect();
                    values[[t, i]] = parts.map(|v| v.iter().sum::<f64>() / v.len() as f64);
                }
            }
        }
    }
    Ok(Signal {
        dates: p.dates.clone(),
        assets: p.assets.clone(),
        values,
        kind: pair.map_or(SignalKind::MacdCombined, |(s, l)| SignalKind::Macd(s, l)),
    })
}

/// Aligns a price-indexed signal to return dates (drops the first price row).
pub fn align_to_returns(s: &Signal, r: &ReturnsPanel) -> Result<Signal> {
    let first = s
        .dates
        .iter()
        .position(|d| *d == r.dates[0])
        .ok_or_else(|| Error::Shape("signal does not cover return dates".into()))?;
    if s.dates.len() < first + r.n_rows() || s.dates[first..first + r.n_rows()] != r.dates[..] {
        return Err(Error::Shape("signal dates do not align with returns".into()));
    }
    Ok(s.slice_rows(first..first + r.n_rows()))
}

/// Cross-sectional decile portfolio: `⌊n/10⌋` highest-signal assets long and,
/// for long-short, as many lowest-signal assets short. Ties go to the lower
/// asset index. Dates with fewer than 10 defined signals stay flat.
pub fn cs_portfolio(s: &Signal, side: Side) -> WeightsMatrix {
    let (n, a) = s.values.dim();
    let mut w = Array2::zeros((n, a));
    for t in 0..n {
        let mut ranked: Vec<(usize, f64)> = (0..a).filter_map(|i| s.values[[t, i]].map(|v| (i, v))).collect();
        let k = ranked.len() / 10;
        if k == 0 {
            continue;
        }
        ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for &(i, _) in &ranked[..k] {
            w[[t, i]] = 1.0;
        }
        if side == Side::LongShort {
            ranked.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
            for &(i, _) in &ranked[..k] {
                w[[t, i]] = -1.0;
            }
        }
    }
    WeightsMatrix {
        dates: s.dates.clone(),
        assets: s.assets.clone(),
        values: w,
    }
}

/// Time-series sign portfolio with `sign(0) = 0`; long-only floors at zero.
pub fn ts_portfolio(s: &Signal, side: Side) -> WeightsMatrix {
    let values = s.values.mapv(|v| {
        let sign = match v {
            Some(x) if x > 0.0 => 1.0,
            Some(x) if x < 0.0 => -1.0,
            _ => 0.0,
        };
        match side {
            Side::LongShort => sign,
            Side::LongOnly => f64::max(0.0, sign),
        }
    });
    WeightsMatrix {
        dates: s.dates.clone(),
        assets: s.assets.clone(),
        values,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombineMode {
    EqualWeight,
    VolScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombineRule {
    pub mode: CombineMode,
    pub span: usize,
}

impl CombineRule {
    pub fn equal_weight() -> Self {
        Self {
            mode: CombineMode::EqualWeight,
            span: 63,
        }
    }

    pub fn vol_scaled() -> Self {
        Self {
            mode: CombineMode::VolScaled,
            span: 63,
        }
    }
}

/// Mixing weights `T × M`. Vol-scaled weights at row `t` use each member's
/// EW std of returns through `t − 1`; rows where any member's std is still
/// zero fall back to equal weights.
pub fn combine_weights(members: &[Vec<f64>], rule: CombineRule) -> Result<Array2<f64>> {
    let m = members.len();
    if m == 0 {
        return Err(Error::InvalidArgument("no strategies to combine".into()));
    }
    let n = members[0].len();
    if members.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("member return series differ in length".into()));
    }
    let mut out = Array2::from_elem((n, m), 1.0 / m as f64);
    if rule.mode == CombineMode::EqualWeight {
        return Ok(out);
    }
    let mut ew: Vec<EwStats> = (0..m).map(|_| EwStats::new(rule.span)).collect();
    for t in 0..n {
        let sig: Vec<f64> = ew.iter().map(|e| if e.count() > 1 { e.std() } else { 0.0 }).collect();
        if sig.iter().all(|s| *s > 0.0) {
            let inv: Vec<f64> = sig.iter().map(|s| 1.0 / s).collect();
            let total: f64 = inv.iter().sum();
            for j in 0..m {
                out[[t, j]] = inv[j] / total;
            }
        }
        for (e, r) in ew.iter_mut().zip(members) {
            e.update(r[t]);
        }
    }
    Ok(out)
}

/// Convex combination of member strategies. Gross and turnover components are
/// mixed with the same weights, so re-costing the combination applies each
/// member's cost pro rata.
pub fn combine(results: &[&StrategyResult], rule: CombineRule, name: &str) -> Result<StrategyResult> {
    let first = *results
        .first()
        .ok_or_else(|| Error::InvalidArgument("no strategies to combine".into()))?;
    if results.iter().any(|r| r.dates != first.dates || r.weights.assets != first.weights.assets) {
        return Err(Error::Shape("combined strategies are not aligned".into()));
    }
    let series: Vec<Vec<f64>> = results.iter().map(|r| r.returns.clone()).collect();
    let mix = combine_weights(&series, rule)?;
    let n = first.len();
    let mut returns = vec![0.0; n];
    let mut gross = vec![0.0; n];
    let mut turnover = vec![0.0; n];
    let mut weights = Array2::zeros(first.weights.values.dim());
    for (j, r) in results.iter().enumerate() {
        for t in 0..n {
            let w = mix[[t, j]];
            returns[t] += w * r.returns[t];
            gross[t] += w * r.prefactor * r.gross[t];
            turnover[t] += w * r.prefactor * r.turnover[t];
            for i in 0..weights.ncols() {
                weights[[t, i]] += w * r.weights.values[[t, i]];
            }
        }
    }
    Ok(StrategyResult {
        name: name.to_string(),
        dates: first.dates.clone(),
        returns,
        gross,
        turnover,
        prefactor: 1.0,
        costed: results.iter().any(|r| r.costed),
        cost: first.cost,
        weights: WeightsMatrix {
            dates: first.weights.dates.clone(),
            assets: first.weights.assets.clone(),
            values: weights,
        },
        config_hash: first.config_hash.clone(),
        seeds: Vec::new(),
    })
}

/// Annualised Sharpe of a return series, `None` when volatility is zero.
pub fn sharpe(r: &[f64]) -> Option<f64> {
    let s = stats::std(r)?;
    let m = stats::mean(r)?;
    (s > 0.0).then(|| ANNUALISATION.sqrt() * m / s)
}

/// Index of the highest-Sharpe candidate; ties and undefined values resolve
/// to the earliest candidate.
pub fn select_variant(candidates: &[&StrategyResult]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in candidates.iter().enumerate() {
        let s = sharpe(&c.returns).unwrap_or(f64::NEG_INFINITY);
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((k, s)),
        }
    }
    best.map(|(k, _)| k)
}
