use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::lambdamart::{self, LmParams};
use super::{
    align_to_returns, combine, cs_portfolio, long_only, macd_signal, past_return_signal, select_variant,
    ts_portfolio, CombineRule, Side, Signal, SignalKind, LOOKBACKS, MACD_PAIRS,
};
use crate::error::{Error, Result};
use crate::marketdata::{PricePanel, ReturnsPanel, VolPanel};
use crate::objective::{portfolio_returns, CostModel, StrategyResult, WeightsMatrix};
use crate::tuning::{self, SearchSpace, TunerMethod};
use crate::windows::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub sigma_tgt: f64,
    pub c_bps: f64,
    pub include_lm: bool,
    /// Random-search trials for LM hyperparameters; 0 uses `lm_params` as is.
    pub lm_trials: usize,
    pub lm_params: LmParams,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            sigma_tgt: 0.15,
            c_bps: 0.0,
            include_lm: true,
            lm_trials: 50,
            lm_params: LmParams::default(),
            seed: 0,
        }
    }
}

/// Chosen benchmark strategies over the concatenated test rows, plus every
/// candidate considered during the ex-post variant selection.
#[derive(Debug, Clone)]
pub struct BenchmarkSuite {
    pub long_only: StrategyResult,
    pub jt: StrategyResult,
    pub lm: Option<StrategyResult>,
    pub mop: StrategyResult,
    pub baz: StrategyResult,
    pub cmb_ew: StrategyResult,
    pub cmb_vs: StrategyResult,
    pub candidates: Vec<StrategyResult>,
}

impl BenchmarkSuite {
    pub fn all(&self) -> Vec<&StrategyResult> {
        let mut v = vec![&self.long_only, &self.jt];
        if let Some(lm) = &self.lm {
            v.push(lm);
        }
        v.extend([&self.mop, &self.baz, &self.cmb_ew, &self.cmb_vs]);
        v
    }
}

/// Prediction rows covered by the test spans, excluding the final panel row.
fn test_rows(splits: &[Split], n_rows: usize) -> Result<Range<usize>> {
    let start = splits
        .first()
        .ok_or_else(|| Error::InvalidArgument("no splits".into()))?
        .test
        .rows
        .start;
    let end = splits.last().unwrap().test.rows.end.min(n_rows - 1);
    if end <= start {
        return Err(Error::InvalidArgument("test rows are empty".into()));
    }
    Ok(start..end)
}

fn weights_on(w: WeightsMatrix, rows: &Range<usize>) -> WeightsMatrix {
    WeightsMatrix {
        dates: w.dates[rows.clone()].to_vec(),
        assets: w.assets,
        values: w.values.slice(ndarray::s![rows.clone(), ..]).to_owned(),
    }
}

fn label_of(kind: SignalKind) -> String {
    match kind {
        SignalKind::PastReturn(k) => format!("k={k}"),
        SignalKind::Macd(s, l) => format!("S={s},L={l}"),
        SignalKind::MacdCombined => "combined".into(),
        SignalKind::LmRank => "rank".into(),
    }
}

struct Ctx<'a> {
    returns: &'a ReturnsPanel,
    vol: &'a VolPanel,
    rows: Range<usize>,
    cfg: &'a SuiteConfig,
}

impl Ctx<'_> {
    fn evaluate(&self, w: WeightsMatrix, name: String, costed: bool) -> Result<StrategyResult> {
        let cost = CostModel::new(if costed { self.cfg.c_bps } else { 0.0 }, 0.0)?;
        let mut r = portfolio_returns(&weights_on(w, &self.rows), self.returns, self.vol, self.cfg.sigma_tgt, cost, true)?;
        r.name = name;
        r.costed = costed;
        Ok(r)
    }

    /// Evaluates every (signal, side) pair and keeps the best by Sharpe.
    fn pick(
        &self,
        family: &str,
        signals: &[Signal],
        rule: fn(&Signal, Side) -> WeightsMatrix,
        out: &mut Vec<StrategyResult>,
    ) -> Result<StrategyResult> {
        let mut cands = Vec::new();
        for s in signals {
            for side in [Side::LongOnly, Side::LongShort] {
                let name = format!("{family} {} ({})", side.label(), label_of(s.kind));
                cands.push(self.evaluate(rule(s, side), name, true)?);
            }
        }
        let refs: Vec<&StrategyResult> = cands.iter().collect();
        let best = select_variant(&refs).expect("non-empty candidates");
        let chosen = cands[best].clone();
        out.extend(cands);
        Ok(chosen)
    }
}

fn lm_space() -> SearchSpace {
    SearchSpace::new()
        .with("learning_rate", &[1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1])
        .with("n_estimators", &[50.0, 100.0, 250.0, 500.0, 1000.0])
        .with("max_depth", &[6.0, 7.0, 8.0, 9.0, 10.0])
        .with("reg_alpha", &[1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1])
        .with("reg_lambda", &[1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1])
}

/// LM rank signal on the test rows, retrained per split on that split's
/// training rows with early stopping on its validation rows.
fn lm_signal(
    prices: &PricePanel,
    returns: &ReturnsPanel,
    vol: &VolPanel,
    splits: &[Split],
    cfg: &SuiteConfig,
) -> Result<Signal> {
    let feats = lambdamart::lm_features(prices, returns, vol)?;
    let (n, a) = returns.values.dim();
    let mut values = Array2::from_elem((n, a), None);
    for split in splits {
        // Labels look one row ahead, so the last row of each window is dropped.
        let train = lambdamart::lm_dataset(&feats, returns, vol, split.train.rows.start..split.train.rows.end - 1)?;
        let valid = lambdamart::lm_dataset(&feats, returns, vol, split.valid.rows.start..split.valid.rows.end - 1)?;
        if train.groups.is_empty() {
            continue;
        }
        let params = if cfg.lm_trials == 0 || valid.groups.is_empty() {
            cfg.lm_params
        } else {
            let method = TunerMethod::Random {
                max_trials: cfg.lm_trials,
                trial_patience: cfg.lm_params.early_stopping,
            };
            let base = cfg.lm_params;
            let res = tuning::tune(&lm_space(), method, cfg.seed ^ split.index as u64, |t, _| {
                let p = LmParams {
                    learning_rate: t["learning_rate"],
                    n_estimators: t["n_estimators"] as usize,
                    max_depth: t["max_depth"] as usize,
                    reg_alpha: t["reg_alpha"],
                    reg_lambda: t["reg_lambda"],
                    ..base
                };
                let m = lambdamart::fit(&train, Some(&valid), &p)?;
                Ok(-lambdamart::mean_ndcg(&valid, &m.predict(&valid.features)))
            })?;
            LmParams {
                learning_rate: res.best["learning_rate"],
                n_estimators: res.best["n_estimators"] as usize,
                max_depth: res.best["max_depth"] as usize,
                reg_alpha: res.best["reg_alpha"],
                reg_lambda: res.best["reg_lambda"],
                ..base
            }
        };
        let model = lambdamart::fit(&train, Some(&valid), &params)?;
        for t in split.test.rows.clone() {
            if let Some(f) = &feats[t] {
                for (i, s) in model.predict(f).into_iter().enumerate() {
                    values[[t, i]] = Some(s);
                }
            }
        }
    }
    Ok(Signal {
        dates: returns.dates.clone(),
        assets: returns.assets.clone(),
        values,
        kind: SignalKind::LmRank,
    })
}

/// Runs every benchmark family over the splits' test rows with asset
/// volatility scaling, choosing LO/LS and the lookback ex post by Sharpe.
pub fn run_suite(
    prices: &PricePanel,
    returns: &ReturnsPanel,
    vol: &VolPanel,
    splits: &[Split],
    cfg: &SuiteConfig,
) -> Result<BenchmarkSuite> {
    let rows = test_rows(splits, returns.n_rows())?;
    let ctx = Ctx {
        returns,
        vol,
        rows,
        cfg,
    };
    let mut candidates = Vec::new();
    let lo = ctx.evaluate(long_only(returns.dates.clone(), returns.assets.clone(), None), "Long-only".into(), false)?;

    let past: Vec<Signal> = LOOKBACKS
        .iter()
        .map(|&k| past_return_signal(returns, k))
        .collect::<Result<_>>()?;
    let jt = ctx.pick("JT", &past, cs_portfolio, &mut candidates)?;
    let mop = ctx.pick("MOP", &past, ts_portfolio, &mut candidates)?;

    let mut macds = Vec::new();
    for pair in MACD_PAIRS.iter().map(|p| Some(*p)).chain([None]) {
        macds.push(align_to_returns(&macd_signal(prices, pair)?, returns)?);
    }
    let baz = ctx.pick("BAZ", &macds, ts_portfolio, &mut candidates)?;

    let lm = if cfg.include_lm {
        let s = lm_signal(prices, returns, vol, splits, cfg)?;
        Some(ctx.pick("LM", &[s], cs_portfolio, &mut candidates)?)
    } else {
        None
    };

    let mut members: Vec<&StrategyResult> = vec![&jt];
    if let Some(lm) = &lm {
        members.push(lm);
    }
    members.extend([&mop, &baz]);
    let cmb_ew = combine(&members, CombineRule::equal_weight(), "CMB EW")?;
    let cmb_vs = combine(&members, CombineRule::vol_scaled(), "CMB VS")?;
    Ok(BenchmarkSuite {
        long_only: lo,
        jt,
        lm,
        mop,
        baz,
        cmb_ew,
        cmb_vs,
        candidates,
    })
}
