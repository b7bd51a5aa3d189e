//! Performance metrics, cost sweeps and rolling diagnostics.
//!
//! Percent-valued metrics are stored in percent. Metrics that are not
//! defined for a series (zero volatility, no drawdown, ...) are `None` and
//! serialise as the string `"undefined"`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::objective::{scale_to_target, StrategyResult, BPS};
use crate::stats::{self, EwStats};
use crate::ANNUALISATION;

pub const ROLLING_WINDOW: usize = 504;
pub const ROLLING_EW_SPAN: usize = 63;
pub const CI_Z: f64 = 1.96;

mod undefined {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_finite() => s.serialize_f64(*x),
            _ => s.serialize_str("undefined"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Str(s) if s == "undefined" => Ok(None),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected number or 'undefined', got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    #[serde(with = "undefined")]
    pub mar: Option<f64>,
    #[serde(with = "undefined")]
    pub vol: Option<f64>,
    #[serde(with = "undefined")]
    pub ddev: Option<f64>,
    #[serde(with = "undefined")]
    pub mdd: Option<f64>,
    #[serde(with = "undefined")]
    pub sharpe: Option<f64>,
    #[serde(with = "undefined")]
    pub sortino: Option<f64>,
    #[serde(with = "undefined")]
    pub calmar: Option<f64>,
    #[serde(with = "undefined")]
    pub corr: Option<f64>,
    #[serde(with = "undefined")]
    pub brk_bps: Option<f64>,
    #[serde(with = "undefined")]
    pub hr: Option<f64>,
    #[serde(with = "undefined")]
    pub pnl: Option<f64>,
    #[serde(with = "undefined")]
    pub psr: Option<f64>,
    #[serde(with = "undefined")]
    pub mtr: Option<f64>,
    pub sigma_tgt: f64,
    pub c_bps: f64,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    if den > 0.0 {
        finite(num / den)
    } else {
        None
    }
}

/// Risk and return metrics of a daily return series. `benchmark` (if given)
/// supplies CORR.
pub fn core_metrics(r: &[f64], benchmark: Option<&[f64]>) -> Result<MetricsReport> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("empty return series".into()));
    }
    let m = stats::mean(r).unwrap();
    let s = stats::std(r).unwrap();
    let mar = ANNUALISATION * m;
    let vol = ANNUALISATION.sqrt() * s;
    let downside = r.iter().map(|x| x.min(0.0).powi(2)).sum::<f64>() / r.len() as f64;
    let ddev = ANNUALISATION.sqrt() * downside.sqrt();
    let mdd = max_drawdown(r);
    let (hr, pnl) = hit_pnl(r);
    Ok(MetricsReport {
        mar: finite(100.0 * mar),
        vol: finite(100.0 * vol),
        ddev: finite(100.0 * ddev),
        mdd: finite(100.0 * mdd),
        sharpe: ratio(mar, vol),
        sortino: ratio(mar, ddev),
        calmar: ratio(mar, mdd),
        corr: benchmark.and_then(|b| stats::pearson(r, b)).map(|c| 100.0 * c),
        hr: hr.map(|h| 100.0 * h),
        pnl,
        ..Default::default()
    })
}

/// Largest peak-to-trough fall of compounded equity `Π(1 + R)` starting at 1,
/// as a positive fraction.
pub fn max_drawdown(r: &[f64]) -> f64 {
    let mut equity = 1.0;
    let mut peak = 1.0;
    let mut mdd: f64 = 0.0;
    for x in r {
        equity *= 1.0 + x;
        peak = f64::max(peak, equity);
        mdd = mdd.max(1.0 - equity / peak);
    }
    mdd
}

/// Breakeven cost as a raw ratio `Σ gross / Σ turnover`; multiply by 1e4 for
/// basis points. `None` for zero turnover.
pub fn breakeven_ratio(result: &StrategyResult) -> Option<f64> {
    let g: f64 = result.gross.iter().sum();
    let t: f64 = result.turnover.iter().sum();
    ratio(g, t)
}

pub fn breakeven_bps(result: &StrategyResult) -> Option<f64> {
    breakeven_ratio(result).map(|x| x / BPS)
}

/// Hit rate (fraction of positive days) and mean win over mean absolute loss.
pub fn hit_pnl(r: &[f64]) -> (Option<f64>, Option<f64>) {
    if r.is_empty() {
        return (None, None);
    }
    let pos: Vec<f64> = r.iter().copied().filter(|x| *x > 0.0).collect();
    let neg: Vec<f64> = r.iter().copied().filter(|x| *x < 0.0).map(f64::abs).collect();
    let hr = pos.len() as f64 / r.len() as f64;
    let pnl = match (stats::mean(&pos), stats::mean(&neg)) {
        (Some(p), Some(n)) if n > 0.0 => Some(p / n),
        _ => None,
    };
    (Some(hr), pnl)
}

/// Probabilistic Sharpe ratio (fraction) and minimum track record (days)
/// from the daily Sharpe ratio, skewness and (non-excess) kurtosis.
pub fn psr_mtr(r: &[f64], benchmark_sharpe: f64, confidence: f64) -> Result<(Option<f64>, Option<f64>)> {
    if r.len() < 3 {
        return Err(Error::InvalidArgument("PSR needs at least 3 observations".into()));
    }
    let s = stats::std(r).unwrap();
    if !(s > 0.0) {
        return Ok((None, None));
    }
    let sr = stats::mean(r).unwrap() / s;
    let g3 = stats::skewness(r).unwrap();
    let g4 = stats::kurtosis(r).unwrap();
    let v = 1.0 - g3 * sr + (g4 - 1.0) / 4.0 * sr * sr;
    if !(v > 0.0) {
        return Ok((None, None));
    }
    let normal = Normal::standard();
    let t = r.len() as f64;
    let psr = normal.cdf((sr - benchmark_sharpe) * (t - 1.0).sqrt() / v.sqrt());
    let mtr = if sr > benchmark_sharpe {
        let z = normal.inverse_cdf(confidence);
        Some((1.0 + v * (z / (sr - benchmark_sharpe)).powi(2)).ceil())
    } else {
        None
    };
    Ok((Some(psr), mtr))
}

/// Full report for a strategy: returns at cost `c_bps`, rescaled ex post to
/// `sigma_tgt`, with CORR measured against `long_only`.
pub fn evaluate(
    result: &StrategyResult,
    long_only: Option<&[f64]>,
    sigma_tgt: f64,
    c_bps: f64,
) -> Result<MetricsReport> {
    let raw = result.returns_at_cost(c_bps);
    let scaled = match scale_to_target(&raw, sigma_tgt) {
        Ok(s) => s,
        Err(Error::Degenerate(_)) => raw.clone(),
        Err(e) => return Err(e),
    };
    let mut rep = core_metrics(&scaled, long_only)?;
    rep.name = result.name.clone();
    rep.brk_bps = if result.costed { breakeven_bps(result) } else { None };
    if scaled.len() >= 3 {
        let (psr, mtr) = psr_mtr(&scaled, 0.0, 0.99)?;
        rep.psr = psr.map(|p| 100.0 * p);
        rep.mtr = mtr;
    }
    rep.sigma_tgt = sigma_tgt;
    rep.c_bps = c_bps;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSweepRow {
    pub c_bps: f64,
    #[serde(with = "undefined")]
    pub sharpe: Option<f64>,
}

/// Sharpe of the stored positions re-costed at each `c_bps`.
pub fn cost_sweep(result: &StrategyResult, costs: &[f64]) -> Vec<CostSweepRow> {
    costs
        .iter()
        .map(|&c| {
            let r = result.returns_at_cost(c);
            let sharpe = match (stats::mean(&r), stats::std(&r)) {
                (Some(m), Some(s)) => ratio(ANNUALISATION.sqrt() * m, s),
                _ => None,
            };
            CostSweepRow { c_bps: c, sharpe }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RollingSeries {
    pub values: Vec<Option<f64>>,
    pub ew_mean: Vec<Option<f64>>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RollingDiagnostics {
    pub sharpe: RollingSeries,
    pub corr: RollingSeries,
}

fn smooth(values: Vec<Option<f64>>) -> RollingSeries {
    let mut ew = EwStats::new(ROLLING_EW_SPAN);
    let mut ew_mean = Vec::with_capacity(values.len());
    let mut lower = Vec::with_capacity(values.len());
    let mut upper = Vec::with_capacity(values.len());
    for v in &values {
        match v {
            Some(x) => {
                ew.update(*x);
                ew_mean.push(Some(ew.mean()));
                lower.push(Some(ew.mean() - CI_Z * ew.std()));
                upper.push(Some(ew.mean() + CI_Z * ew.std()));
            }
            None => {
                ew_mean.push(None);
                lower.push(None);
                upper.push(None);
            }
        }
    }
    RollingSeries {
        values,
        ew_mean,
        lower,
        upper,
    }
}

/// Rolling `window`-day Sharpe of `r` and correlation with `rb`, plus
/// exponentially-weighted means and ±1.96 std bands of both. Entries before
/// a full window are missing.
pub fn rolling_diagnostics(r: &[f64], rb: &[f64], window: usize) -> Result<RollingDiagnostics> {
    if r.len() != rb.len() {
        return Err(Error::Shape("strategy and benchmark lengths differ".into()));
    }
    if window < 2 {
        return Err(Error::InvalidArgument("window must be >= 2".into()));
    }
    let n = r.len();
    let mut sharpe = vec![None; n];
    let mut corr = vec![None; n];
    for t in window.saturating_sub(1)..n {
        let w = &r[t + 1 - window..=t];
        let wb = &rb[t + 1 - window..=t];
        let s = stats::std(w).unwrap();
        sharpe[t] = ratio(ANNUALISATION.sqrt() * stats::mean(w).unwrap(), s);
        corr[t] = stats::pearson(w, wb);
    }
    Ok(RollingDiagnostics {
        sharpe: smooth(sharpe),
        corr: smooth(corr),
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) => format!("{x:.digits$}"),
        None => "undefined".to_string(),
    }
}

/// `key: value` lines.
pub fn report_text(rep: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "strategy: {}", rep.name);
    let _ = writeln!(s, "sigma_tgt: {}", rep.sigma_tgt);
    let _ = writeln!(s, "c_bps: {}", rep.c_bps);
    for (k, v, d) in [
        ("MAR %", rep.mar, 2),
        ("VOL %", rep.vol, 2),
        ("DDEV %", rep.ddev, 2),
        ("MDD %", rep.mdd, 2),
        ("Sharpe", rep.sharpe, 3),
        ("Sortino", rep.sortino, 3),
        ("Calmar", rep.calmar, 3),
        ("CORR %", rep.corr, 2),
        ("BRK bps", rep.brk_bps, 2),
        ("HR %", rep.hr, 2),
        ("PNL", rep.pnl, 3),
        ("PSR %", rep.psr, 2),
        ("MTR days", rep.mtr, 0),
    ] {
        let _ = writeln!(s, "{k}: {}", fmt_opt(v, d));
    }
    s
}

pub const TABLE_COLUMNS: [&str; 16] = [
    "strategy", "tuning", "vol_scaling", "MAR", "VOL", "DDEV", "MDD", "Sharpe", "Sortino", "Calmar", "CORR",
    "BRK", "HR", "PNL", "PSR", "MTR",
];

/// One table row per report; `tags` supplies the tuning and vol-scaling columns.
pub fn report_table_csv(rows: &[(MetricsReport, String, bool)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_COLUMNS)?;
    for (r, tuning, scaling) in rows {
        w.write_record([
            r.name.clone(),
            tuning.clone(),
            if *scaling { "yes".into() } else { "no".into() },
            fmt_opt(r.mar, 4),
            fmt_opt(r.vol, 4),
            fmt_opt(r.ddev, 4),
            fmt_opt(r.mdd, 4),
            fmt_opt(r.sharpe, 4),
            fmt_opt(r.sortino, 4),
            fmt_opt(r.calmar, 4),
            fmt_opt(r.corr, 4),
            fmt_opt(r.brk_bps, 4),
            fmt_opt(r.hr, 4),
            fmt_opt(r.pnl, 4),
            fmt_opt(r.psr, 4),
            fmt_opt(r.mtr, 0),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{CostModel, WeightsMatrix};
    use chrono::NaiveDate;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as RNormal};

    fn gaussian(n: usize, mu: f64, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = RNormal::new(mu, sd).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    fn toy_result(gross: Vec<f64>, turnover: Vec<f64>) -> StrategyResult {
        let n = gross.len();
        let d0 = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let dates: Vec<NaiveDate> = (0..n as u64).map(|k| d0 + chrono::Days::new(k)).collect();
        StrategyResult {
            name: "toy".into(),
            dates: dates.clone(),
            returns: gross.clone(),
            gross,
            turnover,
            prefactor: 1.0,
            costed: true,
            cost: CostModel::ZERO,
            weights: WeightsMatrix::new(dates, vec!["A".into()], Array2::zeros((n, 1))).unwrap(),
            config_hash: String::new(),
            seeds: vec![],
        }
    }

    #[test]
    fn constant_positive_returns() {
        let m = core_metrics(&[0.001; 50], None).unwrap();
        assert_eq!(m.mdd, Some(0.0));
        assert_eq!(m.calmar, None);
        assert_eq!(m.sharpe, None);
    }

    #[test]
    fn negation_symmetry() {
        let r = gaussian(300, 0.0005, 0.01, 1);
        let neg: Vec<f64> = r.iter().map(|x| -x).collect();
        let a = core_metrics(&r, None).unwrap();
        let b = core_metrics(&neg, None).unwrap();
        assert!((a.vol.unwrap() - b.vol.unwrap()).abs() < 1e-12);
        assert!((a.mar.unwrap() + b.mar.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_spreadsheet_recomputation() {
        let r = gaussian(500, 0.0004, 0.01, 2);
        let b = gaussian(500, 0.0002, 0.012, 3);
        let m = core_metrics(&r, Some(&b)).unwrap();
        let n = r.len() as f64;
        let mut sum = 0.0;
        for x in &r {
            sum += x;
        }
        let mean = sum / n;
        let mut ss = 0.0;
        let mut down = 0.0;
        for x in &r {
            ss += (x - mean) * (x - mean);
            if *x < 0.0 {
                down += x * x;
            }
        }
        let sd = (ss / n).sqrt();
        let mar = 252.0 * mean;
        let vol = 252f64.sqrt() * sd;
        let ddev = 252f64.sqrt() * (down / n).sqrt();
        let mut eq = 1.0;
        let mut pk = 1.0;
        let mut dd = 0.0;
        for x in &r {
            eq *= 1.0 + x;
            if eq > pk {
                pk = eq;
            }
            if (pk - eq) / pk > dd {
                dd = (pk - eq) / pk;
            }
        }
        let mb = b.iter().sum::<f64>() / n;
        let sb = (b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n).sqrt();
        let cov = r.iter().zip(&b).map(|(x, y)| (x - mean) * (y - mb)).sum::<f64>() / n;
        assert!((m.mar.unwrap() - 100.0 * mar).abs() < 1e-10);
        assert!((m.vol.unwrap() - 100.0 * vol).abs() < 1e-10);
        assert!((m.ddev.unwrap() - 100.0 * ddev).abs() < 1e-10);
        assert!((m.mdd.unwrap() - 100.0 * dd).abs() < 1e-10);
        assert!((m.sharpe.unwrap() - mar / vol).abs() < 1e-10);
        assert!((m.sortino.unwrap() - mar / ddev).abs() < 1e-10);
        assert!((m.calmar.unwrap() - mar / dd).abs() < 1e-10);
        assert!((m.corr.unwrap() - 100.0 * cov / (sd * sb)).abs() < 1e-10);
    }

    #[test]
    fn sharpe_scale_invariant() {
        let r = gaussian(200, 0.001, 0.01, 4);
        let base = core_metrics(&r, None).unwrap().sharpe.unwrap();
        for k in [0.5, 2.0, 10.0] {
            let s: Vec<f64> = r.iter().map(|x| k * x).collect();
            assert!((core_metrics(&s, None).unwrap().sharpe.unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn mdd_ignores_leading_flat_days() {
        let r = gaussian(200, 0.0, 0.02, 5);
        let mut padded = vec![0.0; 30];
        padded.extend(&r);
        assert!((max_drawdown(&r) - max_drawdown(&padded)).abs() < 1e-15);
    }

    #[test]
    fn breakeven_toy_and_self_consistency() {
        let res = toy_result(vec![6.0, 4.0], vec![1.5, 0.5]);
        assert_eq!(breakeven_ratio(&res), Some(5.0));
        let zero = toy_result(vec![1.0, 2.0], vec![0.0, 0.0]);
        assert_eq!(breakeven_bps(&zero), None);

        let g = gaussian(100, 0.002, 0.01, 6);
        let t: Vec<f64> = gaussian(100, 0.0, 1.0, 7).iter().map(|x| x.abs()).collect();
        let res = toy_result(g, t);
        let brk = breakeven_bps(&res).unwrap();
        let total: f64 = res.returns_at_cost(brk).iter().sum();
        assert!(total.abs() < 1e-8);
    }

    #[test]
    fn hit_and_pnl() {
        let alt: Vec<f64> = (0..10).map(|k| if k % 2 == 0 { 0.01 } else { -0.01 }).collect();
        let (hr, pnl) = hit_pnl(&alt);
        assert_eq!(hr, Some(0.5));
        assert!((pnl.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(hit_pnl(&[0.01, 0.02]).1, None);

        let r = gaussian(300, 0.0, 0.01, 8);
        let (hr, pnl) = hit_pnl(&r);
        let wins: Vec<f64> = r.iter().copied().filter(|x| *x > 0.0).collect();
        let losses: Vec<f64> = r.iter().copied().filter(|x| *x < 0.0).collect();
        assert_eq!(hr, Some(wins.len() as f64 / 300.0));
        let expect = (wins.iter().sum::<f64>() / wins.len() as f64)
            / (losses.iter().map(|x| -x).sum::<f64>() / losses.len() as f64);
        assert!((pnl.unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn psr_cases() {
        let alt: Vec<f64> = (0..100).map(|k| if k % 2 == 0 { 0.01 } else { -0.01 }).collect();
        let (psr, mtr) = psr_mtr(&alt, 0.0, 0.99).unwrap();
        assert!((psr.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(mtr, None);
        assert!(psr_mtr(&[0.1, 0.2], 0.0, 0.99).is_err());

        let r = gaussian(750, 0.001, 0.01, 9);
        let (psr, mtr) = psr_mtr(&r, 0.0, 0.99).unwrap();
        let sr = stats::mean(&r).unwrap() / stats::std(&r).unwrap();
        let v = 1.0 - stats::skewness(&r).unwrap() * sr + (stats::kurtosis(&r).unwrap() - 1.0) / 4.0 * sr * sr;
        let z = sr * (749f64).sqrt() / v.sqrt();
        // Φ via the complementary error function.
        let oracle = 0.5 * statrs::function::erf::erfc(-z / 2f64.sqrt());
        assert!((psr.unwrap() - oracle).abs() < 1e-10);
        // MTR is the first track length at which PSR reaches 99%.
        let mtr = mtr.unwrap();
        let psr_at = |t: f64| Normal::standard().cdf(sr * (t - 1.0).sqrt() / v.sqrt());
        assert!(psr_at(mtr) >= 0.99);
        assert!(psr_at(mtr - 1.0) < 0.99);
    }

    #[test]
    fn psr_falls_with_fatter_tails() {
        let base = gaussian(500, 0.0008, 0.01, 10);
        let m = stats::mean(&base).unwrap();
        // Push mass into the tails while preserving mean and variance.
        let mut fat = base.clone();
        for x in fat.iter_mut() {
            let d = *x - m;
            *x = m + d * (d.abs() / 0.01).sqrt();
        }
        let s_b = stats::std(&base).unwrap();
        let s_f = stats::std(&fat).unwrap();
        let mf = stats::mean(&fat).unwrap();
        let fat: Vec<f64> = fat.iter().map(|x| m + (x - mf) * s_b / s_f).collect();
        assert!(stats::kurtosis(&fat).unwrap() > stats::kurtosis(&base).unwrap());
        let sym = |r: &[f64]| {
            let mut v = r.to_vec();
            // Symmetrise to remove the skew contribution.
            v.extend(r.iter().map(|x| 2.0 * m - x));
            v
        };
        let pb = psr_mtr(&sym(&base), 0.0, 0.99).unwrap().0.unwrap();
        let pf = psr_mtr(&sym(&fat), 0.0, 0.99).unwrap().0.unwrap();
        assert!(pf <= pb + 1e-12, "{pf} vs {pb}");
    }

    #[test]
    fn cost_sweep_properties() {
        let g = gaussian(300, 0.002, 0.01, 11);
        let t: Vec<f64> = gaussian(300, 0.0, 1.0, 12).iter().map(|x| x.abs() + 0.1).collect();
        let mut res = toy_result(g, t);
        res.returns = res.returns_at_cost(0.0);
        let rows = cost_sweep(&res, &[0.0, 0.5, 1.0, 2.0, 5.0]);
        let core = core_metrics(&res.returns, None).unwrap().sharpe.unwrap();
        assert!((rows[0].sharpe.unwrap() - core).abs() < 1e-12);
        for w in rows.windows(2) {
            assert!(w[1].sharpe.unwrap() <= w[0].sharpe.unwrap());
        }
        let mut lo = res.clone();
        lo.costed = false;
        let lo_rows = cost_sweep(&lo, &[0.0, 5.0]);
        assert_eq!(lo_rows[0].sharpe, lo_rows[1].sharpe);
    }

    #[test]
    fn rolling_cases() {
        let r = gaussian(600, 0.0, 0.01, 13);
        let d = rolling_diagnostics(&r, &r, ROLLING_WINDOW).unwrap();
        assert!(d.corr.values[..503].iter().all(Option::is_none));
        assert!(d.corr.values[503..].iter().all(|c| (c.unwrap() - 1.0).abs() < 1e-12));
        let short = rolling_diagnostics(&r[..300], &r[..300], ROLLING_WINDOW).unwrap();
        assert!(short.sharpe.values.iter().all(Option::is_none));

        let a = gaussian(2000, 0.0, 0.01, 14);
        let b = gaussian(2000, 0.0, 0.01, 15);
        let d = rolling_diagnostics(&a, &b, ROLLING_WINDOW).unwrap();
        let defined: Vec<f64> = d.corr.values.iter().flatten().copied().collect();
        let inside = defined.iter().filter(|c| c.abs() < 0.2).count();
        assert!(inside as f64 / defined.len() as f64 > 0.9);
        for t in 503..2000 {
            assert!(d.corr.lower[t].unwrap() <= d.corr.ew_mean[t].unwrap());
        }
    }

    #[test]
    fn undefined_serialises_as_string() {
        let m = core_metrics(&[0.001; 10], None).unwrap();
        let j = serde_json::to_string(&m).unwrap();
        assert!(j.contains("\"calmar\":\"undefined\""));
        assert!(!j.contains("NaN"));
        let back: MetricsReport = serde_json::from_str(&j).unwrap();
        assert_eq!(back, m);
        let txt = report_text(&m);
        assert!(txt.contains("Calmar: undefined"));
        let table = report_table_csv(&[(m, "HB".into(), true)]).unwrap();
        assert!(table.starts_with("strategy,tuning,vol_scaling,MAR"));
    }
}
