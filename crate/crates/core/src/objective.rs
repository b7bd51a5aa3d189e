//! Cost-adjusted portfolio returns and the Sharpe-based training loss.

use std::io::Write;

use chrono::NaiveDate;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{ReturnsPanel, VolPanel, DATE_FORMAT};
use crate::stats;
use crate::ANNUALISATION;

/// One basis point.
pub const BPS: f64 = 1e-4;

/// Proportional cost `c_bps` (basis points of traded vol-scaled notional)
/// and correlation penalty `k`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub c_bps: f64,
    pub k: f64,
}

impl CostModel {
    pub fn new(c_bps: f64, k: f64) -> Result<Self> {
        if !(c_bps >= 0.0) || !(k >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cost coefficients must be >= 0 (C={c_bps}, K={k})"
            )));
        }
        Ok(Self { c_bps, k })
    }

    pub const ZERO: CostModel = CostModel { c_bps: 0.0, k: 0.0 };
}

/// Positions `w[t, i]` in `[-1, 1]` decided at the close of `dates[t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsMatrix {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub values: Array2<f64>,
}

impl WeightsMatrix {
    pub fn new(dates: Vec<NaiveDate>, assets: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (dates.len(), assets.len()) {
            return Err(Error::Shape(format!(
                "weights {:?} vs {} dates x {} assets",
                values.dim(),
                dates.len(),
                assets.len()
            )));
        }
        Ok(Self { dates, assets, values })
    }

    /// Equal unit long positions.
    pub fn long_only(dates: Vec<NaiveDate>, assets: Vec<String>) -> Self {
        let values = Array2::ones((dates.len(), assets.len()));
        Self { dates, assets, values }
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn write_csv<W: Write>(&self, out: W, config_hash: &str) -> Result<()> {
        let mut out = out;
        writeln!(out, "# config_hash={config_hash}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "asset", "weight"])?;
        for (t, d) in self.dates.iter().enumerate() {
            let ds = d.format(DATE_FORMAT).to_string();
            for (i, a) in self.assets.iter().enumerate() {
                w.write_record([ds.as_str(), a.as_str(), &format!("{}", self.values[[t, i]])])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Realised strategy series. Return `k` is earned over `dates[k]` from
/// positions set on the previous row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub name: String,
    pub dates: Vec<NaiveDate>,
    /// Cost-adjusted portfolio returns.
    pub returns: Vec<f64>,
    /// `Σ_i s[t,i] r[t+1,i]` with `s` the scaled position.
    pub gross: Vec<f64>,
    /// `Σ_i |s[t,i] − s[t−1,i]|`.
    pub turnover: Vec<f64>,
    /// Multiplier turning `gross` and cost into returns (`σ_tgt / N`).
    pub prefactor: f64,
    /// Whether costs apply to this strategy (Long-only is reported costless).
    pub costed: bool,
    pub cost: CostModel,
    pub weights: WeightsMatrix,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

impl StrategyResult {
    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    /// Returns recomputed at cost `c_bps`; costless strategies ignore it.
    pub fn returns_at_cost(&self, c_bps: f64) -> Vec<f64> {
        let c = if self.costed { c_bps * BPS } else { 0.0 };
        self.gross
            .iter()
            .zip(&self.turnover)
            .map(|(g, to)| self.prefactor * (g - c * to))
            .collect()
    }

    /// Turnover in units of the prefactor-scaled portfolio.
    pub fn scaled_turnover(&self) -> Vec<f64> {
        self.turnover.iter().map(|t| self.prefactor * t).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "# config_hash={}", self.config_hash)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "return", "turnover"])?;
        for k in 0..self.len() {
            w.write_record([
                self.dates[k].format(DATE_FORMAT).to_string(),
                format!("{}", self.returns[k]),
                format!("{}", self.turnover[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cost-adjusted returns of positions `w` over the panel:
///
/// `R[t+1] = (σ_tgt/N) Σ_i [ s[t,i] r[t+1,i] − C |s[t,i] − s[t−1,i]| ]`
///
/// with `s = w/σ` (annualised σ) under asset vol scaling and `s = w/σ_tgt`
/// otherwise. Positions before the first weight row are zero. Weight rows
/// must be consecutive panel rows, each followed by another panel row.
pub fn portfolio_returns(
    w: &WeightsMatrix,
    returns: &ReturnsPanel,
    vol: &VolPanel,
    sigma_tgt: f64,
    cost: CostModel,
    asset_vol_scaling: bool,
) -> Result<StrategyResult> {
    if w.assets != returns.assets || returns.assets != vol.assets {
        return Err(Error::Shape("weights, returns and vol assets differ".into()));
    }
    if returns.dates != vol.dates {
        return Err(Error::Shape("returns and vol dates differ".into()));
    }
    if w.n_rows() == 0 {
        return Err(Error::InvalidArgument("empty weights".into()));
    }
    let first = returns
        .row_of(w.dates[0])
        .ok_or_else(|| Error::InvalidArgument(format!("weight date {} not in panel", w.dates[0])))?;
    let last = first + w.n_rows();
    if last >= returns.n_rows() || returns.dates[first..last] != w.dates[..] {
        return Err(Error::InvalidArgument(
            "weight dates must be consecutive panel rows followed by a return".into(),
        ));
    }
    let n_a = w.assets.len();
    let prefactor = sigma_tgt / n_a as f64;
    let c = cost.c_bps * BPS;
    let mut prev = vec![0.0; n_a];
    let mut out_dates = Vec::with_capacity(w.n_rows());
    let mut gross = Vec::with_capacity(w.n_rows());
    let mut turnover = Vec::with_capacity(w.n_rows());
    let mut rets = Vec::with_capacity(w.n_rows());
    for k in 0..w.n_rows() {
        let t = first + k;
        let mut g = 0.0;
        let mut to = 0.0;
        for i in 0..n_a {
            let wi = w.values[[k, i]];
            let s = if asset_vol_scaling {
                let sigma = vol.values[[t, i]];
                if wi == 0.0 {
                    0.0
                } else if sigma > 0.0 {
                    wi / sigma
                } else {
                    return Err(Error::ZeroVolatility {
                        asset: w.assets[i].clone(),
                        date: w.dates[k],
                    });
                }
            } else {
                wi / sigma_tgt
            };
            let r = returns.values[[t + 1, i]];
            let r = if r.is_finite() { r } else { 0.0 };
            g += s * r;
            to += (s - prev[i]).abs();
            prev[i] = s;
        }
        out_dates.push(returns.dates[t + 1]);
        gross.push(g);
        turnover.push(to);
        rets.push(prefactor * (g - c * to));
    }
    Ok(StrategyResult {
        name: String::new(),
        dates: out_dates,
        returns: rets,
        gross,
        turnover,
        prefactor,
        costed: true,
        cost,
        weights: w.clone(),
        config_hash: String::new(),
        seeds: Vec::new(),
    })
}

/// `−√252 · mean(R_p)/std(R_p) + K·|ρ(R_p, R_b)|` with population std.
///
/// A constant benchmark has no defined correlation; the penalty is then 0.
pub fn sharpe_loss(rp: &[f64], rb: &[f64], k: f64) -> Result<f64> {
    if rp.len() < 2 {
        return Err(Error::InvalidArgument("loss needs at least 2 returns".into()));
    }
    if k > 0.0 && rb.len() != rp.len() {
        return Err(Error::Shape("portfolio and benchmark lengths differ".into()));
    }
    let m = stats::mean(rp).unwrap();
    let s = stats::std(rp).unwrap();
    if !(s > 0.0) {
        return Err(Error::Degenerate("portfolio returns have zero standard deviation".into()));
    }
    let mut loss = -ANNUALISATION.sqrt() * m / s;
    if k > 0.0 {
        if let Some(rho) = stats::pearson(rp, rb) {
            loss += k * rho.abs();
        }
    }
    Ok(loss)
}

/// Analytic gradient of [`sharpe_loss`] with respect to each `R_p` entry.
pub fn sharpe_loss_grad(rp: &[f64], rb: &[f64], k: f64) -> Result<Vec<f64>> {
    sharpe_loss(rp, rb, k)?;
    let n = rp.len() as f64;
    let m = stats::mean(rp).unwrap();
    let s = stats::std(rp).unwrap();
    let sq = ANNUALISATION.sqrt();
    let mut grad: Vec<f64> = rp
        .iter()
        .map(|r| -sq * (1.0 / (n * s) - m * (r - m) / (n * s * s * s)))
        .collect();
    if k > 0.0 {
        if let Some(rho) = stats::pearson(rp, rb) {
            let mb = stats::mean(rb).unwrap();
            let sb = stats::std(rb).unwrap();
            let sign = rho.signum();
            for (j, g) in grad.iter_mut().enumerate() {
                let d = (rb[j] - mb) / (n * s * sb) - rho * (rp[j] - m) / (n * s * s);
                *g += k * sign * d;
            }
        }
    }
    Ok(grad)
}

/// Ex-post rescaling to annualised volatility `sigma_tgt`; reporting only.
pub fn scale_to_target(r: &[f64], sigma_tgt: f64) -> Result<Vec<f64>> {
    let s = stats::std(r).ok_or_else(|| Error::InvalidArgument("empty series".into()))?;
    if !(s > 0.0) {
        return Err(Error::Degenerate("series has zero realised volatility".into()));
    }
    let f = sigma_tgt / (s * ANNUALISATION.sqrt());
    Ok(r.iter().map(|x| x * f).collect())
}

/// Elementwise mean of member weight matrices.
pub fn ensemble_weights(members: &[WeightsMatrix]) -> Result<WeightsMatrix> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidArgument("no ensemble members".into()))?;
    let mut acc = Array2::<f64>::zeros(first.values.dim());
    for m in members {
        if m.dates != first.dates || m.assets != first.assets || m.values.dim() != first.values.dim() {
            return Err(Error::Shape("ensemble members are not aligned".into()));
        }
        acc += &m.values;
    }
    acc /= members.len() as f64;
    Ok(WeightsMatrix {
        dates: first.dates.clone(),
        assets: first.assets.clone(),
        values: acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::{business_days, AssetClass, Panel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panels(r: Array2<f64>, v: Array2<f64>) -> (ReturnsPanel, VolPanel) {
        let n = r.nrows();
        let dates = business_days(NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(), n);
        let assets: Vec<String> = (0..r.ncols()).map(|i| format!("A{i}")).collect();
        let rp = ReturnsPanel(Panel::dense(dates.clone(), assets.clone(), r, AssetClass::Synthetic).unwrap());
        let vp = VolPanel {
            dates,
            assets,
            values: v,
            span: 63,
        };
        (rp, vp)
    }

    fn weights(rp: &ReturnsPanel, rows: std::ops::Range<usize>, values: Array2<f64>) -> WeightsMatrix {
        WeightsMatrix::new(rp.dates[rows].to_vec(), rp.assets.clone(), values).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_returns() {
        let (r, v) = panels(Array2::from_elem((5, 2), 0.01), Array2::from_elem((5, 2), 0.2));
        let w = weights(&r, 0..4, Array2::zeros((4, 2)));
        let res = portfolio_returns(&w, &r, &v, 0.15, CostModel::new(5.0, 0.0).unwrap(), true).unwrap();
        assert!(res.returns.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn identity_scaling_returns_raw_returns() {
        let rets = Array2::from_shape_vec((4, 1), vec![0.01, -0.02, 0.03, 0.005]).unwrap();
        let (r, v) = panels(rets.clone(), Array2::from_elem((4, 1), 0.15));
        let w = weights(&r, 0..3, Array2::ones((3, 1)));
        let res = portfolio_returns(&w, &r, &v, 0.15, CostModel::ZERO, true).unwrap();
        for k in 0..3 {
            assert!((res.returns[k] - rets[[k + 1, 0]]).abs() < 1e-15);
        }
        assert_eq!(res.dates[0], r.dates[1]);
    }

    #[test]
    fn first_day_cost_by_hand() {
        let (r, v) = panels(Array2::zeros((3, 2)), Array2::from_elem((3, 2), 0.15));
        let mut wv = Array2::zeros((1, 2));
        wv[[0, 0]] = 1.0;
        let w = weights(&r, 0..1, wv);
        let res = portfolio_returns(&w, &r, &v, 0.15, CostModel::new(1.0, 0.0).unwrap(), true).unwrap();
        let expected = -1e-4 * (0.15 / 2.0) / 0.15;
        assert!((res.returns[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, a) = (4, 2);
        let rets = Array2::from_shape_fn((n, a), |_| rng.random_range(-0.03..0.03));
        let vols = Array2::from_shape_fn((n, a), |_| rng.random_range(0.05..0.4));
        let wv = Array2::from_shape_fn((3, a), |_| rng.random_range(-1.0..1.0));
        let (r, v) = panels(rets.clone(), vols.clone());
        let w = weights(&r, 0..3, wv.clone());
        for scaling in [true, false] {
            let res = portfolio_returns(&w, &r, &v, 0.15, CostModel::new(2.0, 0.0).unwrap(), scaling).unwrap();
            for t in 0..3 {
                let mut acc = 0.0;
                for i in 0..a {
                    let denom = |tt: usize| if scaling { vols[[tt, i]] } else { 0.15 };
                    let s = wv[[t, i]] / denom(t);
                    let sp = if t == 0 { 0.0 } else { wv[[t - 1, i]] / denom(t - 1) };
                    acc += s * rets[[t + 1, i]] - 2e-4 * (s - sp).abs();
                }
                let expect = 0.15 / a as f64 * acc;
                assert!((res.returns[t] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unscaled_positions_act_directly() {
        let rets = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 0.02, -0.01]).unwrap();
        let (r, v) = panels(rets, Array2::from_elem((2, 2), 0.3));
        let w = weights(&r, 0..1, Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap());
        let res = portfolio_returns(&w, &r, &v, 0.15, CostModel::ZERO, false).unwrap();
        assert!((res.returns[0] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn zero_vol_on_traded_cell_is_an_error() {
        let (r, v) = panels(Array2::zeros((3, 1)), Array2::zeros((3, 1)));
        let w = weights(&r, 0..2, Array2::ones((2, 1)));
        assert!(matches!(
            portfolio_returns(&w, &r, &v, 0.15, CostModel::ZERO, true),
            Err(Error::ZeroVolatility { .. })
        ));
    }

    #[test]
    fn doubling_weights_doubles_gross_and_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rets = Array2::from_shape_fn((30, 3), |_| rng.random_range(-0.03..0.03));
        let vols = Array2::from_shape_fn((30, 3), |_| rng.random_range(0.05..0.4));
        let wv = Array2::from_shape_fn((29, 3), |_| rng.random_range(-0.5..0.5));
        let (r, v) = panels(rets, vols);
        let a = portfolio_returns(&weights(&r, 0..29, wv.clone()), &r, &v, 0.15, CostModel::ZERO, true).unwrap();
        let b = portfolio_returns(&weights(&r, 0..29, &wv * 2.0), &r, &v, 0.15, CostModel::ZERO, true).unwrap();
        for k in 0..29 {
            assert!((b.gross[k] - 2.0 * a.gross[k]).abs() < 1e-12);
            assert!((b.turnover[k] - 2.0 * a.turnover[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_special_cases() {
        let rp = [0.01, -0.01, 0.02, -0.02];
        assert!(sharpe_loss(&rp, &rp, 0.0).unwrap().abs() < 1e-15);
        let rp = [0.01, 0.03, -0.01, 0.02];
        let no_k = sharpe_loss(&rp, &rp, 0.0).unwrap();
        let with_k = sharpe_loss(&rp, &rp, 2.0).unwrap();
        assert!((with_k - no_k - 2.0).abs() < 1e-12);
        assert!(matches!(sharpe_loss(&[0.01; 5], &[0.0; 5], 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn loss_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rp: Vec<f64> = (0..100).map(|_| rng.random_range(-0.02..0.025)).collect();
        let rb: Vec<f64> = rp.iter().map(|x| 0.5 * x + rng.random_range(-0.02..0.02)).collect();
        // Two-pass computation written out independently.
        let n = 100.0;
        let mp: f64 = rp.iter().sum::<f64>() / n;
        let mb: f64 = rb.iter().sum::<f64>() / n;
        let vp: f64 = rp.iter().map(|x| (x - mp).powi(2)).sum::<f64>() / n;
        let vb: f64 = rb.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
        let cv: f64 = rp.iter().zip(&rb).map(|(x, y)| (x - mp) * (y - mb)).sum::<f64>() / n;
        let expect = -(252f64).sqrt() * mp / vp.sqrt() + (cv / (vp.sqrt() * vb.sqrt())).abs();
        assert!((sharpe_loss(&rp, &rb, 1.0).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rp: Vec<f64> = (0..40).map(|_| rng.random_range(-0.02..0.03)).collect();
        let rb: Vec<f64> = rp.iter().map(|x| -0.7 * x + rng.random_range(-0.01..0.01)).collect();
        let g = sharpe_loss_grad(&rp, &rb, 1.5).unwrap();
        for j in [0, 7, 39] {
            let h = 1e-7;
            let mut up = rp.clone();
            up[j] += h;
            let mut dn = rp.clone();
            dn[j] -= h;
            let fd = (sharpe_loss(&up, &rb, 1.5).unwrap() - sharpe_loss(&dn, &rb, 1.5).unwrap()) / (2.0 * h);
            assert!((g[j] - fd).abs() / fd.abs().max(1e-3) < 1e-6, "{} vs {fd}", g[j]);
        }
    }

    #[test]
    fn shift_changes_only_mean_term() {
        let rp = [0.01, 0.03, -0.01, 0.02, 0.0];
        let shifted: Vec<f64> = rp.iter().map(|x| x + 0.005).collect();
        let s = stats::std(&rp).unwrap();
        let delta = sharpe_loss(&shifted, &rp, 1.0).unwrap() - sharpe_loss(&rp, &rp, 1.0).unwrap();
        assert!((delta - (-(252f64).sqrt() * 0.005 / s)).abs() < 1e-10);
    }

    #[test]
    fn higher_cost_weakly_increases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rets = Array2::from_shape_fn((60, 2), |_| rng.random_range(-0.03..0.03));
        let wv = Array2::from_shape_fn((59, 2), |_| rng.random_range(-1.0..1.0));
        let (r, v) = panels(rets, Array2::from_elem((60, 2), 0.2));
        let w = weights(&r, 0..59, wv);
        let mut last = f64::NEG_INFINITY;
        for c in [0.0, 0.5, 1.0, 2.0, 5.0] {
            let res = portfolio_returns(&w, &r, &v, 0.15, CostModel::new(c, 0.0).unwrap(), true).unwrap();
            let l = sharpe_loss(&res.returns, &res.returns, 0.0).unwrap();
            assert!(l >= last);
            last = l;
        }
    }

    #[test]
    fn scale_to_target_properties() {
        let r = [0.01, -0.004, 0.02, 0.003, -0.011];
        let s = scale_to_target(&r, 0.15).unwrap();
        let vol = stats::std(&s).unwrap() * 252f64.sqrt();
        assert!((vol - 0.15).abs() < 1e-10);
        let sharpe = |x: &[f64]| stats::mean(x).unwrap() / stats::std(x).unwrap();
        assert!((sharpe(&s) - sharpe(&r)).abs() < 1e-12);
        let doubled: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        let s2 = scale_to_target(&doubled, 0.15).unwrap();
        assert!((s2[0] / doubled[0] - 0.5 * s[0] / r[0]).abs() < 1e-12);
        assert!(scale_to_target(&[0.01; 4], 0.15).is_err());
    }

    #[test]
    fn ensemble_is_elementwise_mean() {
        let dates = business_days(NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(), 1);
        let mk = |x: f64| WeightsMatrix::new(dates.clone(), vec!["A".into()], Array2::from_elem((1, 1), x)).unwrap();
        let e = ensemble_weights(&[mk(1.0), mk(-1.0), mk(0.0), mk(0.0), mk(0.0)]).unwrap();
        assert_eq!(e.values[[0, 0]], 0.0);
        let same = ensemble_weights(&vec![mk(0.3); 5]).unwrap();
        assert!((same.values[[0, 0]] - 0.3).abs() < 1e-15);
        let other = WeightsMatrix::new(dates.clone(), vec!["B".into()], Array2::zeros((1, 1))).unwrap();
        assert!(ensemble_weights(&[mk(1.0), other]).is_err());
    }

    #[test]
    fn csv_outputs_carry_hash() {
        let (r, v) = panels(Array2::from_elem((3, 1), 0.01), Array2::from_elem((3, 1), 0.15));
        let w = weights(&r, 0..2, Array2::ones((2, 1)));
        let mut res = portfolio_returns(&w, &r, &v, 0.15, CostModel::ZERO, true).unwrap();
        res.config_hash = "abc".into();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("# config_hash=abc\ndate,return,turnover\n"));
        let mut buf = Vec::new();
        w.write_csv(&mut buf, "abc").unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
