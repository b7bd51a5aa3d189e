//! Trainable-parameter counts as functions of universe size and hidden
//! width, with log-log slope estimates.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::fe::{count_fe_parameters, FeConfig};
use crate::model::{DinConfig, DinModel};
use crate::ps::{PsConfig, PsKind};

pub const FE_ASSET_GRID: [usize; 4] = [10, 20, 40, 80];
pub const PS_HIDDEN_GRID: [usize; 4] = [32, 64, 96, 128];
pub const COMPLEXITY_N_FILTERS: usize = 16;
/// Universe size at which sizer exponents are reported by default.
pub const PS_REFERENCE_ASSETS: usize = 100;

/// OLS slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(NnError::Config("slope needs >= 2 positive (x, y) pairs".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}

/// Lowest and highest settings of each FE's structural hyperparameter.
pub fn fe_bounds(n_filters: usize) -> Vec<(&'static str, [FeConfig; 2])> {
    vec![
        (
            "OrigCIM",
            [1, 20].map(|ts_filter_length| FeConfig::OrigCim {
                n_filters,
                ts_filter_length,
            }),
        ),
        (
            "FlexCIM",
            [1, 9].map(|n_filter_layers| FeConfig::FlexCim {
                n_filters,
                n_filter_layers,
            }),
        ),
        ("DeepLOB", [FeConfig::DeepLob { n_filters }; 2]),
        (
            "AxialLOB",
            [1, 4].map(|n_axial_heads| FeConfig::AxialLob {
                n_filters,
                n_axial_heads,
            }),
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeComplexity {
    pub label: String,
    pub n_assets: Vec<usize>,
    pub low: Vec<usize>,
    pub high: Vec<usize>,
    /// Mean of `low` and `high`.
    pub average: Vec<f64>,
    pub slope: f64,
}

/// FE parameter counts over `grid` universe sizes.
pub fn fe_complexity(n_filters: usize, grid: &[usize]) -> Result<Vec<FeComplexity>> {
    fe_bounds(n_filters)
        .into_iter()
        .map(|(label, [lo, hi])| {
            let low = grid.iter().map(|&a| count_fe_parameters(&lo, a)).collect::<Result<Vec<_>>>()?;
            let high = grid.iter().map(|&a| count_fe_parameters(&hi, a)).collect::<Result<Vec<_>>>()?;
            let average: Vec<f64> = low.iter().zip(&high).map(|(a, b)| (a + b) as f64 / 2.0).collect();
            let x: Vec<f64> = grid.iter().map(|&a| a as f64).collect();
            Ok(FeComplexity {
                label: label.to_string(),
                n_assets: grid.to_vec(),
                slope: loglog_slope(&x, &average)?,
                low,
                high,
                average,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsComplexity {
    pub label: String,
    pub n_assets: usize,
    pub hidden: Vec<usize>,
    /// `N_P(DIN) − N_P(FE)` per hidden size.
    pub counts: Vec<usize>,
    pub slope: f64,
}

/// Sizer parameter counts by differencing full models against their FE.
pub fn ps_complexity(kind: PsKind, n_assets: usize, hidden: &[usize]) -> Result<PsComplexity> {
    let fe = FeConfig::DeepLob { n_filters: 4 };
    let fe_count = count_fe_parameters(&fe, n_assets)?;
    let counts = hidden
        .iter()
        .map(|&h| {
            let ps = match kind {
                PsKind::Lstm => PsConfig::lstm(h, 0.0),
                PsKind::Tft => PsConfig::tft(h, 0.0),
            };
            let m = DinModel::new(DinConfig {
                fe,
                ps,
                n_assets,
                n_static: 1,
                seed: 0,
            })?;
            Ok(m.count_parameters() - fe_count)
        })
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<f64> = hidden.iter().map(|&h| h as f64).collect();
    let y: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    Ok(PsComplexity {
        label: kind.label().to_string(),
        n_assets,
        hidden: hidden.to_vec(),
        slope: loglog_slope(&x, &y)?,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.7)).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 1.7).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn fe_slopes() {
        let rows = fe_complexity(COMPLEXITY_N_FILTERS, &FE_ASSET_GRID).unwrap();
        let get = |l: &str| rows.iter().find(|r| r.label == l).unwrap().slope;
        assert!((get("OrigCIM") - 1.0).abs() < 0.15);
        assert!(get("FlexCIM").abs() < 1e-12);
        assert!(get("DeepLOB").abs() < 1e-12);
    }

    #[test]
    fn lstm_count_matches_formula() {
        let p = ps_complexity(PsKind::Lstm, 10, &[8, 16]).unwrap();
        assert_eq!(p.counts[0], 4 * 8 * (10 + 8 + 1) + 8 * 10 + 10);
    }
}
