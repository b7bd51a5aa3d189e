//! Expanding-window splits and model input tensors.

use std::ops::Range;

use chrono::{Datelike, Months, NaiveDate};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{ReturnsPanel, VolPanel};
use crate::ANNUALISATION;

pub const N_DATE_FEATURES: usize = 6;
pub const DEFAULT_SIGMA_TGT: f64 = 0.15;

/// Closed date interval plus the matching half-open row range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateSpan {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub rows: Range<usize>,
}

impl DateSpan {
    fn from_rows(dates: &[NaiveDate], rows: Range<usize>) -> Self {
        Self {
            start: dates[rows.start],
            end: dates[rows.end - 1],
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub index: usize,
    pub train: DateSpan,
    pub valid: DateSpan,
    pub test: DateSpan,
}

impl Split {
    /// Rows used for fitting and early stopping, i.e. everything before the test.
    pub fn fit_rows(&self) -> Range<usize> {
        self.train.rows.start..self.valid.rows.end
    }
}

/// Fraction of the pre-test window held out for validation.
pub const VALID_FRACTION: f64 = 0.10;

/// Tiles the period from `first_test_start` with `step_years` test blocks.
/// Each training window expands from the first date up to the test start;
/// the last 10% of its rows form the validation set.
pub fn make_splits(dates: &[NaiveDate], first_test_start: NaiveDate, step_years: u32) -> Result<Vec<Split>> {
    if step_years == 0 {
        return Err(Error::InvalidArgument("step_years must be positive".into()));
    }
    if dates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("dates must be strictly increasing".into()));
    }
    let n = dates.len();
    let first = dates.partition_point(|d| *d < first_test_start);
    if first >= n {
        return Err(Error::InvalidArgument(format!(
            "no dates on or after first test start {first_test_start}"
        )));
    }
    if first < 10 {
        return Err(Error::InvalidArgument(format!(
            "only {first} rows before first test start {first_test_start}"
        )));
    }
    let mut splits = Vec::new();
    let mut boundary = first_test_start;
    let mut start_row = first;
    while start_row < n {
        let next = boundary
            .checked_add_months(Months::new(12 * step_years))
            .ok_or_else(|| Error::InvalidArgument("date overflow".into()))?;
        let end_row = dates.partition_point(|d| *d < next);
        if end_row > start_row {
            let n_valid = ((start_row as f64) * VALID_FRACTION).round() as usize;
            let n_valid = n_valid.max(1);
            let valid_start = start_row - n_valid;
            splits.push(Split {
                index: splits.len(),
                train: DateSpan::from_rows(dates, 0..valid_start),
                valid: DateSpan::from_rows(dates, valid_start..start_row),
                test: DateSpan::from_rows(dates, start_row..end_row),
            });
        }
        boundary = next;
        start_row = end_row;
    }
    Ok(splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequencingPolicy {
    pub sequence_length: usize,
    pub batch_size: usize,
    pub shuffle: bool,
}

impl Default for SequencingPolicy {
    fn default() -> Self {
        Self {
            sequence_length: 100,
            batch_size: 100,
            shuffle: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stride {
    /// Non-overlapping `T`-row blocks (training and validation).
    Block,
    /// One window per prediction row; only the last row is used (inference).
    Rolling,
}

/// Per-row model tensors for a whole panel; batches are views into these.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub dates: Vec<NaiveDate>,
    /// `r[t] / σ_daily[t]`.
    pub x: Array2<f64>,
    /// `(σ_tgt / σ[t]) · r[t+1]`; zero on the final row.
    pub y1: Array2<f64>,
    /// `σ_tgt / σ[t]`; zero where σ is zero.
    pub y2: Array2<f64>,
    /// Raw next-day returns, zero on the final row.
    pub next_returns: Array2<f64>,
    pub date_features: Array2<f64>,
    pub static_context: usize,
    pub sigma_tgt: f64,
    zero_vol: Array2<bool>,
    assets: Vec<String>,
}

impl ModelInputs {
    pub fn new(
        returns: &ReturnsPanel,
        vol: &VolPanel,
        sigma_tgt: f64,
        static_context: usize,
        origin: NaiveDate,
    ) -> Result<Self> {
        if returns.values.dim() != vol.values.dim() || returns.dates != vol.dates {
            return Err(Error::Shape("returns and volatility panels are not aligned".into()));
        }
        if !(sigma_tgt > 0.0) {
            return Err(Error::InvalidArgument("sigma_tgt must be positive".into()));
        }
        let (n, a) = returns.values.dim();
        let ann = ANNUALISATION.sqrt();
        let mut x = Array2::zeros((n, a));
        let mut y1 = Array2::zeros((n, a));
        let mut y2 = Array2::zeros((n, a));
        let mut next_returns = Array2::zeros((n, a));
        let mut zero_vol = Array2::from_elem((n, a), false);
        for t in 0..n {
            for i in 0..a {
                let sigma = vol.values[[t, i]];
                let r = returns.values[[t, i]];
                let r = if r.is_finite() { r } else { 0.0 };
                if sigma > 0.0 {
                    x[[t, i]] = r / (sigma / ann);
                    y2[[t, i]] = sigma_tgt / sigma;
                } else {
                    zero_vol[[t, i]] = true;
                }
                if t + 1 < n {
                    let rn = returns.values[[t + 1, i]];
                    let rn = if rn.is_finite() { rn } else { 0.0 };
                    next_returns[[t, i]] = rn;
                    y1[[t, i]] = y2[[t, i]] * rn;
                }
            }
        }
        Ok(Self {
            date_features: date_features(&returns.dates, origin),
            dates: returns.dates.clone(),
            x,
            y1,
            y2,
            next_returns,
            static_context,
            sigma_tgt,
            zero_vol,
            assets: returns.assets.clone(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.x.ncols()
    }

    /// First row from which volatility is positive for every asset on every
    /// later row.
    pub fn first_usable_row(&self) -> usize {
        (0..self.n_rows())
            .rev()
            .find(|&t| self.zero_vol.row(t).iter().any(|z| *z))
            .map_or(0, |t| t + 1)
    }

    fn check_vol(&self, rows: Range<usize>) -> Result<()> {
        for t in rows {
            if let Some(i) = self.zero_vol.row(t).iter().position(|z| *z) {
                return Err(Error::ZeroVolatility {
                    asset: self.assets[i].clone(),
                    date: self.dates[t],
                });
            }
        }
        Ok(())
    }

    fn batch(&self, rows: Range<usize>, first_scored: usize) -> ModelBatch {
        ModelBatch {
            x: self.x.slice(s![rows.clone(), ..]).to_owned(),
            y1: self.y1.slice(s![rows.clone(), ..]).to_owned(),
            y2: self.y2.slice(s![rows.clone(), ..]).to_owned(),
            dates: self.dates[rows.clone()].to_vec(),
            date_features: self.date_features.slice(s![rows.clone(), ..]).to_owned(),
            static_context: self.static_context,
            start_row: rows.start,
            first_scored,
        }
    }
}

/// One `T`-row window of model inputs and loss targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBatch {
    pub x: Array2<f64>,
    pub y1: Array2<f64>,
    pub y2: Array2<f64>,
    pub dates: Vec<NaiveDate>,
    pub date_features: Array2<f64>,
    pub static_context: usize,
    /// Panel row of the first window row.
    pub start_row: usize,
    /// Rows before this index are context only and excluded from the loss.
    pub first_scored: usize,
}

impl ModelBatch {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Panel rows scored by the loss.
    pub fn scored_rows(&self) -> Range<usize> {
        self.start_row + self.first_scored..self.start_row + self.len()
    }
}

/// Builds batches whose scored prediction rows are exactly `span`.
///
/// Prediction rows need a next-day return, so `span.end` may not exceed the
/// last panel row. With [`Stride::Block`] the windows are end-aligned,
/// non-overlapping and chronological; the first window borrows earlier rows
/// as unscored context when `span` is not a multiple of `T`.
pub fn build_batches(
    inputs: &ModelInputs,
    span: Range<usize>,
    policy: SequencingPolicy,
    stride: Stride,
) -> Result<Vec<ModelBatch>> {
    let t_len = policy.sequence_length;
    if t_len == 0 {
        return Err(Error::InvalidArgument("sequence length must be positive".into()));
    }
    if span.is_empty() {
        return Err(Error::InvalidArgument("empty prediction span".into()));
    }
    if span.end >= inputs.n_rows() {
        return Err(Error::InvalidArgument(format!(
            "prediction rows must end before the last panel row ({} >= {})",
            span.end,
            inputs.n_rows()
        )));
    }
    match stride {
        Stride::Block => {
            let mut out = Vec::new();
            let mut end = span.end;
            while end > span.start {
                let scored_start = end.saturating_sub(t_len).max(span.start);
                let window_start = end.checked_sub(t_len).ok_or_else(|| {
                    Error::InvalidArgument(format!("need {t_len} rows of history before row {end}"))
                })?;
                inputs.check_vol(window_start..end)?;
                out.push(inputs.batch(window_start..end, scored_start - window_start));
                end = scored_start;
            }
            out.reverse();
            Ok(out)
        }
        Stride::Rolling => {
            if span.start + 1 < t_len {
                return Err(Error::InvalidArgument(format!(
                    "need {t_len} rows of history before row {}",
                    span.start
                )));
            }
            inputs.check_vol(span.start + 1 - t_len..span.end)?;
            Ok(span
                .map(|k| inputs.batch(k + 1 - t_len..k + 1, t_len - 1))
                .collect())
        }
    }
}

/// Calendar features scaled by fixed divisors: days since `origin` / 10000,
/// month / 12, year / 2100, weekday (Mon = 0) / 7, day of month / 31 and
/// ISO week / 53.
pub fn date_features(dates: &[NaiveDate], origin: NaiveDate) -> Array2<f64> {
    let mut out = Array2::zeros((dates.len(), N_DATE_FEATURES));
    for (r, d) in dates.iter().enumerate() {
        let days = (*d - origin).num_days().max(0) as f64;
        out[[r, 0]] = days / 10000.0;
        out[[r, 1]] = d.month() as f64 / 12.0;
        out[[r, 2]] = d.year() as f64 / 2100.0;
        out[[r, 3]] = d.weekday().num_days_from_monday() as f64 / 7.0;
        out[[r, 4]] = d.day() as f64 / 31.0;
        out[[r, 5]] = d.iso_week().week() as f64 / 53.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::{business_days, ew_volatility, AssetClass, Panel};
    use rand::{Rng, SeedableRng};

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn futures_style_splits() {
        let dates = business_days(d(2000, 1, 3), 23 * 261);
        let dates: Vec<_> = dates.into_iter().filter(|x| x.year() < 2023).collect();
        let splits = make_splits(&dates, d(2005, 1, 1), 5).unwrap();
        let years: Vec<(i32, i32)> = splits.iter().map(|s| (s.test.start.year(), s.test.end.year())).collect();
        assert_eq!(years, vec![(2005, 2009), (2010, 2014), (2015, 2019), (2020, 2022)]);
        for s in &splits {
            assert_eq!(s.train.rows.start, 0);
            assert_eq!(s.train.rows.end, s.valid.rows.start);
            assert_eq!(s.valid.rows.end, s.test.rows.start);
            assert!(s.train.end < s.valid.start && s.valid.end < s.test.start);
        }
        for w in splits.windows(2) {
            assert_eq!(w[0].test.rows.end, w[1].test.rows.start);
        }
        assert_eq!(splits.last().unwrap().test.rows.end, dates.len());
    }

    #[test]
    fn crypto_style_splits() {
        let dates: Vec<_> = business_days(d(2018, 1, 1), 6 * 261)
            .into_iter()
            .filter(|x| *x < d(2023, 7, 1))
            .collect();
        let splits = make_splits(&dates, d(2019, 1, 1), 1).unwrap();
        let years: Vec<i32> = splits.iter().map(|s| s.test.start.year()).collect();
        assert_eq!(years, vec![2019, 2020, 2021, 2022, 2023]);
    }

    #[test]
    fn valid_is_last_ten_percent() {
        let dates = business_days(d(2000, 1, 3), 1500);
        let test_start = dates[1000];
        let splits = make_splits(&dates, test_start, 1).unwrap();
        assert_eq!(splits[0].valid.rows, 900..1000);
        assert_eq!(splits[0].train.rows, 0..900);
    }

    #[test]
    fn empty_test_period_is_an_error() {
        let dates = business_days(d(2000, 1, 3), 100);
        assert!(make_splits(&dates, d(2001, 1, 1), 1).is_err());
    }

    #[test]
    fn date_feature_values() {
        let f = date_features(&[d(2020, 6, 15)], d(2020, 1, 1));
        assert!((f[[0, 1]] - 0.5).abs() < 1e-15);
        assert!((f[[0, 2]] - 0.9619).abs() < 1e-4);
        assert_eq!(f[[0, 3]], 0.0);
        assert!((f[[0, 0]] - 166.0 / 10000.0).abs() < 1e-15);
        let week = date_features(&business_days(d(2020, 1, 1), 400), d(2020, 1, 1));
        assert!(week.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(week.column(3).iter().all(|v| *v < 1.0));
    }

    fn random_inputs(n: usize, a: usize, seed: u64) -> (ReturnsPanel, VolPanel) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = Array2::from_shape_fn((n, a), |_| rng.random_range(-0.02..0.02));
        let dates = business_days(d(2010, 1, 4), n);
        let assets = (0..a).map(|i| format!("A{i}")).collect();
        let r = ReturnsPanel(Panel::dense(dates, assets, values, AssetClass::Synthetic).unwrap());
        let v = ew_volatility(&r, 63).unwrap();
        (r, v)
    }

    #[test]
    fn targets_match_elementwise_oracle() {
        let (r, v) = random_inputs(400, 5, 3);
        let inp = ModelInputs::new(&r, &v, 0.15, 0, r.dates[0]).unwrap();
        let start = inp.first_usable_row().max(100);
        let batches = build_batches(&inp, start..399, SequencingPolicy::default(), Stride::Block).unwrap();
        for b in &batches {
            assert_eq!(b.x.dim(), (100, 5));
            assert_eq!(b.date_features.dim(), (100, 6));
            for k in 0..b.len() {
                let t = b.start_row + k;
                for i in 0..5 {
                    let sigma = v.values[[t, i]];
                    assert_eq!(b.y2[[k, i]], 0.15 / sigma);
                    assert_eq!(b.y1[[k, i]], b.y2[[k, i]] * r.values[[t + 1, i]]);
                    let x = r.values[[t, i]] / (sigma / 252f64.sqrt());
                    assert!((b.x[[k, i]] - x).abs() < 1e-12);
                    assert!(b.y2[[k, i]] > 0.0);
                }
            }
        }
        let scored: Vec<usize> = batches.iter().flat_map(|b| b.scored_rows()).collect();
        assert_eq!(scored, (start..399).collect::<Vec<_>>());
        assert!(batches.windows(2).all(|w| w[0].start_row + 100 == w[1].start_row));
    }

    #[test]
    fn constant_vol_at_target_is_identity_scaling() {
        let (r, mut v) = random_inputs(250, 3, 4);
        v.values.fill(0.15);
        let inp = ModelInputs::new(&r, &v, 0.15, 0, r.dates[0]).unwrap();
        let b = &build_batches(&inp, 100..200, SequencingPolicy::default(), Stride::Block).unwrap()[0];
        assert!(b.y2.iter().all(|y| *y == 1.0));
        for k in 0..100 {
            assert_eq!(b.y1[[k, 1]], r.values[[b.start_row + k + 1, 1]]);
        }
    }

    #[test]
    fn rolling_batches_end_on_each_prediction_row() {
        let (r, v) = random_inputs(300, 2, 5);
        let inp = ModelInputs::new(&r, &v, 0.15, 1, r.dates[0]).unwrap();
        let bs = build_batches(&inp, 150..160, SequencingPolicy::default(), Stride::Rolling).unwrap();
        assert_eq!(bs.len(), 10);
        for (j, b) in bs.iter().enumerate() {
            assert_eq!(b.start_row + 99, 150 + j);
            assert_eq!(b.scored_rows(), 150 + j..151 + j);
            // Last row of X is the most recent return.
            assert_eq!(b.x.row(99), inp.x.row(150 + j));
            assert_eq!(b.static_context, 1);
        }
    }

    #[test]
    fn zero_vol_is_rejected() {
        let (r, mut v) = random_inputs(300, 2, 6);
        let inp = ModelInputs::new(&r, &v, 0.15, 0, r.dates[0]).unwrap();
        // Row 0 has a seeded (zero) variance.
        assert_eq!(inp.first_usable_row(), 1);
        v.values[[120, 1]] = 0.0;
        let inp = ModelInputs::new(&r, &v, 0.15, 0, r.dates[0]).unwrap();
        assert_eq!(inp.first_usable_row(), 121);
        let err = build_batches(&inp, 110..150, SequencingPolicy::default(), Stride::Block);
        assert!(matches!(err, Err(Error::ZeroVolatility { .. })));
    }

    #[test]
    fn inputs_do_not_depend_on_future_rows() {
        let (r, v) = random_inputs(300, 3, 7);
        let inp = ModelInputs::new(&r, &v, 0.15, 0, r.dates[0]).unwrap();
        let mut r2 = r.clone();
        for t in 201..300 {
            for i in 0..3 {
                r2.values[[t, i]] *= -3.0;
            }
        }
        let v2 = ew_volatility(&r2, 63).unwrap();
        let inp2 = ModelInputs::new(&r2, &v2, 0.15, 0, r.dates[0]).unwrap();
        let a = build_batches(&inp, 200..201, SequencingPolicy::default(), Stride::Rolling).unwrap();
        let b = build_batches(&inp2, 200..201, SequencingPolicy::default(), Stride::Rolling).unwrap();
        assert_eq!(a[0].x, b[0].x);
        assert_eq!(a[0].y2, b[0].y2);
    }
}
