//! Daily price and return panels.
//!
//! Panels are date-indexed matrices (`rows = dates`, `columns = assets`) with
//! an observation mask. Every transform here is causal: the value at row `t`
//! only depends on rows `<= t`.

mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::ops::{Deref, DerefMut, Range};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::EwStats;
use crate::ANNUALISATION;

pub use synth::{synth_generate, LeadLagPair, RegimeMix, RegimeSwitch, Seasonal, SynthConfig, SynthMetadata, SynthPanel};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AssetClass {
    Futures,
    Equity,
    Crypto,
    Fx,
    #[default]
    Synthetic,
}

impl AssetClass {
    pub const ALL: [AssetClass; 5] = [
        AssetClass::Futures,
        AssetClass::Equity,
        AssetClass::Crypto,
        AssetClass::Fx,
        AssetClass::Synthetic,
    ];

    /// Integer id used as the static context of the temporal fusion sizer.
    pub fn id(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AssetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AssetClass::Futures => "futures",
            AssetClass::Equity => "equity",
            AssetClass::Crypto => "crypto",
            AssetClass::Fx => "fx",
            AssetClass::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

impl FromStr for AssetClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "futures" => Ok(AssetClass::Futures),
            "equity" | "equities" => Ok(AssetClass::Equity),
            "crypto" => Ok(AssetClass::Crypto),
            "fx" => Ok(AssetClass::Fx),
            "synthetic" => Ok(AssetClass::Synthetic),
            other => Err(Error::InvalidArgument(format!("unknown asset class '{other}'"))),
        }
    }
}

/// Date-indexed matrix with an observation mask (`true` = observed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
    pub asset_class: AssetClass,
}

impl Panel {
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        values: Array2<f64>,
        mask: Array2<bool>,
        asset_class: AssetClass,
    ) -> Result<Self> {
        let shape = (dates.len(), assets.len());
        if values.dim() != shape || mask.dim() != shape {
            return Err(Error::Shape(format!(
                "values {:?} / mask {:?} do not match {} dates x {} assets",
                values.dim(),
                mask.dim(),
                shape.0,
                shape.1
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[1] <= w[0]) {
            return if w[1] == w[0] {
                Err(Error::DuplicateDate(w[0]))
            } else {
                Err(Error::InvalidArgument(format!("dates not increasing at {}", w[1])))
            };
        }
        for ((r, c), present) in mask.indexed_iter() {
            if *present && !values[[r, c]].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite value marked present at row {r}, asset '{}'",
                    assets[c]
                )));
            }
        }
        Ok(Self {
            dates,
            assets,
            values,
            mask,
            asset_class,
        })
    }

    /// Builds a fully observed panel.
    pub fn dense(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        values: Array2<f64>,
        asset_class: AssetClass,
    ) -> Result<Self> {
        let mask = Array2::from_elem(values.dim(), true);
        Self::new(dates, assets, values, mask, asset_class)
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    /// Row index of `date`, if present.
    pub fn row_of(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// First row whose date is `>= date`.
    pub fn first_row_on_or_after(&self, date: NaiveDate) -> usize {
        self.dates.partition_point(|d| *d < date)
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> Panel {
        Panel {
            dates: self.dates[rows.clone()].to_vec(),
            assets: self.assets.clone(),
            values: self.values.slice(ndarray::s![rows.clone(), ..]).to_owned(),
            mask: self.mask.slice(ndarray::s![rows, ..]).to_owned(),
            asset_class: self.asset_class,
        }
    }

    /// Keeps the given asset columns, in the given order.
    pub fn select_assets(&self, cols: &[usize]) -> Panel {
        Panel {
            dates: self.dates.clone(),
            assets: cols.iter().map(|&c| self.assets[c].clone()).collect(),
            values: self.values.select(Axis(1), cols),
            mask: self.mask.select(Axis(1), cols),
            asset_class: self.asset_class,
        }
    }

    pub fn is_present(&self, row: usize, col: usize) -> bool {
        self.mask[[row, col]]
    }
}

macro_rules! panel_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name(pub Panel);

        impl Deref for $name {
            type Target = Panel;
            fn deref(&self) -> &Panel {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut Panel {
                &mut self.0
            }
        }
    };
}

panel_newtype!(
    /// Price levels `p[t, i]`.
    PricePanel
);
panel_newtype!(
    /// Simple daily returns `r[t, i] = p[t, i] / p[t-1, i] - 1`.
    ReturnsPanel
);

/// Annualised ex-ante volatility, aligned row-for-row with a [`ReturnsPanel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    /// Annualised volatility; zero until an asset has a first observation.
    pub values: Array2<f64>,
    pub span: usize,
}

impl VolPanel {
    /// Daily (non-annualised) volatility at a cell.
    pub fn daily(&self, row: usize, col: usize) -> f64 {
        self.values[[row, col]] / ANNUALISATION.sqrt()
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> VolPanel {
        VolPanel {
            dates: self.dates[rows.clone()].to_vec(),
            assets: self.assets.clone(),
            values: self.values.slice(ndarray::s![rows, ..]).to_owned(),
            span: self.span,
        }
    }

    pub fn select_assets(&self, cols: &[usize]) -> VolPanel {
        VolPanel {
            dates: self.dates.clone(),
            assets: cols.iter().map(|&c| self.assets[c].clone()).collect(),
            values: self.values.select(Axis(1), cols),
            span: self.span,
        }
    }
}

/// Column mapping for price CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub date_column: String,
    /// Asset columns to load; `None` loads every non-date column.
    pub asset_columns: Option<Vec<String>>,
    pub asset_class: AssetClass,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            date_column: "date".to_string(),
            asset_columns: None,
            asset_class: AssetClass::Synthetic,
        }
    }
}

pub fn load_prices(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PricePanel> {
    let file = std::fs::File::open(path)?;
    parse_prices(file, schema)
}

/// Parses `date,ASSET1,ASSET2,...` CSV. Empty cells are missing; rows are
/// sorted by date and duplicates rejected.
pub fn parse_prices<R: Read>(reader: R, schema: &CsvSchema) -> Result<PricePanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let date_idx = headers
        .iter()
        .position(|h| h == schema.date_column)
        .ok_or_else(|| Error::Load {
            row: 0,
            column: schema.date_column.clone(),
            message: "date column not found".into(),
        })?;
    let asset_cols: Vec<(usize, String)> = match &schema.asset_columns {
        Some(names) => names
            .iter()
            .map(|n| {
                headers
                    .iter()
                    .position(|h| h == n)
                    .map(|i| (i, n.clone()))
                    .ok_or_else(|| Error::Load {
                        row: 0,
                        column: n.clone(),
                        message: "asset column not found".into(),
                    })
            })
            .collect::<Result<_>>()?,
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != date_idx)
            .map(|(i, h)| (i, h.to_string()))
            .collect(),
    };

    let mut rows: BTreeMap<NaiveDate, Vec<Option<f64>>> = BTreeMap::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let row = line + 1;
        let raw_date = record.get(date_idx).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw_date, DATE_FORMAT).map_err(|e| Error::Load {
            row,
            column: schema.date_column.clone(),
            message: format!("unparsable date '{raw_date}': {e}"),
        })?;
        let mut vals = Vec::with_capacity(asset_cols.len());
        for (idx, name) in &asset_cols {
            let cell = record.get(*idx).unwrap_or("");
            if cell.is_empty() {
                vals.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Load {
                    row,
                    column: name.clone(),
                    message: format!("non-numeric price '{cell}'"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Load {
                        row,
                        column: name.clone(),
                        message: format!("non-finite price '{cell}'"),
                    });
                }
                vals.push(Some(v));
            }
        }
        if rows.insert(date, vals).is_some() {
            return Err(Error::DuplicateDate(date));
        }
    }

    let n = rows.len();
    let m = asset_cols.len();
    let mut values = Array2::from_elem((n, m), f64::NAN);
    let mut mask = Array2::from_elem((n, m), false);
    let mut dates = Vec::with_capacity(n);
    for (r, (date, vals)) in rows.into_iter().enumerate() {
        dates.push(date);
        for (c, v) in vals.into_iter().enumerate() {
            if let Some(v) = v {
                values[[r, c]] = v;
                mask[[r, c]] = true;
            }
        }
    }
    let assets = asset_cols.into_iter().map(|(_, n)| n).collect();
    Ok(PricePanel(Panel::new(dates, assets, values, mask, schema.asset_class)?))
}

/// Writes a price panel in the ingestion CSV format.
pub fn write_prices<W: std::io::Write>(panel: &PricePanel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(panel.assets.iter().cloned());
    w.write_record(&header)?;
    for (r, date) in panel.dates.iter().enumerate() {
        let mut rec = vec![date.format(DATE_FORMAT).to_string()];
        for c in 0..panel.n_assets() {
            if panel.mask[[r, c]] {
                rec.push(format!("{}", panel.values[[r, c]]));
            } else {
                rec.push(String::new());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Simple returns. A return is missing when either adjacent price is.
pub fn compute_returns(prices: &PricePanel) -> Result<ReturnsPanel> {
    let (n, m) = prices.values.dim();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 price rows".into()));
    }
    for ((r, c), v) in prices.values.indexed_iter() {
        if prices.mask[[r, c]] && *v <= 0.0 {
            return Err(Error::NonPositivePrice {
                asset: prices.assets[c].clone(),
                date: prices.dates[r],
                value: *v,
            });
        }
    }
    let mut values = Array2::from_elem((n - 1, m), f64::NAN);
    let mut mask = Array2::from_elem((n - 1, m), false);
    for t in 1..n {
        for c in 0..m {
            if prices.mask[[t, c]] && prices.mask[[t - 1, c]] {
                values[[t - 1, c]] = prices.values[[t, c]] / prices.values[[t - 1, c]] - 1.0;
                mask[[t - 1, c]] = true;
            }
        }
    }
    Ok(ReturnsPanel(Panel::new(
        prices.dates[1..].to_vec(),
        prices.assets.clone(),
        values,
        mask,
        prices.asset_class,
    )?))
}

/// Causal exponentially-weighted volatility, annualised by `sqrt(252)`.
///
/// Missing returns leave the estimate unchanged. Before an asset's first
/// observed return the volatility is zero.
pub fn ew_volatility(returns: &ReturnsPanel, span: usize) -> Result<VolPanel> {
    if span < 2 {
        return Err(Error::InvalidArgument(format!("span must be >= 2, got {span}")));
    }
    let (n, m) = returns.values.dim();
    let mut values = Array2::zeros((n, m));
    let ann = ANNUALISATION.sqrt();
    for c in 0..m {
        let mut ew = EwStats::new(span);
        for t in 0..n {
            if returns.mask[[t, c]] {
                ew.update(returns.values[[t, c]]);
            }
            if ew.count() > 0 {
                values[[t, c]] = ew.std() * ann;
            }
        }
    }
    Ok(VolPanel {
        dates: returns.dates.clone(),
        assets: returns.assets.clone(),
        values,
        span,
    })
}

/// Clips every implied daily return to `±n_std` times the causal
/// exponentially-weighted standard deviation of the returns before it, then
/// rebuilds prices from the first observed price.
///
/// The volatility estimate is fed the clipped returns, so applying the
/// transform twice changes nothing. No clipping happens during the first
/// `span` observations of an asset while the estimate warms up.
pub fn winsorise(prices: &PricePanel, n_std: f64, span: usize) -> PricePanel {
    let (n, m) = prices.values.dim();
    let mut out = prices.clone();
    for c in 0..m {
        let mut ew = EwStats::new(span);
        let mut last_raw: Option<f64> = None;
        let mut last_out: Option<f64> = None;
        for t in 0..n {
            if !prices.mask[[t, c]] {
                continue;
            }
            let p = prices.values[[t, c]];
            match (last_raw, last_out) {
                (Some(prev_raw), Some(prev_out)) => {
                    let r = p / prev_raw - 1.0;
                    let r_clipped = if ew.count() >= span {
                        let bound = n_std * ew.std();
                        r.clamp(-bound, bound)
                    } else {
                        r
                    };
                    ew.update(r_clipped);
                    let rebuilt = if r_clipped == r && prev_out == prev_raw {
                        p
                    } else {
                        prev_out * (1.0 + r_clipped)
                    };
                    out.values[[t, c]] = rebuilt;
                    last_out = Some(rebuilt);
                }
                _ => {
                    last_out = Some(p);
                }
            }
            last_raw = Some(p);
        }
    }
    out
}

/// Drops assets whose missing fraction over `train_rows` exceeds
/// `max_missing` (strictly), then fills the remaining missing returns with 0.
/// The mask still records which cells were originally missing.
pub fn filter_universe(
    returns: &ReturnsPanel,
    train_rows: Range<usize>,
    max_missing: f64,
) -> Result<ReturnsPanel> {
    if train_rows.end > returns.n_rows() || train_rows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "train range {:?} outside panel of {} rows",
            train_rows,
            returns.n_rows()
        )));
    }
    let len = train_rows.len() as f64;
    let keep: Vec<usize> = (0..returns.n_assets())
        .filter(|&c| {
            let missing = train_rows.clone().filter(|&t| !returns.mask[[t, c]]).count();
            (missing as f64 / len) <= max_missing
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyUniverse);
    }
    let mut out = returns.select_assets(&keep);
    for ((r, c), v) in out.values.indexed_iter_mut() {
        if !out.mask[[r, c]] {
            *v = 0.0;
        }
    }
    Ok(ReturnsPanel(out))
}

/// Date-indexed universe membership, read from `date,asset,member` rows.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Membership {
    entries: BTreeMap<NaiveDate, BTreeMap<String, bool>>,
}

impl Membership {
    pub fn insert(&mut self, date: NaiveDate, asset: &str, member: bool) {
        self.entries
            .entry(date)
            .or_default()
            .insert(asset.to_string(), member);
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(std::fs::File::open(path)?)
    }

    pub fn parse<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut out = Self::default();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = line + 1;
            let field = |i: usize, name: &str| {
                rec.get(i).ok_or_else(|| Error::Load {
                    row,
                    column: name.to_string(),
                    message: "missing field".into(),
                })
            };
            let d = field(0, "date")?;
            let date = NaiveDate::parse_from_str(d, DATE_FORMAT).map_err(|e| Error::Load {
                row,
                column: "date".into(),
                message: format!("unparsable date '{d}': {e}"),
            })?;
            let asset = field(1, "asset")?;
            let member = match field(2, "member")? {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Load {
                        row,
                        column: "member".into(),
                        message: format!("expected 0 or 1, got '{other}'"),
                    })
                }
            };
            out.insert(date, asset, member);
        }
        Ok(out)
    }

    /// Assets flagged as members on any date in `[start, end]`.
    pub fn members_between(&self, start: NaiveDate, end: NaiveDate) -> BTreeSet<String> {
        self.entries
            .range(start..=end)
            .flat_map(|(_, m)| m.iter().filter(|(_, v)| **v).map(|(k, _)| k.clone()))
            .collect()
    }

    /// Latest membership state of each asset as of `date` (inclusive).
    pub fn members_at(&self, date: NaiveDate) -> BTreeSet<String> {
        let mut state: BTreeMap<&str, bool> = BTreeMap::new();
        for (_, m) in self.entries.range(..=date) {
            for (k, v) in m {
                state.insert(k, *v);
            }
        }
        state
            .into_iter()
            .filter(|(_, v)| *v)
            .map(|(k, _)| k.to_string())
            .collect()
    }

    /// Universe for a split: members during the last week of its training
    /// window ending at `train_end`.
    pub fn split_universe(&self, train_end: NaiveDate) -> BTreeSet<String> {
        self.members_between(train_end - chrono::Duration::days(6), train_end)
    }
}

/// Restricts a panel to the assets in `universe`, preserving column order.
pub fn restrict_assets(panel: &Panel, universe: &BTreeSet<String>) -> Result<Panel> {
    let cols: Vec<usize> = panel
        .assets
        .iter()
        .enumerate()
        .filter(|(_, a)| universe.contains(*a))
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(Error::EmptyUniverse);
    }
    Ok(panel.select_assets(&cols))
}

/// Consecutive weekdays starting at `start` (weekends skipped).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    use chrono::{Datelike, Weekday};
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date overflow");
    }
    out
}
