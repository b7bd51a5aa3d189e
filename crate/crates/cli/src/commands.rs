//! One function per subcommand. Each writes into `<out>/<config hash>/` and
//! returns early when its manifest already records a finished run.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use din_core::benchmarks::{run_suite, SuiteConfig};
use din_core::evaluation::{cost_sweep, evaluate, report_table_csv, report_text, rolling_diagnostics, MetricsReport};
use din_core::marketdata::{
    compute_returns, ew_volatility, filter_universe, load_prices, synth_generate, winsorise, write_prices, CsvSchema,
    PricePanel,
};
use din_core::objective::{portfolio_returns, CostModel, StrategyResult, WeightsMatrix};
use din_core::windows::{make_splits, Split};
use din_nn::complexity::{fe_complexity, ps_complexity, COMPLEXITY_N_FILTERS, FE_ASSET_GRID, PS_HIDDEN_GRID};
use din_nn::{checkpoint, FeConfig, PsKind};
use din_train::interpret::ImportanceSeries;
use din_train::walkforward::model_sha256;
use din_train::{
    extract_attention, extract_ps_vsn, extract_vsn, plot, split_data, test_rows, tune_config, walk_forward, Dataset,
    RunStore, SplitRecord, WalkForwardConfig,
};
use ndarray::Array2;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::artifacts::{
    check_hash, check_json_hash, is_done, read_weights, require, write_manifest, write_stamped, write_svg,
};
use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, Result};

/// Universe sizes at which sizer complexity is tabulated.
pub const PS_ASSET_GRID: [usize; 4] = [50, 80, 100, 200];

pub struct Ctx {
    pub cfg: RunConfig,
    pub hash: String,
    pub root: PathBuf,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Self {
        let hash = cfg.hash();
        let root = cfg.out.join(&hash);
        Self { cfg, hash, root }
    }

    fn store(&self) -> RunStore {
        RunStore::new(&self.cfg.out, &self.hash)
    }

    fn data_producer(&self) -> &'static str {
        match self.cfg.data.source {
            DataSource::Synth => "synth",
            DataSource::Csv => "ingest",
        }
    }
}

/// Panel, returns and splits rebuilt identically by every downstream command.
pub struct Prepared {
    pub prices: PricePanel,
    pub ds: Dataset,
    pub splits: Vec<Split>,
}

pub fn load_prepared(ctx: &Ctx) -> Result<Prepared> {
    let path = require(ctx.root.join("prices.csv"), ctx.data_producer())?;
    check_hash(&path, &ctx.hash)?;
    let schema = CsvSchema {
        asset_class: ctx.cfg.data.asset_class,
        ..CsvSchema::default()
    };
    let prices = load_prices(&path, &schema).map_err(CliError::data)?;
    prepare(&ctx.cfg, prices)
}

pub fn prepare(cfg: &RunConfig, prices: PricePanel) -> Result<Prepared> {
    let returns = compute_returns(&prices).map_err(CliError::data)?;
    let dates = returns.dates.clone();
    let first_test = match cfg.training.first_test_start {
        Some(d) => d,
        None => dates[2 * dates.len() / 3],
    };
    let splits = make_splits(&dates, first_test, cfg.training.step_years).map_err(CliError::data)?;
    let returns = filter_universe(&returns, splits[0].fit_rows(), cfg.data.max_missing).map_err(CliError::data)?;
    let keep: Vec<usize> = returns
        .assets
        .iter()
        .map(|a| prices.assets.iter().position(|p| p == a).unwrap())
        .collect();
    let prices = PricePanel(prices.select_assets(&keep));
    let vol = ew_volatility(&returns, cfg.data.vol_span).map_err(CliError::data)?;
    let ds = Dataset::new(returns, vol, cfg.evaluation.sigma_tgt, cfg.data.asset_class.id())?;
    Ok(Prepared { prices, ds, splits })
}

fn write_prices_file(ctx: &Ctx, prices: &PricePanel) -> Result<()> {
    let mut buf = Vec::new();
    write_prices(prices, &mut buf).map_err(CliError::data)?;
    write_stamped(&ctx.root.join("prices.csv"), &ctx.hash, &String::from_utf8_lossy(&buf))
}

pub fn cmd_synth(ctx: &Ctx) -> Result<()> {
    if ctx.cfg.data.source != DataSource::Synth {
        return Err(CliError::Config("data.source is \"csv\"; use `din ingest`".into()));
    }
    let manifest = ctx.root.join("synth.json");
    if is_done(&manifest, &ctx.hash) {
        tracing::info!("synthetic panel up to date");
        return Ok(());
    }
    let panel = synth_generate(&ctx.cfg.synth_config()).map_err(CliError::config)?;
    write_prices_file(ctx, &panel.prices)?;
    write_manifest(&manifest, &ctx.hash, "synth", &["prices.csv".into()], json!({ "metadata": panel.metadata }))?;
    println!("synth: {} days x {} assets", panel.prices.n_rows(), panel.prices.n_assets());
    Ok(())
}

pub fn cmd_ingest(ctx: &Ctx) -> Result<()> {
    let d = &ctx.cfg.data;
    let src = match (d.source, &d.path) {
        (DataSource::Csv, Some(p)) => p.clone(),
        _ => return Err(CliError::Config("ingest needs data.source = \"csv\" and data.path".into())),
    };
    let manifest = ctx.root.join("ingest.json");
    if is_done(&manifest, &ctx.hash) {
        tracing::info!("ingested panel up to date");
        return Ok(());
    }
    let bytes = fs::read(&src).map_err(|e| CliError::Data(format!("cannot read {}: {e}", src.display())))?;
    let schema = CsvSchema {
        asset_class: d.asset_class,
        ..CsvSchema::default()
    };
    let mut prices = din_core::marketdata::parse_prices(bytes.as_slice(), &schema).map_err(CliError::data)?;
    if d.winsorise {
        prices = winsorise(&prices, d.winsorise_std, d.winsorise_span);
    }
    write_prices_file(ctx, &prices)?;
    write_manifest(
        &manifest,
        &ctx.hash,
        "ingest",
        &["prices.csv".into()],
        json!({
            "source": src,
            "source_sha256": hex::encode(Sha256::digest(&bytes)),
            "rows": prices.n_rows(),
            "assets": prices.assets,
        }),
    )?;
    println!("ingest: {} days x {} assets", prices.n_rows(), prices.n_assets());
    Ok(())
}

pub fn cmd_tune(ctx: &Ctx) -> Result<()> {
    let settings = ctx
        .cfg
        .tuner_settings()
        .ok_or_else(|| CliError::Config("tuner.method is \"none\"; set hb, bo or rs".into()))?;
    let manifest = ctx.root.join("tune.json");
    if is_done(&manifest, &ctx.hash) {
        tracing::info!("tuning up to date");
        return Ok(());
    }
    let p = load_prepared(ctx)?;
    let base = ctx.cfg.train_config()?;
    let n = if settings.per_split { p.splits.len() } else { 1 };
    let mut splits = Vec::new();
    for split in &p.splits[..n] {
        let data = split_data(&p.ds, split, base.sequence_length)?;
        let (best, result) = tune_config(&base, &data, &settings)?;
        println!("tune: split {} best loss {:.4} ({} trials)", split.index, result.best_loss, result.trials.len());
        splits.push(json!({ "index": split.index, "best_config": best, "result": result }));
    }
    fs::create_dir_all(&ctx.root)?;
    write_manifest(&manifest, &ctx.hash, "tune", &[], json!({ "method": settings.method, "splits": splits }))
}

pub fn cmd_train(ctx: &Ctx) -> Result<()> {
    let store = ctx.store();
    if store.is_complete() && check_json_hash(&ctx.root.join("manifest.json"), &ctx.hash).is_ok() {
        tracing::info!("trained ensemble up to date");
        return Ok(());
    }
    let p = load_prepared(ctx)?;
    let wf = WalkForwardConfig {
        train: ctx.cfg.train_config()?,
        seeds: ctx.cfg.seeds(),
        tuner: ctx.cfg.tuner_settings(),
        eval_c_bps: ctx.cfg.evaluation.costs[0],
    };
    let out = walk_forward(&wf, &p.ds, &p.splits)?;
    store.write_walk_forward(&p.ds, &out, &ctx.cfg)?;
    println!(
        "train: {} splits x {} seeds, {} test days",
        out.splits.len(),
        wf.seeds.len(),
        out.result.len()
    );
    Ok(())
}

fn split_records(ctx: &Ctx) -> Result<Vec<SplitRecord>> {
    let top = require(ctx.root.join("manifest.json"), "train")?;
    let v = check_json_hash(&top, &ctx.hash)?;
    let n = v.get("splits").and_then(|s| s.as_array()).map_or(0, Vec::len);
    (0..n)
        .map(|k| {
            let path = require(ctx.store().split_dir(k).join("manifest.json"), "train")?;
            let v = check_json_hash(&path, &ctx.hash)?;
            serde_json::from_value(v).map_err(CliError::data)
        })
        .collect()
}

/// Ensemble weights of every split read back from disk, in date order.
fn stored_weights(ctx: &Ctx, records: &[SplitRecord], assets: &[String]) -> Result<WeightsMatrix> {
    let mut parts = Vec::new();
    for r in records {
        let path = require(ctx.store().split_dir(r.index).join("weights.csv"), "train")?;
        parts.push(read_weights(&path, &ctx.hash, assets)?);
    }
    let dates = parts.iter().flat_map(|w| w.dates.iter().copied()).collect();
    let views: Vec<_> = parts.iter().map(|w| w.values.view()).collect();
    let values = ndarray::concatenate(ndarray::Axis(0), &views).map_err(CliError::data)?;
    WeightsMatrix::new(dates, assets.to_vec(), values).map_err(CliError::data)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| x.to_string())
}

pub fn cmd_report(ctx: &Ctx) -> Result<()> {
    let manifest = ctx.root.join("report").join("report.json");
    if is_done(&manifest, &ctx.hash) {
        tracing::info!("report up to date");
        return Ok(());
    }
    let records = split_records(ctx)?;
    let p = load_prepared(ctx)?;
    let ev = &ctx.cfg.evaluation;
    let c0 = ev.costs[0];
    let weights = stored_weights(ctx, &records, p.ds.assets())?;
    let mut din = portfolio_returns(
        &weights,
        &p.ds.returns,
        &p.ds.vol,
        ev.sigma_tgt,
        CostModel::new(c0, 0.0).map_err(CliError::config)?,
        true,
    )
    .map_err(CliError::data)?;
    din.name = format!("DIN {}", ctx.cfg.train_config()?.label());
    let lo_w = WeightsMatrix::long_only(weights.dates.clone(), weights.assets.clone());
    let mut lo = portfolio_returns(&lo_w, &p.ds.returns, &p.ds.vol, ev.sigma_tgt, CostModel::ZERO, true)
        .map_err(CliError::data)?;
    lo.name = "Long-only".into();
    lo.costed = false;

    let mut strategies: Vec<StrategyResult> = vec![din.clone()];
    if ev.benchmarks {
        let suite_cfg = SuiteConfig {
            sigma_tgt: ev.sigma_tgt,
            c_bps: c0,
            include_lm: ev.include_lm,
            lm_trials: ev.lm_trials,
            seed: ctx.cfg.seed,
            ..SuiteConfig::default()
        };
        let suite = run_suite(&p.prices, &p.ds.returns, &p.ds.vol, &p.splits, &suite_cfg).map_err(CliError::data)?;
        strategies.extend(suite.all().into_iter().cloned());
    } else {
        strategies.push(lo.clone());
    }

    let tuning = ctx.cfg.tuner_settings().map_or("none", |t| t.method.label()).to_string();
    let mut reports: Vec<MetricsReport> = Vec::new();
    for s in &strategies {
        reports.push(evaluate(s, Some(&lo.returns), ev.sigma_tgt, c0).map_err(CliError::data)?);
    }
    let dir = ctx.root.join("report");
    fs::create_dir_all(&dir)?;

    let text: String = reports.iter().map(|r| report_text(r) + "\n").collect();
    write_stamped(&dir.join("metrics.txt"), &ctx.hash, &text)?;
    let rows: Vec<(MetricsReport, String, bool)> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| (r.clone(), if i == 0 { tuning.clone() } else { "none".into() }, true))
        .collect();
    write_stamped(&dir.join("table.csv"), &ctx.hash, &report_table_csv(&rows).map_err(CliError::data)?)?;

    let mut sweep = String::from("strategy,c_bps,sharpe\n");
    for s in strategies.iter().filter(|s| s.costed) {
        for row in cost_sweep(s, &ev.costs) {
            let _ = writeln!(sweep, "{},{},{}", s.name, row.c_bps, fmt_opt(row.sharpe));
        }
    }
    write_stamped(&dir.join("cost_sweep.csv"), &ctx.hash, &sweep)?;

    let window = ev.rolling_window.min(din.len().saturating_sub(1)).max(2);
    let roll = rolling_diagnostics(&din.returns, &lo.returns, window).map_err(CliError::data)?;
    let mut rc = String::from("date,sharpe,sharpe_ew,sharpe_lower,sharpe_upper,corr,corr_ew\n");
    for (t, d) in din.dates.iter().enumerate() {
        let _ = writeln!(
            rc,
            "{d},{},{},{},{},{},{}",
            fmt_opt(roll.sharpe.values[t]),
            fmt_opt(roll.sharpe.ew_mean[t]),
            fmt_opt(roll.sharpe.lower[t]),
            fmt_opt(roll.sharpe.upper[t]),
            fmt_opt(roll.corr.values[t]),
            fmt_opt(roll.corr.ew_mean[t]),
        );
    }
    write_stamped(&dir.join("rolling.csv"), &ctx.hash, &rc)?;
    let lo_roll = rolling_diagnostics(&lo.returns, &lo.returns, window).map_err(CliError::data)?;
    let fill = |v: &[Option<f64>]| v.iter().map(|x| x.unwrap_or(f64::NAN)).collect::<Vec<_>>();
    let first = din.dates.first().map(|d| d.to_string()).unwrap_or_default();
    let last = din.dates.last().map(|d| d.to_string()).unwrap_or_default();
    let svg = plot::line_chart(
        &format!("Rolling {window}-day Sharpe"),
        (&first, &last),
        &[
            (din.name.clone(), fill(&roll.sharpe.values)),
            ("Long-only".into(), fill(&lo_roll.sharpe.values)),
        ],
    );
    write_svg(&dir.join("rolling.svg"), &ctx.hash, &svg)?;

    let outputs = ["metrics.txt", "table.csv", "cost_sweep.csv", "rolling.csv", "rolling.svg"].map(String::from);
    write_manifest(&manifest, &ctx.hash, "report", &outputs, json!({ "strategies": reports }))?;
    print!("{}", report_text(&reports[0]));
    Ok(())
}

pub fn cmd_backtest(ctx: &Ctx) -> Result<()> {
    match ctx.cfg.data.source {
        DataSource::Synth => cmd_synth(ctx)?,
        DataSource::Csv => cmd_ingest(ctx)?,
    }
    cmd_train(ctx)?;
    cmd_report(ctx)
}

fn mean_series(parts: Vec<ImportanceSeries>) -> Result<ImportanceSeries> {
    let first = &parts[0];
    let mut raw = Array2::zeros(first.raw.dim());
    for p in &parts {
        raw += &p.raw;
    }
    raw /= parts.len() as f64;
    let mut out = ImportanceSeries::new(first.dates.clone(), first.labels.clone(), raw, first.span)?;
    out.condensed = first.condensed;
    Ok(out)
}

type Extractor = fn(
    &din_nn::DinModel,
    &din_core::windows::ModelInputs,
    &[String],
    std::ops::Range<usize>,
    usize,
) -> din_train::Result<ImportanceSeries>;

/// Member-averaged importance series over every split, plus the largest
/// row-sum error seen in any member before averaging.
pub fn interpret_series(
    p: &Prepared,
    records: &[SplitRecord],
    models: &[Vec<din_nn::DinModel>],
    extract: Extractor,
) -> Result<(ImportanceSeries, f64)> {
    let mut per_split = Vec::new();
    let mut worst: f64 = 0.0;
    for (r, ms) in records.iter().zip(models) {
        let split = p
            .splits
            .iter()
            .find(|s| s.index == r.index)
            .ok_or_else(|| CliError::Data(format!("split {} not in the panel", r.index)))?;
        let rows = test_rows(&p.ds, split);
        let mut members = Vec::new();
        for m in ms {
            let s = extract(m, &p.ds.inputs, p.ds.assets(), rows.clone(), r.config.sequence_length)?;
            worst = worst.max(s.max_row_sum_error());
            members.push(s);
        }
        per_split.push(mean_series(members)?);
    }
    Ok((ImportanceSeries::concat(&per_split)?, worst))
}

fn load_members(ctx: &Ctx, records: &[SplitRecord]) -> Result<Vec<Vec<din_nn::DinModel>>> {
    records
        .iter()
        .map(|r| {
            r.members
                .iter()
                .map(|m| {
                    let path = require(ctx.store().seed_dir(r.index, m.seed).join("checkpoint"), "train")?;
                    let model = checkpoint::load(&path).map_err(CliError::data)?;
                    if model_sha256(&model)? != m.checkpoint_sha256 {
                        return Err(CliError::Data(format!("{} does not match its manifest", path.display())));
                    }
                    Ok(model)
                })
                .collect()
        })
        .collect()
}

fn write_series(dir: &Path, hash: &str, name: &str, s: &ImportanceSeries) -> Result<()> {
    let mut buf = Vec::new();
    s.write_csv(&mut buf, hash)?;
    fs::write(dir.join(format!("{name}.csv")), buf)?;
    Ok(())
}

pub fn cmd_interpret(ctx: &Ctx) -> Result<()> {
    let (fe, ps) = ctx.cfg.model.build()?;
    let is_flex = matches!(fe, FeConfig::FlexCim { .. });
    let is_tft = ps.kind == PsKind::Tft;
    if !is_flex && !is_tft {
        return Err(CliError::Config(format!(
            "interpret needs a FlexCIM extractor or a TFT sizer, variant is {}",
            ctx.cfg.model.variant
        )));
    }
    let dir = ctx.root.join("interpret");
    let manifest = dir.join("interpret.json");
    if is_done(&manifest, &ctx.hash) {
        tracing::info!("interpretation up to date");
        return Ok(());
    }
    let records = split_records(ctx)?;
    let p = load_prepared(ctx)?;
    let models = load_members(ctx, &records)?;
    fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    let mut jobs: Vec<(&str, Extractor)> = Vec::new();
    if is_tft {
        jobs.push(("attention", extract_attention));
        jobs.push(("ps_vsn", extract_ps_vsn));
    }
    if is_flex {
        jobs.push(("fe_vsn", extract_vsn));
    }
    for (name, f) in jobs {
        let (s, worst) = interpret_series(&p, &records, &models, f)?;
        write_series(&dir, &ctx.hash, name, &s)?;
        outputs.push(format!("{name}.csv"));
        let svg = if name == "attention" {
            let first = s.labels.first().cloned().unwrap_or_default();
            let last = s.labels.last().cloned().unwrap_or_default();
            let d0 = s.dates.first().map(|d| d.to_string()).unwrap_or_default();
            let d1 = s.dates.last().map(|d| d.to_string()).unwrap_or_default();
            plot::heatmap("Attention by lag", &s.raw, (&d0, &d1), (&first, &last))
        } else {
            let top: Vec<usize> = s
                .top_k(3)
                .iter()
                .filter_map(|(l, _)| s.labels.iter().position(|x| x == l))
                .collect();
            plot::fan_chart(&format!("{name} importance"), &s, &top)
        };
        write_svg(&dir.join(format!("{name}.svg")), &ctx.hash, &svg)?;
        outputs.push(format!("{name}.svg"));
        println!("interpret: {name} over {} dates, max row-sum error {worst:.2e}", s.len());
        summary.insert(
            name.to_string(),
            json!({
                "max_row_sum_error": worst,
                "condensed": s.condensed,
                "top": s.top_k(5),
            }),
        );
    }
    write_manifest(&manifest, &ctx.hash, "interpret", &outputs, summary)
}

pub fn cmd_complexity(ctx: &Ctx) -> Result<()> {
    let dir = ctx.root.join("complexity");
    let manifest = dir.join("complexity.json");
    if is_done(&manifest, &ctx.hash) {
        tracing::info!("complexity table up to date");
        return Ok(());
    }
    let fe = fe_complexity(COMPLEXITY_N_FILTERS, &FE_ASSET_GRID).map_err(|e| CliError::Config(e.to_string()))?;
    let mut fe_csv = String::from("extractor,n_assets,low,high,average\n");
    let mut text = String::from("Feature extractors (parameters vs N_A)\n");
    for row in &fe {
        for (i, a) in row.n_assets.iter().enumerate() {
            let _ = writeln!(fe_csv, "{},{a},{},{},{}", row.label, row.low[i], row.high[i], row.average[i]);
        }
        let _ = writeln!(text, "  {:<9} slope {:.3}", row.label, row.slope);
    }
    let mut ps_csv = String::from("sizer,n_assets,hidden,parameters\n");
    let mut ps_rows = Vec::new();
    let _ = writeln!(text, "Position sizers (parameters vs N_H)");
    for kind in [PsKind::Lstm, PsKind::Tft] {
        for a in PS_ASSET_GRID {
            let row = ps_complexity(kind, a, &PS_HIDDEN_GRID).map_err(|e| CliError::Config(e.to_string()))?;
            for (h, c) in row.hidden.iter().zip(&row.counts) {
                let _ = writeln!(ps_csv, "{},{a},{h},{c}", row.label);
            }
            let _ = writeln!(text, "  {:<4} N_A={a:<4} slope {:.3}", row.label, row.slope);
            ps_rows.push(row);
        }
    }
    write_stamped(&dir.join("fe.csv"), &ctx.hash, &fe_csv)?;
    write_stamped(&dir.join("ps.csv"), &ctx.hash, &ps_csv)?;
    write_stamped(&dir.join("slopes.txt"), &ctx.hash, &text)?;
    let outputs = ["fe.csv", "ps.csv", "slopes.txt"].map(String::from);
    write_manifest(&manifest, &ctx.hash, "complexity", &outputs, json!({ "fe": fe, "ps": ps_rows }))?;
    print!("{text}");
    Ok(())
}

/// Writes the resolved configuration next to the outputs.
pub fn write_resolved_config(ctx: &Ctx) -> Result<()> {
    fs::create_dir_all(&ctx.root)?;
    let path = ctx.root.join("config.toml");
    if path.is_file() {
        return Ok(());
    }
    let body = toml::to_string_pretty(&ctx.cfg).map_err(CliError::config)?;
    let mut f = BufWriter::new(File::create(path)?);
    use std::io::Write;
    writeln!(f, "# config_hash={}", ctx.hash)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}
