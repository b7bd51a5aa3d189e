//! Run directory layout:
//! `<base>/<hash>/split_<k>/seed_<s>/{checkpoint, history.csv, weights.csv, result.csv, manifest.json}`,
//! with ensemble outputs in each `split_<k>` and the concatenated result at
//! the top.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use din_core::objective::{portfolio_returns, CostModel, StrategyResult};
use din_nn::checkpoint;
use serde::Serialize;

use crate::error::Result;
use crate::trainer::EpochRecord;
use crate::walkforward::{Dataset, WalkForwardOutput};

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
    hash: String,
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: T,
}

impl RunStore {
    pub fn new(base: &Path, config_hash: &str) -> Self {
        Self {
            root: base.join(config_hash),
            hash: config_hash.to_string(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn split_dir(&self, split: usize) -> PathBuf {
        self.root.join(format!("split_{split}"))
    }

    pub fn seed_dir(&self, split: usize, seed: u64) -> PathBuf {
        self.split_dir(split).join(format!("seed_{seed}"))
    }

    /// Whether a completed walk-forward run is already on disk.
    pub fn is_complete(&self) -> bool {
        self.root.join("manifest.json").is_file() && self.root.join("result.csv").is_file()
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, body: T) -> Result<()> {
        let m = Manifest {
            config_hash: &self.hash,
            body,
        };
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, &m)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_result(&self, path: &Path, result: &StrategyResult) -> Result<()> {
        let mut r = result.clone();
        r.config_hash = self.hash.clone();
        r.write_csv(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn write_history(&self, path: &Path, history: &[EpochRecord]) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "# config_hash={}", self.hash)?;
        let mut w = csv::Writer::from_writer(f);
        for rec in history {
            w.serialize(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes every artifact of a walk-forward run. The top-level manifest
    /// goes last, so its presence marks a complete run.
    pub fn write_walk_forward<T: Serialize>(&self, ds: &Dataset, out: &WalkForwardOutput, config: &T) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        for split in &out.splits {
            let k = split.record.index;
            let dir = self.split_dir(k);
            fs::create_dir_all(&dir)?;
            for ((model, member), weights) in split.models.iter().zip(&split.record.members).zip(&split.member_weights) {
                let seed_dir = self.seed_dir(k, member.seed);
                fs::create_dir_all(&seed_dir)?;
                checkpoint::save(model, &seed_dir.join("checkpoint"))?;
                self.write_history(&seed_dir.join("history.csv"), &member.history)?;
                weights.write_csv(BufWriter::new(File::create(seed_dir.join("weights.csv"))?), &self.hash)?;
                let mut r = portfolio_returns(
                    weights,
                    &ds.returns,
                    &ds.vol,
                    ds.inputs.sigma_tgt,
                    CostModel::new(split.result.cost.c_bps, 0.0)?,
                    true,
                )?;
                r.name = format!("{} seed {}", split.result.name, member.seed);
                self.write_result(&seed_dir.join("result.csv"), &r)?;
                self.write_json(
                    &seed_dir.join("manifest.json"),
                    serde_json::json!({
                        "split": k,
                        "seed": member.seed,
                        "config": split.record.config,
                        "best_epoch": member.best_epoch,
                        "best_valid_loss": member.best_valid_loss,
                        "checkpoint_sha256": member.checkpoint_sha256,
                        "data": split.record.audit,
                    }),
                )?;
            }
            split
                .weights
                .write_csv(BufWriter::new(File::create(dir.join("weights.csv"))?), &self.hash)?;
            self.write_result(&dir.join("result.csv"), &split.result)?;
            self.write_json(&dir.join("manifest.json"), &split.record)?;
        }
        self.write_result(&self.root.join("result.csv"), &out.result)?;
        self.write_json(
            &self.root.join("manifest.json"),
            serde_json::json!({
                "config": config,
                "splits": out.splits.iter().map(|s| serde_json::json!({
                    "index": s.record.index,
                    "test_start": s.record.test_start,
                    "test_end": s.record.test_end,
                    "data": s.record.audit,
                    "members": s.record.members.iter().map(|m| serde_json::json!({
                        "seed": m.seed,
                        "checkpoint_sha256": m.checkpoint_sha256,
                    })).collect::<Vec<_>>(),
                })).collect::<Vec<_>>(),
            }),
        )?;
        Ok(())
    }
}
