//! Grid sweeps over depth, width, sharing and seed.
//!
//! Every grid point becomes one run under `<out>/<name>-s<seed>` and one row
//! of `<out>/sweep.csv`. A failing run is recorded with its error and the
//! sweep moves on. In dry-run mode nothing is trained and only the
//! parameter and FLOP columns are filled.

use std::fs;
use std::path::Path;

use kshare_core::accounting::{count_flops, count_params};
use kshare_core::models::{build, Family};
use serde::{Deserialize, Serialize};

use crate::config::{apply_sharing, RunConfig, RunFile};
use crate::error::{Error, Result};
use crate::metrics::write_atomic;
use crate::train::{train, TrainOptions};

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub depths: Vec<usize>,
    /// ConvMixer width, or the first SE-ResNet stage width (stages double).
    pub channels: Vec<usize>,
    /// Preset or stage names as accepted in config files.
    pub sharing: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dry_run: bool,
}

impl SweepGrid {
    /// The iso-depth ConvMixer grid: depth 20, widths 128 to 1152 in steps
    /// of 128, baseline and two-kernel.
    pub fn iso_depth() -> Self {
        Self {
            depths: vec![20],
            channels: (1..=9).map(|i| 128 * i).collect(),
            sharing: vec!["none".into(), "two_kernel".into()],
            seeds: vec![0],
            dry_run: false,
        }
    }

    /// Fixed width, depths 4 to 24 in steps of 4.
    pub fn iso_channel(channels: usize) -> Self {
        Self {
            depths: vec![4, 8, 12, 16, 20, 24],
            channels: vec![channels],
            sharing: vec!["none".into(), "two_kernel".into()],
            seeds: vec![0],
            dry_run: false,
        }
    }

    pub fn len(&self) -> usize {
        self.depths.len() * self.channels.len() * self.sharing.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concrete run configs in grid order (sharing, channels, depth, seed),
    /// or the error that makes a point invalid.
    pub fn expand(&self, base: &RunConfig) -> Vec<(String, Result<RunConfig>)> {
        let mut out = Vec::new();
        for sharing in &self.sharing {
            for &c in &self.channels {
                for &d in &self.depths {
                    for &seed in &self.seeds {
                        let mut model = base.model.clone();
                        model.depth = d;
                        model.channels = match model.family {
                            Family::ConvMixer => vec![c],
                            Family::SeResnet => vec![c, 2 * c, 4 * c],
                        };
                        let name = format!("{}-c{c}-d{d}-{sharing}-s{seed}", family_name(model.family));
                        let cfg = apply_sharing(&mut model, sharing).and_then(|()| {
                            let mut cfg = base.clone();
                            cfg.name = name.clone();
                            cfg.model = model;
                            cfg.seed = seed;
                            cfg.out_dir = base.out_dir.join(&name);
                            cfg.validate()?;
                            Ok(cfg)
                        });
                        out.push((name, cfg));
                    }
                }
            }
        }
        out
    }
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::ConvMixer => "convmixer",
        Family::SeResnet => "se_resnet",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub family: String,
    pub channels: String,
    pub depth: usize,
    pub sharing: String,
    pub seed: u64,
    pub params: Option<u64>,
    pub flops: Option<u64>,
    pub best_test_acc: Option<f64>,
    pub final_test_acc: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub epochs: usize,
    pub status: String,
}

/// Runs (or, in dry-run mode, costs) every grid point and writes
/// `sweep.csv` and `sweep.json` under `base.out_dir`.
pub fn sweep(base: &RunConfig, grid: &SweepGrid, verbose: bool) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    let mut rows = Vec::new();
    for (name, cfg) in grid.expand(base) {
        let row = match cfg {
            Ok(cfg) => run_point(&name, &cfg, grid.dry_run, verbose),
            Err(e) => failed_row(&name, base, &e),
        };
        if verbose {
            eprintln!("{name}: {}", row.status);
        }
        rows.push(row);
        write_rows(&base.out_dir, &rows)?;
    }
    Ok(rows)
}

fn run_point(name: &str, cfg: &RunConfig, dry_run: bool, verbose: bool) -> SweepRow {
    let m = &cfg.model;
    let mut row = SweepRow {
        name: name.to_string(),
        family: family_name(m.family).to_string(),
        channels: m.channels.iter().map(usize::to_string).collect::<Vec<_>>().join("/"),
        depth: m.depth,
        sharing: m.sharing_label(),
        seed: cfg.seed,
        params: None,
        flops: None,
        best_test_acc: None,
        final_test_acc: None,
        final_train_acc: None,
        epochs: 0,
        status: "ok".into(),
    };
    let costs = build(m).map_err(Error::from).and_then(|(g, p)| Ok((count_params(&g, &p), count_flops(&g)?)));
    match costs {
        Ok((p, f)) => {
            row.params = Some(p);
            row.flops = Some(f);
        }
        Err(e) => {
            row.status = format!("failed: {e}");
            return row;
        }
    }
    if dry_run {
        row.status = "dry_run".into();
        return row;
    }
    let opts = TrainOptions {
        verbose,
        ..Default::default()
    };
    match train(cfg, &opts) {
        Ok(metrics) => {
            row.best_test_acc = metrics.best_test_acc;
            row.final_test_acc = metrics.last().map(|r| r.test_acc);
            row.final_train_acc = metrics.last().map(|r| r.train_acc);
            row.epochs = metrics.epochs.len();
        }
        Err(e) => row.status = format!("failed: {e}"),
    }
    row
}

fn failed_row(name: &str, base: &RunConfig, e: &Error) -> SweepRow {
    SweepRow {
        name: name.to_string(),
        family: family_name(base.model.family).to_string(),
        channels: String::new(),
        depth: 0,
        sharing: String::new(),
        seed: 0,
        params: None,
        flops: None,
        best_test_acc: None,
        final_test_acc: None,
        final_train_acc: None,
        epochs: 0,
        status: format!("failed: {e}"),
    }
}

fn write_rows(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&dir.join("sweep.csv"), &bytes)?;
    write_atomic(&dir.join("sweep.json"), &serde_json::to_vec_pretty(rows)?)
}

/// A sweep file is a run config with an extra `[sweep]` table.
pub fn load_sweep_file(path: &Path) -> Result<(RunConfig, SweepGrid)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sweep(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn parse_sweep(text: &str) -> Result<(RunConfig, SweepGrid)> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let grid = table
        .remove("sweep")
        .ok_or_else(|| Error::Config("missing [sweep] table".into()))?;
    let grid: SweepGrid = grid.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let run: RunFile = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok((run.resolve()?, grid))
}
