//! Grid sweeps, reference-router split sweeps and trade-off analysis.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use crate::balancing::Method;
use crate::error::{Error, Result};
use crate::metrics::rank_correlation;
use crate::splitter::{derive_token_split, SplitTarget, TokenSplit};

use super::config::{RunConfig, SplitMode};
use super::run::{prepare, read_record, run_prepared, Prepared, RunStatus, RunSummary, SUMMARY_HEADER};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub method: Method,
    pub scope: usize,
    pub strength: Option<f64>,
    pub capacity: f64,
}

impl GridCell {
    pub fn name(&self) -> String {
        let strength = self.strength.map_or("na".to_string(), |s| format!("{:e}", s));
        format!("{}_s{}_l{}_c{}", self.method, self.scope, strength, self.capacity)
    }
}

/// Cartesian product of the grid lists, minus combinations that do not exist:
/// expert bias outside global scope, and strengths on methods without one.
pub fn grid_cells(cfg: &RunConfig) -> Vec<GridCell> {
    let g = &cfg.grid;
    let global = cfg.train.batch_size;
    let mut out = Vec::new();
    for &method in &g.methods {
        for &scope in &g.scopes {
            if method == Method::Eb && scope != global {
                continue;
            }
            let strengths: Vec<Option<f64>> = match method {
                Method::Lbl => g.strengths.iter().copied().map(Some).collect(),
                Method::Eb if !g.eb_strengths.is_empty() => g.eb_strengths.iter().copied().map(Some).collect(),
                Method::Eb => g.strengths.iter().copied().map(Some).collect(),
                _ => vec![None],
            };
            for &strength in &strengths {
                for &capacity in &g.capacity_factors {
                    out.push(GridCell {
                        method,
                        scope,
                        strength,
                        capacity,
                    });
                }
            }
        }
    }
    out
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn cell_config(base: &RunConfig, cell: &GridCell) -> RunConfig {
    let mut c = base.clone();
    c.balancing.method = cell.method;
    c.balancing.scope = cell.scope;
    c.balancing.strength = cell.strength.unwrap_or(0.0);
    c.balancing.capacity_factor = cell.capacity;
    if base.balancing.micro_batch != 0 {
        c.balancing.micro_batch = gcd(base.balancing.micro_batch, cell.scope);
    }
    c.output_dir = base.output_dir.join(cell.name());
    c
}

fn failed_row(cell: &GridCell, err: &Error) -> RunSummary {
    RunSummary {
        method: cell.method,
        scope: cell.scope,
        strength: cell.strength,
        capacity: cell.capacity,
        utilization: f64::NAN,
        purity: None,
        val_loss: None,
        drop_frac: f64::NAN,
        status: RunStatus::Failed(err.to_string()),
    }
}

/// Run every cell, reusing finished runs whose config digest matches. The
/// summary is appended in cell order as runs finish.
pub fn run_grid(base: &RunConfig, workers: Option<usize>) -> Result<Vec<RunSummary>> {
    let cells = grid_cells(base);
    if cells.is_empty() {
        return Err(Error::config("grid is empty after pruning invalid combinations"));
    }
    let configs: Vec<RunConfig> = cells.iter().map(|c| cell_config(base, c)).collect();
    for c in &configs {
        c.validate()?;
    }
    let prepared = prepare(base)?;
    fs::create_dir_all(&base.output_dir)?;
    let summary_path = base.output_dir.join("summary.tsv");
    let mut out = BufWriter::new(File::create(&summary_path)?);
    writeln!(out, "{}", SUMMARY_HEADER)?;
    out.flush()?;
    let workers = workers.unwrap_or(base.grid.workers).max(1).min(cells.len());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, RunSummary)>();
    let mut rows: Vec<Option<RunSummary>> = vec![None; cells.len()];
    std::thread::scope(|s| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, configs, cells, prepared) = (&next, &configs, &cells, &prepared);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let row = run_cell(&configs[i], &cells[i], prepared);
                if tx.send((i, row)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut written = 0;
        for (i, row) in rx {
            rows[i] = Some(row);
            while written < rows.len() {
                let Some(r) = &rows[written] else { break };
                writeln!(out, "{}", r.to_row())?;
                out.flush()?;
                written += 1;
            }
        }
        Ok(())
    })?;
    Ok(rows.into_iter().map(|r| r.expect("every cell reports")).collect())
}

fn run_cell(cfg: &RunConfig, cell: &GridCell, prepared: &Prepared) -> RunSummary {
    if let Ok(digest) = cfg.digest() {
        if let Ok((old, summary)) = read_record(&cfg.output_dir) {
            if old == digest && !matches!(summary.status, RunStatus::Failed(_)) {
                log::info!("{}: reusing finished run", cfg.output_dir.display());
                return summary;
            }
        }
    }
    match run_prepared(cfg, prepared) {
        Ok(r) => r.summary,
        Err(e) => {
            log::error!("{}: {}", cfg.output_dir.display(), e);
            failed_row(cell, &e)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub realized_ratio: Option<f64>,
    pub val_loss: Option<f64>,
    pub purity: Option<f64>,
    pub utilization: Option<f64>,
    pub status: String,
}

pub const SWEEP_HEADER: &str = "ratio\trealized_ratio\tval_loss\tpurity\tutilization\tstatus";

fn na(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| x.to_string())
}

impl SweepRow {
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.ratio,
            na(self.realized_ratio),
            na(self.val_loss),
            na(self.purity),
            na(self.utilization),
            self.status
        )
    }
}

/// Ratio 0 trains the learned router; ratios in (0, 1) mask the classifier's
/// T_D at that occurrence share; ratio 1 masks every token.
pub fn run_reference_sweep(base: &RunConfig, ratios: &[f64]) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() {
        return Err(Error::config("sweep needs at least one ratio"));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::config(format!("split ratio {} outside [0, 1]", r)));
    }
    let mut cfg = base.clone();
    cfg.split.mode = SplitMode::Classifier;
    cfg.split.target_ratio = None;
    let prepared = prepare(&cfg)?;
    let classifier = prepared.classifier.clone().expect("classifier mode trains a classifier");
    fs::create_dir_all(&base.output_dir)?;
    let mut out = BufWriter::new(File::create(base.output_dir.join("sweep.tsv"))?);
    writeln!(out, "# classifier held-out accuracy {}", classifier.held_out_accuracy)?;
    writeln!(out, "{}", SWEEP_HEADER)?;
    out.flush()?;
    let mut rows = Vec::new();
    for &ratio in ratios {
        let mut run_cfg = cfg.clone();
        run_cfg.output_dir = base.output_dir.join(format!("ratio_{}", ratio));
        let split: Result<TokenSplit> = if ratio == 0.0 {
            run_cfg.balancing.reference = false;
            Ok(TokenSplit::empty(prepared.corpus.vocab_size))
        } else if ratio == 1.0 {
            run_cfg.balancing.reference = true;
            derive_token_split(
                &classifier,
                &prepared.held_out,
                SplitTarget::Threshold(f64::INFINITY),
                cfg.split.weighting,
            )
            .map(|s| s.all_domain_specific(&classifier))
        } else {
            run_cfg.balancing.reference = true;
            derive_token_split(&classifier, &prepared.held_out, SplitTarget::Ratio(ratio), cfg.split.weighting)
        };
        let row = match split {
            Err(e) => SweepRow {
                ratio,
                realized_ratio: None,
                val_loss: None,
                purity: None,
                utilization: None,
                status: format!("unattainable:{}", e),
            },
            Ok(split) => {
                let realized = split.split_ratio;
                let p = Prepared {
                    corpus: prepared.corpus.clone(),
                    split,
                    classifier: None,
                    held_out: prepared.held_out.clone(),
                };
                match run_prepared(&run_cfg, &p) {
                    Ok(r) => SweepRow {
                        ratio,
                        realized_ratio: Some(realized),
                        val_loss: r.summary.val_loss,
                        purity: r.summary.purity,
                        utilization: Some(r.summary.utilization),
                        status: r.summary.status.to_string(),
                    },
                    Err(e) => SweepRow {
                        ratio,
                        realized_ratio: Some(realized),
                        val_loss: None,
                        purity: None,
                        utilization: None,
                        status: RunStatus::Failed(e.to_string()).to_string(),
                    },
                }
            }
        };
        writeln!(out, "{}", row.to_row())?;
        out.flush()?;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffReport {
    pub runs: usize,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
    pub note: String,
}

pub fn read_summary(path: &Path) -> Result<Vec<RunSummary>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some(h) if h == SUMMARY_HEADER => {}
        _ => return Err(Error::Format(format!("{} is not a summary table", path.display()))),
    }
    lines.map(RunSummary::parse_row).collect()
}

/// Rank correlation between `(utilization + purity) / 2` and validation loss
/// over completed runs; the report is written next to the summary.
pub fn analyze_tradeoff(summary: &Path) -> Result<(TradeoffReport, PathBuf)> {
    let rows = read_summary(summary)?;
    let (combined, loss): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.status == RunStatus::Completed)
        .filter_map(|r| Some(((r.utilization + r.purity?) / 2.0, r.val_loss?)))
        .unzip();
    if combined.len() < 3 {
        return Err(Error::input(format!(
            "trade-off analysis needs at least 3 completed runs, found {}",
            combined.len()
        )));
    }
    let report = match rank_correlation(&combined, &loss) {
        Ok((rho, tau)) => TradeoffReport {
            runs: combined.len(),
            spearman: Some(rho),
            kendall: Some(tau),
            note: "ok".into(),
        },
        Err(Error::UndefinedMetric(why)) => TradeoffReport {
            runs: combined.len(),
            spearman: None,
            kendall: None,
            note: format!("undefined: {}", why),
        },
        Err(e) => return Err(e),
    };
    let stem = summary.file_stem().and_then(|s| s.to_str()).unwrap_or("summary");
    let out_path = summary.with_file_name(format!("{}.tradeoff.tsv", stem));
    let mut w = BufWriter::new(File::create(&out_path)?);
    writeln!(w, "# combined metric = (utilization + purity) / 2, ranked against val_loss")?;
    writeln!(w, "runs\tspearman\tkendall\tnote")?;
    writeln!(w, "{}\t{}\t{}\t{}", report.runs, na(report.spearman), na(report.kendall), report.note)?;
    w.flush()?;
    Ok((report, out_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_grid_has_18_cells() {
        assert_eq!(grid_cells(&RunConfig::desk()).len(), 18);
    }

    #[test]
    fn paper_shape_grid_has_98_cells() {
        let mut c = RunConfig::fidelity();
        c.grid.eb_strengths = (0..8).map(|i| 2f64.powi(-i)).collect();
        let cells = grid_cells(&c);
        assert_eq!(cells.len(), 98);
        assert!(cells.iter().all(|c| c.method != Method::Eb || c.scope == 64));
        assert!(cells
            .iter()
            .all(|c| c.strength.is_some() == matches!(c.method, Method::Lbl | Method::Eb)));
    }

    #[test]
    fn eb_pruned_below_global_scope() {
        let mut c = RunConfig::desk();
        c.grid.methods = vec![Method::Eb];
        c.grid.scopes = vec![1];
        assert!(grid_cells(&c).is_empty());
    }

    #[test]
    fn summary_rows_round_trip() {
        let r = RunSummary {
            method: Method::Ba,
            scope: 4,
            strength: None,
            capacity: f64::INFINITY,
            utilization: 0.99,
            purity: Some(0.5),
            val_loss: None,
            drop_frac: 0.0,
            status: RunStatus::Diverged { step: 12 },
        };
        assert_eq!(RunSummary::parse_row(&r.to_row()).unwrap(), r);
    }
}
