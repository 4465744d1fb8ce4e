use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::RunArtifacts;
use super::config::ExperimentConfig;
use super::inference::{evaluate_run, run_split_inference, Translator};
use super::manifest::{Manifest, Split};
use super::stages::{run_stage1, run_stage2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub codebook: usize,
    pub time_reduction: usize,
    pub token_bleu: Option<f64>,
    pub token_error_rate: Option<f64>,
    /// Set when the cell failed; its metrics are then absent.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub split: Split,
    pub rows: Vec<GridRow>,
}

impl GridReport {
    /// Tab-separated, one row per cell; failed cells show `-`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("codebook\ttime_reduction\ttoken_BLEU\ttoken_error_rate\n");
        let cell = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.codebook,
                r.time_reduction,
                cell(r.token_bleu, 2),
                cell(r.token_error_rate, 4)
            );
        }
        out
    }
}

/// Trains and scores one grid cell in `dir`.
pub fn run_cell(manifest: &Manifest, cfg: &ExperimentConfig, dir: &Path, split: Split) -> Result<(f64, f64)> {
    let run = RunArtifacts::create(dir, cfg)?;
    run_stage1(manifest, cfg, &run)?;
    run_stage2(manifest, cfg, &run)?;
    let translator = Translator::load(&run, cfg)?;
    run_split_inference(manifest, &translator, &run, split, false)?;
    let report = evaluate_run(manifest, &run, split, None, cfg.eval.smoothing)?;
    Ok((report.corpus.bleu, report.token_error_rate))
}

/// Runs every `(K, r)` cell of `cfg.grid` under `out_dir/K{K}_r{r}` and
/// writes `grid.tsv` and `grid.json`. A failing cell becomes a `-` row and
/// the remaining cells still run.
pub fn run_grid(manifest: &Manifest, cfg: &ExperimentConfig, out_dir: &Path) -> Result<GridReport> {
    cfg.validate()?;
    let split: Split = cfg.eval.split.parse()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cells: Vec<(usize, usize)> = cfg
        .grid
        .codebook_sizes
        .iter()
        .flat_map(|&k| cfg.grid.time_reductions.iter().map(move |&r| (k, r)))
        .collect();
    let run_one = |&(k, r): &(usize, usize)| -> GridRow {
        let cell_cfg = cfg.with_cell(k, r);
        let dir = out_dir.join(format!("K{k}_r{r}"));
        match run_cell(manifest, &cell_cfg, &dir, split) {
            Ok((bleu, ter)) => GridRow {
                codebook: k,
                time_reduction: r,
                token_bleu: Some(bleu),
                token_error_rate: Some(ter),
                error: None,
            },
            Err(e) => {
                log::warn!("grid cell K={k} r={r} failed: {e}");
                GridRow {
                    codebook: k,
                    time_reduction: r,
                    token_bleu: None,
                    token_error_rate: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    let rows: Vec<GridRow> = if cfg.grid.parallel {
        cells.par_iter().map(run_one).collect()
    } else {
        cells.iter().map(run_one).collect()
    };
    let report = GridReport { split, rows };
    let tsv = out_dir.join("grid.tsv");
    std::fs::write(&tsv, report.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
    let json = out_dir.join("grid.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_cells_render_as_dashes() {
        let report = GridReport {
            split: Split::Test,
            rows: vec![
                GridRow {
                    codebook: 32,
                    time_reduction: 4,
                    token_bleu: Some(41.234),
                    token_error_rate: Some(0.25),
                    error: None,
                },
                GridRow {
                    codebook: 64,
                    time_reduction: 8,
                    token_bleu: None,
                    token_error_rate: None,
                    error: Some("boom".into()),
                },
            ],
        };
        let tsv = report.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "codebook\ttime_reduction\ttoken_BLEU\ttoken_error_rate");
        assert_eq!(lines[1], "32\t4\t41.23\t0.2500");
        assert_eq!(lines[2], "64\t8\t-\t-");
    }
}
