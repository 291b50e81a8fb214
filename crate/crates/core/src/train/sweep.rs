use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, EvalOptions, TrainConfig};
use crate::cluster::MetricReport;
use crate::data::{inject_noise, MultiViewDataset, NoiseSpec};
use crate::error::{Error, Result};

/// Equal missing/observation ratios of the standard noise protocol.
pub const PRESET_RATIOS: [f64; 4] = [0.0, 0.2, 0.5, 0.8];

pub fn equal_ratio_grid(ratios: &[f64]) -> Vec<(f64, f64)> {
    ratios.iter().map(|&r| (r, r)).collect()
}

/// One (method, noise setting, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub missing_ratio: f64,
    pub observation_ratio: f64,
    pub seed: u64,
    pub metrics: Option<MetricReport>,
    pub error: Option<String>,
}

/// Seed-averaged results for one (method, noise setting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub method: String,
    pub missing_ratio: f64,
    pub observation_ratio: f64,
    pub runs: usize,
    pub failed: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub nmi_mean: f64,
    pub nmi_std: f64,
    pub ari_mean: f64,
    pub ari_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepTable {
    /// One row per (method, noise setting) in first-seen order.
    pub fn summary(&self) -> Vec<SweepSummary> {
        let mut order = Vec::new();
        let mut groups: BTreeMap<usize, Vec<&SweepCell>> = BTreeMap::new();
        for cell in &self.cells {
            let key = (
                cell.method.as_str(),
                cell.missing_ratio.to_bits(),
                cell.observation_ratio.to_bits(),
            );
            let idx = match order.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    order.push(key);
                    order.len() - 1
                }
            };
            groups.entry(idx).or_default().push(cell);
        }
        groups
            .into_values()
            .map(|cells| {
                let ok: Vec<MetricReport> = cells.iter().filter_map(|c| c.metrics).collect();
                let (acc_mean, acc_std) = mean_std(&ok.iter().map(|m| m.acc).collect::<Vec<_>>());
                let (nmi_mean, nmi_std) = mean_std(&ok.iter().map(|m| m.nmi).collect::<Vec<_>>());
                let (ari_mean, ari_std) = mean_std(&ok.iter().map(|m| m.ari).collect::<Vec<_>>());
                SweepSummary {
                    method: cells[0].method.clone(),
                    missing_ratio: cells[0].missing_ratio,
                    observation_ratio: cells[0].observation_ratio,
                    runs: ok.len(),
                    failed: cells.len() - ok.len(),
                    acc_mean,
                    acc_std,
                    nmi_mean,
                    nmi_std,
                    ari_mean,
                    ari_std,
                }
            })
            .collect()
    }

    /// Mean ACC of `method` at the given missing ratio.
    pub fn mean_acc(&self, method: &str, missing_ratio: f64) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.method == method && s.missing_ratio == missing_ratio && s.runs > 0)
            .map(|s| s.acc_mean)
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path.as_ref(), &self.summary())
    }

    pub fn write_cells_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            method: &'a str,
            missing_ratio: f64,
            observation_ratio: f64,
            seed: u64,
            acc: Option<f64>,
            nmi: Option<f64>,
            ari: Option<f64>,
            error: &'a str,
        }
        let rows: Vec<Row<'_>> = self
            .cells
            .iter()
            .map(|c| Row {
                method: &c.method,
                missing_ratio: c.missing_ratio,
                observation_ratio: c.observation_ratio,
                seed: c.seed,
                acc: c.metrics.map(|m| m.acc),
                nmi: c.metrics.map(|m| m.nmi),
                ari: c.metrics.map(|m| m.ari),
                error: c.error.as_deref().unwrap_or(""),
            })
            .collect();
        write_rows(path.as_ref(), &rows)
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::ingest(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains and evaluates every method on every noise setting and seed.
///
/// Noise is injected into `ds` with the run's seed, so seeds vary both the
/// corruption and the initialization. A failing cell is recorded and the
/// sweep moves on.
pub fn sweep(
    ds: &MultiViewDataset,
    methods: &[(String, TrainConfig)],
    grid: &[(f64, f64)],
    seeds: &[u64],
    observation_std: f64,
    mut on_cell: impl FnMut(&SweepCell),
) -> Result<SweepTable> {
    if methods.is_empty() || grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one method, noise setting and seed".into(),
        ));
    }
    if ds.labels.is_none() {
        return Err(Error::InvalidArgument("sweep needs a labelled dataset".into()));
    }
    let mut table = SweepTable::default();
    for &(missing_ratio, observation_ratio) in grid {
        for &seed in seeds {
            let spec = NoiseSpec {
                missing_ratio,
                observation_ratio,
                observation_std,
                seed,
            };
            let noisy = inject_noise(ds, &spec);
            for (method, base) in methods {
                let cfg = TrainConfig { seed, ..base.clone() };
                let outcome = noisy.as_ref().map_err(|e| e.to_string()).and_then(|noisy| {
                    let run = train(noisy, &cfg).map_err(|e| e.to_string())?;
                    match run.record.final_metrics() {
                        Some(m) => Ok(m),
                        None => evaluate(&run.model, noisy, &EvalOptions::from(&cfg))
                            .map_err(|e| e.to_string())?
                            .metrics
                            .ok_or_else(|| "no metrics".to_string()),
                    }
                });
                let cell = SweepCell {
                    method: method.clone(),
                    missing_ratio,
                    observation_ratio,
                    seed,
                    metrics: outcome.as_ref().ok().copied(),
                    error: outcome.err(),
                };
                if let Some(e) = &cell.error {
                    log::warn!("{method} at ({missing_ratio}, {observation_ratio}) seed {seed} failed: {e}");
                }
                on_cell(&cell);
                table.cells.push(cell);
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;

    fn cell(method: &str, ratio: f64, seed: u64, acc: Option<f64>) -> SweepCell {
        SweepCell {
            method: method.into(),
            missing_ratio: ratio,
            observation_ratio: ratio,
            seed,
            metrics: acc.map(|a| MetricReport {
                acc: a,
                nmi: a / 2.0,
                ari: a / 4.0,
            }),
            error: acc.is_none().then(|| "boom".into()),
        }
    }

    #[test]
    fn summary_means_are_arithmetic_means() {
        let table = SweepTable {
            cells: vec![
                cell("full", 0.0, 1, Some(0.9)),
                cell("full", 0.0, 2, Some(0.7)),
                cell("full", 0.5, 1, Some(0.6)),
                cell("full", 0.5, 2, None),
            ],
        };
        let s = table.summary();
        assert_eq!(s.len(), 2);
        assert!((s[0].acc_mean - 0.8).abs() < 1e-12);
        assert!((s[0].acc_std - (0.02f64).sqrt()).abs() < 1e-12);
        assert_eq!((s[1].runs, s[1].failed), (1, 1));
        assert_eq!(table.mean_acc("full", 0.5), Some(0.6));
    }

    #[test]
    fn csv_round_trips() {
        let table = SweepTable {
            cells: vec![cell("full", 0.2, 1, Some(0.5)), cell("no-ncon", 0.2, 1, Some(0.4))],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        table.write_summary_csv(&path).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        let headers = r.headers().unwrap().clone();
        assert_eq!(&headers[0], "method");
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            for field in row.iter().skip(1) {
                field.parse::<f64>().unwrap();
            }
        }
    }

    #[test]
    fn single_cell_equals_one_run() {
        let ds = make_synthetic(60, 3, 2, &[5, 6], 4.0, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 32,
            latent_dim: 4,
            hidden: vec![8, 8, 4],
            kmeans_restarts: 2,
            eval_every: 0,
            ..TrainConfig::new(3)
        };
        let table = sweep(&ds, &[("full".into(), cfg.clone())], &[(0.2, 0.2)], &[7], 0.5, |_| {}).unwrap();
        let noisy = inject_noise(&ds, &NoiseSpec::equal(0.2, 7)).unwrap();
        let run = train(&noisy, &TrainConfig { seed: 7, ..cfg }).unwrap();
        assert_eq!(table.cells[0].metrics, run.record.final_metrics());
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let ds = make_synthetic(30, 3, 2, &[3, 3], 4.0, 0).unwrap();
        assert!(sweep(&ds, &[("full".into(), TrainConfig::new(3))], &[], &[1], 0.5, |_| {}).is_err());
        assert!(sweep(
            &ds,
            &[("full".into(), TrainConfig::new(3))],
            &[(0.0, 0.0)],
            &[],
            0.5,
            |_| {}
        )
        .is_err());
    }
}
