use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run, RunRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::longtail_data::{LongTailDataset, SplitGroup};

/// One configuration of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub config: TrainConfig,
}

impl AblationRow {
    fn from_config(config: TrainConfig) -> Self {
        Self {
            label: config.variant_label(),
            config,
        }
    }
}

/// Baseline, each latent component combination, and pooled-feature
/// augmentation on the plain model.
pub fn component_grid(base: &TrainConfig) -> Vec<AblationRow> {
    let with = |latent_on, aug_on, recon_on, raw_isda_baseline| {
        AblationRow::from_config(TrainConfig {
            latent_on,
            aug_on,
            recon_on,
            raw_isda_baseline,
            ..base.clone()
        })
    };
    vec![
        with(false, false, false, false),
        with(true, false, false, false),
        with(true, true, false, false),
        with(true, false, true, false),
        with(true, true, true, false),
        with(false, false, false, true),
    ]
}

/// Full model under each `(α, β)` in `{1, 0.1}²` with `γ = 1`.
pub fn weight_grid(base: &TrainConfig) -> Vec<AblationRow> {
    [(1.0, 1.0), (0.1, 0.1), (1.0, 0.1), (0.1, 1.0)]
        .into_iter()
        .map(|(alpha, beta)| AblationRow {
            label: format!("alpha={alpha},beta={beta}"),
            config: TrainConfig {
                latent_on: true,
                aug_on: true,
                recon_on: true,
                raw_isda_baseline: false,
                alpha,
                beta,
                gamma: 1.0,
                ..base.clone()
            },
        })
        .collect()
}

/// Outcome of one (configuration, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

/// Runs every row under every seed. Rows sharing a seed train on the same
/// dataset realization, built once by `data(seed)`. Cells run in parallel;
/// a failed cell is recorded and the rest of the grid continues.
pub fn run_ablation<F>(rows: &[AblationRow], seeds: &[u64], data: F) -> Result<Vec<AblationCell>>
where
    F: Fn(u64) -> Result<(LongTailDataset, LongTailDataset)> + Sync,
{
    if rows.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("ablation grid needs at least one row and one seed"));
    }
    let datasets: Vec<(LongTailDataset, LongTailDataset)> = seeds.par_iter().map(|&s| data(s)).collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..seeds.len()).map(move |s| (r, s))).collect();
    Ok(cells
        .par_iter()
        .map(|&(r, s)| {
            let row = &rows[r];
            let config = TrainConfig {
                seed: seeds[s],
                ..row.config.clone()
            };
            let (train, val) = &datasets[s];
            match run(&config, train, val, &row.label) {
                Ok(out) => AblationCell {
                    label: row.label.clone(),
                    seed: seeds[s],
                    record: Some(out.record),
                    error: None,
                },
                Err(e) => AblationCell {
                    label: row.label.clone(),
                    seed: seeds[s],
                    record: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

/// Aggregate of the runs sharing a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub overall: MeanStd,
    pub many: Option<MeanStd>,
    pub medium: Option<MeanStd>,
    pub few: Option<MeanStd>,
}

/// Groups records by label in order of first appearance.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in records {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&RunRecord> = records.iter().filter(|r| r.label == label).collect();
            let split = |g: SplitGroup| {
                let vals: Vec<f64> = group.iter().filter_map(|r| r.final_metrics.split(g)).collect();
                MeanStd::of(&vals)
            };
            let overall: Vec<f64> = group.iter().map(|r| r.final_metrics.top1_overall).collect();
            SummaryRow {
                label: label.to_string(),
                runs: group.len(),
                overall: MeanStd::of(&overall).expect("non-empty group"),
                many: split(SplitGroup::Many),
                medium: split(SplitGroup::Medium),
                few: split(SplitGroup::Few),
            }
        })
        .collect()
}

fn cell(v: Option<MeanStd>) -> String {
    match v {
        Some(m) => format!("{:6.2} ± {:5.2}", 100.0 * m.mean, 100.0 * m.std),
        None => "n/a".into(),
    }
}

/// Aligned text table of top-1 accuracy in percent.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("variant".len());
    let mut out = format!(
        "{:<width$}  {:>4}  {:>15}  {:>15}  {:>15}  {:>15}\n",
        "variant", "runs", "overall", "many", "medium", "few"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>4}  {:>15}  {:>15}  {:>15}  {:>15}\n",
            r.label,
            r.runs,
            cell(Some(r.overall)),
            cell(r.many),
            cell(r.medium),
            cell(r.few)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::{tiny_config, tiny_data};

    #[test]
    fn component_grid_rows() {
        let labels: Vec<String> = component_grid(&TrainConfig::default()).into_iter().map(|r| r.label).collect();
        assert_eq!(labels, ["baseline", "+latent", "+latent+aug", "+latent+recon", "full", "raw-isda"]);
        for row in component_grid(&TrainConfig::default()) {
            row.config.validate().unwrap();
        }
    }

    #[test]
    fn population_stdev() {
        let m = MeanStd::of(&[1.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn grid_shares_data_and_records_failures() {
        let base = TrainConfig {
            stage1_iters: 10,
            stage2_iters: 2,
            ..tiny_config()
        };
        let mut rows = component_grid(&base)[..2].to_vec();
        rows.push(AblationRow {
            label: "broken".into(),
            config: TrainConfig { lr: 1e9, ..base.clone() },
        });
        let cells = run_ablation(&rows, &[1, 2], |s| Ok(tiny_data(s))).unwrap();
        assert_eq!(cells.len(), 6);
        let ok: Vec<&RunRecord> = cells.iter().filter_map(|c| c.record.as_ref()).collect();
        assert_eq!(ok.len(), 4);
        assert!(cells.iter().filter(|c| c.label == "broken").all(|c| c.error.is_some()));
        // Same seed ⇒ same split derived from the same training counts.
        assert_eq!(ok[0].split, ok[2].split);
        let owned: Vec<RunRecord> = ok.into_iter().cloned().collect();
        let table = summarize(&owned);
        assert_eq!(table.len(), 2);
        assert_eq!(table[0].runs, 2);
        assert!(render_table(&table).lines().count() == 3);
    }
}
