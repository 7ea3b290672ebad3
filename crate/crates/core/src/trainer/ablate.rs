use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::model::HeadKind;
use super::{train, TrainConfig, TrainError, Views};
use crate::scalar::Scalar;
use crate::taskgen::Panel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGrid {
    /// Full model, no contrastive loss, pooled-MLP head.
    Components,
    /// Both views, weak views only, strong views only.
    Augment,
    K,
    Lambda,
    /// The base config alone.
    Single,
}

impl FromStr for AblationGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "components" => Self::Components,
            "augment" => Self::Augment,
            "k" => Self::K,
            "lambda" => Self::Lambda,
            "single" => Self::Single,
            _ => return Err(format!("unknown grid {s:?} (expected components, augment, k, lambda or single)")),
        })
    }
}

pub const K_VALUES: [usize; 4] = [1, 2, 3, 4];
pub const LAMBDA_VALUES: [f64; 4] = [0.02, 0.05, 0.10, 0.20];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub id: String,
    pub config: TrainConfig,
}

pub fn grid_cells(base: &TrainConfig, grid: AblationGrid) -> Vec<AblationCell> {
    let cell = |id: String, f: &dyn Fn(&mut TrainConfig)| {
        let mut config = base.clone();
        f(&mut config);
        AblationCell { id, config }
    };
    match grid {
        AblationGrid::Single => vec![cell("base".into(), &|_| {})],
        AblationGrid::Components => vec![
            cell("full".into(), &|c| {
                c.contrastive = true;
                c.model.head = HeadKind::Parm;
            }),
            cell("no_acl".into(), &|c| {
                c.contrastive = false;
                c.model.head = HeadKind::Parm;
            }),
            cell("no_parm".into(), &|c| {
                c.contrastive = true;
                c.model.head = HeadKind::PooledMlp;
            }),
        ],
        AblationGrid::Augment => [Views::Both, Views::WeakOnly, Views::StrongOnly]
            .into_iter()
            .map(|v| {
                cell(if v == Views::Both { "acl".into() } else { v.name().into() }, &|c| {
                    c.contrastive = true;
                    c.views = v;
                })
            })
            .collect(),
        AblationGrid::K => K_VALUES.iter().map(|&k| cell(format!("k{k}"), &|c| c.model.parm.k = k)).collect(),
        AblationGrid::Lambda => LAMBDA_VALUES
            .iter()
            .map(|&l| cell(format!("lambda{l:.2}"), &|c| c.model.parm.lambda = l))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cell: String,
    pub seed: u64,
    pub head: HeadKind,
    pub contrastive: bool,
    pub views: Views,
    pub k: usize,
    pub lambda: f64,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// One training run per (cell, seed); each cell's config seed is replaced by
/// the shared seed so cells differ only in the ablated field.
pub fn ablate<T: Scalar>(
    cells: &[AblationCell],
    seeds: &[u64],
    train_set: &[Panel],
    val_set: &[Panel],
    test_set: &[Panel],
    mut on_row: impl FnMut(&ReportRow),
) -> Result<Vec<ReportRow>, TrainError> {
    let mut rows = Vec::new();
    for cell in cells {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cell.config.clone() };
            let out = train::<T>(&cfg, train_set, val_set)?;
            let test = evaluate(&out.model, test_set, cfg.eval_batch_size)?;
            let row = ReportRow {
                cell: cell.id.clone(),
                seed,
                head: cfg.model.head,
                contrastive: cfg.contrastive,
                views: cfg.views,
                k: cfg.model.parm.k,
                lambda: cfg.model.parm.lambda,
                epochs_run: out.history.records.len(),
                best_epoch: out.history.best_epoch,
                val_accuracy: out.history.best_val_accuracy.unwrap_or(f64::NAN),
                test_accuracy: test.accuracy,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_report_csv<W: Write>(mut out: W, rows: &[ReportRow]) -> io::Result<()> {
    writeln!(out, "cell,seed,head,contrastive,views,k,lambda,epochs_run,best_epoch,val_acc,test_acc")?;
    for r in rows {
        let head = match r.head {
            HeadKind::Parm => "parm",
            HeadKind::PooledMlp => "pooled_mlp",
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{:.2},{},{},{},{}",
            r.cell,
            r.seed,
            head,
            r.contrastive,
            r.views.name(),
            r.k,
            r.lambda,
            r.epochs_run,
            r.best_epoch.map_or(String::new(), |e| e.to_string()),
            r.val_accuracy,
            r.test_accuracy
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_grid_carries_the_ablation_values() {
        let cells = grid_cells(&TrainConfig::default(), AblationGrid::Lambda);
        let got: Vec<f64> = cells.iter().map(|c| c.config.model.parm.lambda).collect();
        assert_eq!(got, vec![0.02, 0.05, 0.10, 0.20]);
        let mut csv = Vec::new();
        let rows: Vec<ReportRow> = cells
            .iter()
            .map(|c| ReportRow {
                cell: c.id.clone(),
                seed: 0,
                head: HeadKind::Parm,
                contrastive: true,
                views: Views::Both,
                k: 3,
                lambda: c.config.model.parm.lambda,
                epochs_run: 0,
                best_epoch: None,
                val_accuracy: 0.25,
                test_accuracy: 0.25,
            })
            .collect();
        write_report_csv(&mut csv, &rows).unwrap();
        let col: Vec<String> = String::from_utf8(csv)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(6).unwrap().to_string())
            .collect();
        assert_eq!(col, ["0.02", "0.05", "0.10", "0.20"]);
    }

    #[test]
    fn k_grid_has_four_cells() {
        let ks: Vec<usize> = grid_cells(&TrainConfig::default(), AblationGrid::K)
            .iter()
            .map(|c| c.config.model.parm.k)
            .collect();
        assert_eq!(ks, K_VALUES);
        assert_eq!(grid_cells(&TrainConfig::default(), AblationGrid::Single).len(), 1);
        assert_eq!("augment".parse::<AblationGrid>(), Ok(AblationGrid::Augment));
        assert!("bogus".parse::<AblationGrid>().is_err());
    }
}
