//! On-disk splits: `manifest.jsonl`, `dataset.json` and `img/<id>_<slot>.ppm`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::panel::{sample_panel_reseeding, Panel};
use super::raster::{Resolution, RgbImage};
use super::rng::{derive, fnv1a};
use super::rules::{GenOptions, RuleSpec};
use super::{TaskGenError, GENERATOR_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub rule: String,
    pub outlier: usize,
    pub seed: u64,
}

/// Contents of `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub split: Split,
    pub resolution: usize,
    pub generator_version: String,
    pub master_seed: u64,
    pub rules: Vec<String>,
    pub per_rule: usize,
}

pub fn panel_seed(master: u64, split: Split, rule: &str, index: usize) -> u64 {
    derive(&[master, fnv1a(split.name()), fnv1a(rule), index as u64])
}

/// Generates `per_rule` panels for each rule, rule-major. Parallel and
/// serial generation agree because each panel seeds its own stream.
pub fn generate_split(
    rules: &[RuleSpec],
    per_rule: usize,
    split: Split,
    master_seed: u64,
    res: Resolution,
) -> Result<Vec<Panel>, TaskGenError> {
    let jobs: Vec<(&RuleSpec, usize)> = rules
        .iter()
        .flat_map(|r| (0..per_rule).map(move |i| (r, i)))
        .collect();
    jobs.par_iter()
        .map(|&(rule, i)| {
            let seed = panel_seed(master_seed, split, rule.name(), i);
            let mut p = sample_panel_reseeding(rule, seed, res, &GenOptions::default())?;
            p.id = format!("{}-{i:06}", rule.name());
            Ok(p)
        })
        .collect()
}

pub fn image_path(dir: &Path, id: &str, slot: usize) -> PathBuf {
    dir.join("img").join(format!("{id}_{slot}.ppm"))
}

pub fn write_split(dir: &Path, info: &DatasetInfo, panels: &[Panel]) -> Result<(), TaskGenError> {
    fs::create_dir_all(dir.join("img"))?;
    let mut manifest = Vec::new();
    for p in panels {
        let rec = ManifestRecord {
            id: p.id.clone(),
            rule: p.rule.clone(),
            outlier: p.outlier_index,
            seed: p.seed,
        };
        serde_json::to_writer(&mut manifest, &rec).expect("record serializes");
        manifest.push(b'\n');
        for (slot, img) in p.images.iter().enumerate() {
            fs::write(image_path(dir, &p.id, slot), img.to_ppm())?;
        }
    }
    fs::write(dir.join("manifest.jsonl"), manifest)?;
    let mut f = fs::File::create(dir.join("dataset.json"))?;
    serde_json::to_writer_pretty(&mut f, info).expect("info serializes");
    f.write_all(b"\n")?;
    Ok(())
}

/// Generates and writes one split, returning its description.
pub fn generate_to_dir(
    dir: &Path,
    rules: &[RuleSpec],
    per_rule: usize,
    split: Split,
    master_seed: u64,
    res: Resolution,
) -> Result<DatasetInfo, TaskGenError> {
    let panels = generate_split(rules, per_rule, split, master_seed, res)?;
    let info = DatasetInfo {
        split,
        resolution: res.px(),
        generator_version: GENERATOR_VERSION.to_string(),
        master_seed,
        rules: rules.iter().map(|r| r.name().to_string()).collect(),
        per_rule,
    };
    write_split(dir, &info, &panels)?;
    Ok(info)
}

fn data_err(path: &Path, reason: impl Into<String>) -> TaskGenError {
    TaskGenError::Data {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>, TaskGenError> {
    let path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| data_err(&path, e.to_string()))?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| data_err(&path, format!("line {}: {e}", n + 1)))?;
        if rec.outlier > 3 {
            return Err(TaskGenError::Record {
                id: rec.id,
                reason: format!("outlier index {} outside 0..4", rec.outlier),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(TaskGenError::Record {
                id: rec.id,
                reason: "duplicate panel id".into(),
            });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(data_err(&path, "manifest has no records"));
    }
    Ok(records)
}

pub fn read_info(dir: &Path) -> Result<DatasetInfo, TaskGenError> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| data_err(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| data_err(&path, e.to_string()))
}

/// Reads and validates a split; the first offending record is reported.
pub fn load_split(dir: &Path) -> Result<(DatasetInfo, Vec<Panel>), TaskGenError> {
    let info = read_info(dir)?;
    let records = read_manifest(dir)?;
    let panels = records
        .into_iter()
        .map(|rec| {
            let load = |slot: usize| -> Result<RgbImage, TaskGenError> {
                let path = image_path(dir, &rec.id, slot);
                let bytes = fs::read(&path).map_err(|e| TaskGenError::Record {
                    id: rec.id.clone(),
                    reason: format!("{}: {e}", path.display()),
                })?;
                let img = RgbImage::from_ppm(&bytes).map_err(|e| TaskGenError::Record {
                    id: rec.id.clone(),
                    reason: format!("{}: {e}", path.display()),
                })?;
                if img.width() != info.resolution || img.height() != info.resolution {
                    return Err(TaskGenError::Record {
                        id: rec.id.clone(),
                        reason: format!("{} is not {r}x{r}", path.display(), r = info.resolution),
                    });
                }
                Ok(img)
            };
            let images = [load(0)?, load(1)?, load(2)?, load(3)?];
            Ok(Panel {
                id: rec.id,
                rule: rec.rule,
                seed: rec.seed,
                outlier_index: rec.outlier,
                images,
                scenes: Vec::new(),
                violated: None,
            })
        })
        .collect::<Result<Vec<_>, TaskGenError>>()?;
    Ok((info, panels))
}
