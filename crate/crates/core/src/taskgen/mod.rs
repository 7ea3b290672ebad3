//! Procedural four-image outlier panels.
//!
//! Every panel owns a ChaCha8 stream seeded from its 64-bit seed, so panels
//! can be generated in any order or in parallel with identical results.

pub mod dataset;
pub mod panel;
pub mod raster;
pub mod rng;
pub mod rules;
pub mod scene;

use std::path::PathBuf;

use thiserror::Error;

pub use dataset::{generate_split, generate_to_dir, load_split, write_split, DatasetInfo, ManifestRecord, Split};
pub use panel::{sample_panel, sample_panel_with, Panel};
pub use raster::{rasterize, Resolution, RgbImage};
pub use rules::{check_panel, lookup_rule, rule_catalog, Attribute, GenOptions, RuleSpec};
pub use scene::{SceneObject, Shape, ShapeKind};

/// Bumped whenever the same (rule, seed) would render differently.
pub const GENERATOR_VERSION: &str = "cvrlab-taskgen/1";

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
    #[error("resolution {0} not supported (use 32, 64 or 128)")]
    Resolution(usize),
    #[error("object {index} does not fit inside the canvas")]
    OutOfCanvas { index: usize },
    #[error("object {index} is smaller than 2 pixels")]
    TooSmall { index: usize },
    #[error("could not place objects without overlap after {attempts} attempts")]
    Placement { attempts: usize },
    #[error("panel {id}: {reason}")]
    Record { id: String, reason: String },
    #[error("{path}: {reason}")]
    Data { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TaskGenError {
    /// True for errors that point at a malformed dataset on disk.
    pub fn is_data_error(&self) -> bool {
        matches!(self, TaskGenError::Record { .. } | TaskGenError::Data { .. } | TaskGenError::Io(_))
    }
}
