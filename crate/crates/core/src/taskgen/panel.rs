use rand::Rng;

use super::raster::{rasterize, Resolution, RgbImage};
use super::rng::{splitmix64, stream};
use super::rules::{normal_template, sample_scene, violate, Attribute, GenOptions, RuleSpec};
use super::scene::SceneObject;
use super::TaskGenError;

/// Four images, one of which breaks the panel's rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub id: String,
    pub rule: String,
    pub seed: u64,
    pub outlier_index: usize,
    pub images: [RgbImage; 4],
    /// Scene parameters per slot; empty for panels read back from disk.
    pub scenes: Vec<Vec<SceneObject>>,
    pub violated: Option<Attribute>,
}

impl Panel {
    pub fn resolution(&self) -> usize {
        self.images[0].width()
    }
}

pub fn sample_panel(rule: &RuleSpec, seed: u64, res: Resolution) -> Result<Panel, TaskGenError> {
    sample_panel_with(rule, seed, res, &GenOptions::default())
}

pub fn sample_panel_with(
    rule: &RuleSpec,
    seed: u64,
    res: Resolution,
    opts: &GenOptions,
) -> Result<Panel, TaskGenError> {
    let mut rng = stream(seed);
    let outlier_index = rng.gen_range(0..4);
    let normal = normal_template(rule, opts, &mut rng);
    let (broken, violated) = violate(&normal, rule, opts, &mut rng);
    let mut scenes = Vec::with_capacity(4);
    for slot in 0..4 {
        let template = if slot == outlier_index { &broken } else { &normal };
        scenes.push(sample_scene(template, opts, &mut rng)?);
    }
    let images = [
        rasterize(&scenes[0], res)?,
        rasterize(&scenes[1], res)?,
        rasterize(&scenes[2], res)?,
        rasterize(&scenes[3], res)?,
    ];
    Ok(Panel {
        id: String::new(),
        rule: rule.name().to_string(),
        seed,
        outlier_index,
        images,
        scenes,
        violated: Some(violated),
    })
}

/// Redraws the seed with splitmix64 until a panel places successfully.
pub fn sample_panel_reseeding(
    rule: &RuleSpec,
    seed: u64,
    res: Resolution,
    opts: &GenOptions,
) -> Result<Panel, TaskGenError> {
    let mut s = seed;
    let mut last = None;
    for _ in 0..64 {
        match sample_panel_with(rule, s, res, opts) {
            Ok(p) => return Ok(p),
            Err(e @ (TaskGenError::Placement { .. } | TaskGenError::TooSmall { .. } | TaskGenError::OutOfCanvas { .. })) => {
                last = Some(e);
                s = splitmix64(s);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::rules::{check_panel, lookup_rule, rule_catalog};
    use crate::taskgen::scene::ShapeKind;

    fn res64() -> Resolution {
        Resolution::new(64).unwrap()
    }

    #[test]
    fn same_seed_same_panel() {
        let rule = lookup_rule("size").unwrap();
        let a = sample_panel(&rule, 42, res64()).unwrap();
        let b = sample_panel(&rule, 42, res64()).unwrap();
        assert_eq!(a, b);
        let c = sample_panel(&rule, 43, res64()).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn count_outlier_has_an_extra_object_worth_of_pixels() {
        let rule = lookup_rule("count").unwrap();
        let opts = GenOptions {
            fixed_color: Some([255, 255, 255]),
            fixed_size: Some(0.1),
            fixed_shape: Some(ShapeKind::Circle),
            counts: Some((1, 2)),
        };
        for seed in 0..20 {
            let p = sample_panel_reseeding(&rule, seed, res64(), &opts).unwrap();
            // One disc of radius 0.1 at 64 px covers about pi * 6.4^2 pixels.
            let object_area = std::f64::consts::PI * 6.4 * 6.4;
            let outlier_px = p.images[p.outlier_index].nonzero_pixels() as f64;
            for (slot, img) in p.images.iter().enumerate() {
                if slot != p.outlier_index {
                    assert!(outlier_px - img.nonzero_pixels() as f64 >= 0.9 * object_area, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn every_rule_passes_its_conformance_check() {
        for rule in rule_catalog() {
            for seed in 0..100u64 {
                let p = sample_panel_reseeding(&rule, seed, res64(), &GenOptions::default()).unwrap();
                check_panel(&rule, &p.scenes, p.outlier_index)
                    .unwrap_or_else(|e| panic!("{} seed {seed}: {e}", rule.name()));
            }
        }
    }

    #[test]
    fn outlier_slot_is_uniform() {
        let rule = lookup_rule("position").unwrap();
        let mut counts = [0usize; 4];
        for seed in 0..1000u64 {
            let p = sample_panel_reseeding(&rule, seed, res64(), &GenOptions::default()).unwrap();
            counts[p.outlier_index] += 1;
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 250.0).powi(2) / 250.0).sum();
        assert!(chi2 < 11.345, "chi-square {chi2} for {counts:?}");
    }
}
