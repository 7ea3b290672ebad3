//! Rule catalog, per-rule scene samplers and violators, and the conformance
//! predicates that re-check generated scenes from their parameters.
//!
//! A rule fixes the values of its attributes once per panel (the template).
//! Normal scenes draw everything else independently; the outlier draws from
//! a copy of the template in which exactly one constrained attribute moved.

use std::f64::consts::{PI, TAU};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{angular_distance, distance, in_contact, is_inside, overlaps, SceneObject, Shape, ShapeKind};
use super::TaskGenError;

/// Equal-area radius range for free-standing objects.
pub const SIZE_RANGE: (f64, f64) = (0.07, 0.16);
/// Per-axis range of a shared anchor position.
pub const POSITION_RANGE: (f64, f64) = (0.3, 0.7);
/// Counts used by normal images; outliers move one step.
pub const COUNT_RANGE: (usize, usize) = (1, 3);
/// Colour bins per channel are `value / 32`; objects only use bins 2..=7.
pub const COLOR_BINS: (u8, u8) = (2, 7);
/// Minimum perturbation as a fraction of an attribute's admissible range.
pub const VIOLATION_FRACTION: f64 = 0.25;
/// Minimum rotation change of a violated ROTATION rule.
pub const MIN_ROTATION_CHANGE: f64 = PI / 2.0;
/// Attempts to place a full scene before the panel is rejected.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

const EDGE_MARGIN: f64 = 0.035;
const OBJECT_GAP: f64 = 0.03;
const CONTAINER_SIZE: (f64, f64) = (0.22, 0.28);
const CONTAINEE_SIZE: (f64, f64) = (0.07, 0.09);
const DISC_SIZE: (f64, f64) = (0.08, 0.15);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    Shape,
    Position,
    Size,
    Color,
    Rotation,
    Flip,
    Count,
    Inside,
    Contact,
}

impl Attribute {
    pub const ELEMENTARY: [Attribute; 9] = [
        Attribute::Shape,
        Attribute::Position,
        Attribute::Size,
        Attribute::Color,
        Attribute::Rotation,
        Attribute::Flip,
        Attribute::Count,
        Attribute::Inside,
        Attribute::Contact,
    ];

    /// Attributes that take part in pairwise compositions, in naming order.
    pub const COMPOSABLE: [Attribute; 5] = [
        Attribute::Size,
        Attribute::Position,
        Attribute::Count,
        Attribute::Shape,
        Attribute::Color,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Shape => "shape",
            Attribute::Position => "position",
            Attribute::Size => "size",
            Attribute::Color => "color",
            Attribute::Rotation => "rotation",
            Attribute::Flip => "flip",
            Attribute::Count => "count",
            Attribute::Inside => "inside",
            Attribute::Contact => "contact",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ELEMENTARY.into_iter().find(|a| a.name() == name)
    }
}

/// A named rule over one attribute or a pair of composable attributes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleSpec {
    name: String,
    attributes: Vec<Attribute>,
}

impl RuleSpec {
    pub fn elementary(attribute: Attribute) -> Self {
        Self {
            name: attribute.name().to_string(),
            attributes: vec![attribute],
        }
    }

    /// Pairwise composition; both attributes must be composable and distinct.
    pub fn compose(a: Attribute, b: Attribute) -> Option<Self> {
        let pos = |x| Attribute::COMPOSABLE.iter().position(|&c| c == x);
        let (ia, ib) = (pos(a)?, pos(b)?);
        if ia == ib {
            return None;
        }
        let (first, second) = if ia < ib { (a, b) } else { (b, a) };
        Some(Self {
            name: format!("{}_{}", first.name(), second.name()),
            attributes: vec![first, second],
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn arity(&self) -> usize {
        self.attributes.len()
    }

    pub fn constrains(&self, attribute: Attribute) -> bool {
        self.attributes.contains(&attribute)
    }
}

impl fmt::Display for RuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// The 9 elementary rules followed by the 10 pairwise compositions.
pub fn rule_catalog() -> Vec<RuleSpec> {
    let mut rules: Vec<RuleSpec> = Attribute::ELEMENTARY.into_iter().map(RuleSpec::elementary).collect();
    for (i, &a) in Attribute::COMPOSABLE.iter().enumerate() {
        for &b in &Attribute::COMPOSABLE[i + 1..] {
            rules.push(RuleSpec::compose(a, b).expect("composable pair"));
        }
    }
    rules
}

pub fn lookup_rule(name: &str) -> Result<RuleSpec, TaskGenError> {
    rule_catalog()
        .into_iter()
        .find(|r| r.name == name)
        .ok_or_else(|| TaskGenError::UnknownRule(name.to_string()))
}

/// Overrides for nuisance sampling, used to build controlled panels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenOptions {
    pub fixed_color: Option<[u8; 3]>,
    pub fixed_size: Option<f64>,
    pub fixed_shape: Option<ShapeKind>,
    /// `(normal, outlier)` counts for rules over COUNT.
    pub counts: Option<(usize, usize)>,
}

/// Attribute values shared by every normal image of a panel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Template {
    pub count: Option<usize>,
    pub size: Option<f64>,
    pub position: Option<[f64; 2]>,
    pub shape: Option<Shape>,
    pub color_bins: Option<[u8; 3]>,
    pub rotation: Option<f64>,
    pub flip: Option<bool>,
    pub inside: Option<bool>,
    pub contact: Option<bool>,
    /// Shared asymmetric outline that makes ROTATION and FLIP observable.
    pub carrier: Option<Shape>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..hi)
}

fn random_bins<R: Rng + ?Sized>(rng: &mut R) -> [u8; 3] {
    std::array::from_fn(|_| rng.gen_range(COLOR_BINS.0..=COLOR_BINS.1))
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [u8; 3] {
    let bins = random_bins(rng);
    color_in_bins(rng, bins)
}

fn color_in_bins<R: Rng + ?Sized>(rng: &mut R, bins: [u8; 3]) -> [u8; 3] {
    bins.map(|b| b * 32 + rng.gen_range(0..32u8))
}

pub fn color_bins(rgb: [u8; 3]) -> [u8; 3] {
    rgb.map(|c| c / 32)
}

fn distinct_bins<R: Rng + ?Sized>(rng: &mut R, from: [u8; 3]) -> [u8; 3] {
    loop {
        let cand = random_bins(rng);
        if cand.iter().zip(&from).any(|(a, b)| a.abs_diff(*b) >= 2) {
            return cand;
        }
    }
}

pub fn normal_template<R: Rng + ?Sized>(rule: &RuleSpec, opts: &GenOptions, rng: &mut R) -> Template {
    let mut t = Template::default();
    for &attr in rule.attributes() {
        match attr {
            Attribute::Count => {
                t.count = Some(
                    opts.counts
                        .map(|c| c.0)
                        .unwrap_or_else(|| rng.gen_range(COUNT_RANGE.0..=COUNT_RANGE.1)),
                )
            }
            Attribute::Size => t.size = Some(uniform(rng, SIZE_RANGE)),
            Attribute::Position => t.position = Some([uniform(rng, POSITION_RANGE), uniform(rng, POSITION_RANGE)]),
            Attribute::Shape => {
                let kind = ShapeKind::ALL[rng.gen_range(0..4)];
                t.shape = Some(Shape::sample(kind, rng));
            }
            Attribute::Color => t.color_bins = Some(random_bins(rng)),
            Attribute::Rotation => {
                t.rotation = Some(rng.gen_range(0.0..TAU));
                t.carrier = Some(Shape::random_polygon(rng));
            }
            Attribute::Flip => {
                t.flip = Some(rng.gen_bool(0.5));
                t.carrier = Some(Shape::random_polygon(rng));
            }
            Attribute::Inside => t.inside = Some(rng.gen_bool(0.5)),
            Attribute::Contact => t.contact = Some(rng.gen_bool(0.5)),
        }
    }
    t
}

/// Copy of `normal` with one constrained attribute perturbed past the margin.
pub fn violate<R: Rng + ?Sized>(
    normal: &Template,
    rule: &RuleSpec,
    opts: &GenOptions,
    rng: &mut R,
) -> (Template, Attribute) {
    let attr = rule.attributes()[rng.gen_range(0..rule.arity())];
    let mut t = normal.clone();
    match attr {
        Attribute::Count => {
            let n = normal.count.expect("count template");
            t.count = Some(match opts.counts {
                Some((_, v)) => v,
                None if n == 1 => 2,
                None => {
                    if rng.gen_bool(0.5) {
                        n - 1
                    } else {
                        n + 1
                    }
                }
            });
        }
        Attribute::Size => {
            let s = normal.size.expect("size template");
            let gap = VIOLATION_FRACTION * (SIZE_RANGE.1 - SIZE_RANGE.0);
            let below = (s - gap - SIZE_RANGE.0).max(0.0);
            let above = (SIZE_RANGE.1 - s - gap).max(0.0);
            let u = rng.gen_range(0.0..below + above);
            t.size = Some(if u < below { SIZE_RANGE.0 + u } else { s + gap + (u - below) });
        }
        Attribute::Position => {
            let p = normal.position.expect("position template");
            let gap = VIOLATION_FRACTION * (POSITION_RANGE.1 - POSITION_RANGE.0);
            t.position = Some(loop {
                let q = [uniform(rng, POSITION_RANGE), uniform(rng, POSITION_RANGE)];
                if distance(p, q) >= gap {
                    break q;
                }
            });
        }
        Attribute::Shape => {
            let kind = normal.shape.as_ref().expect("shape template").kind();
            let others: Vec<ShapeKind> = ShapeKind::ALL.into_iter().filter(|&k| k != kind).collect();
            t.shape = Some(Shape::sample(others[rng.gen_range(0..others.len())], rng));
        }
        Attribute::Color => t.color_bins = Some(distinct_bins(rng, normal.color_bins.expect("color template"))),
        Attribute::Rotation => {
            let r = normal.rotation.expect("rotation template");
            t.rotation = Some((r + rng.gen_range(MIN_ROTATION_CHANGE..TAU - MIN_ROTATION_CHANGE)).rem_euclid(TAU));
        }
        Attribute::Flip => t.flip = normal.flip.map(|f| !f),
        Attribute::Inside => t.inside = normal.inside.map(|f| !f),
        Attribute::Contact => t.contact = normal.contact.map(|f| !f),
    }
    (t, attr)
}

fn fits(center: [f64; 2], radius: f64) -> bool {
    center
        .iter()
        .all(|&c| c - radius >= EDGE_MARGIN && c + radius <= 1.0 - EDGE_MARGIN)
}

fn free_center<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Option<[f64; 2]> {
    let lo = radius + EDGE_MARGIN;
    let hi = 1.0 - radius - EDGE_MARGIN;
    (lo < hi).then(|| [rng.gen_range(lo..hi), rng.gen_range(lo..hi)])
}

fn draw_object<R: Rng + ?Sized>(t: &Template, opts: &GenOptions, rng: &mut R) -> SceneObject {
    let shape = match (&t.shape, &t.carrier, opts.fixed_shape) {
        (Some(s), _, _) | (None, Some(s), _) => s.clone(),
        (None, None, Some(kind)) => Shape::sample(kind, rng),
        (None, None, None) => Shape::sample(ShapeKind::ALL[rng.gen_range(0..4)], rng),
    };
    let size = t
        .size
        .or(opts.fixed_size)
        .unwrap_or_else(|| uniform(rng, SIZE_RANGE));
    let color = match (t.color_bins, opts.fixed_color) {
        (Some(bins), _) => color_in_bins(rng, bins),
        (None, Some(c)) => c,
        (None, None) => random_color(rng),
    };
    let rotation = t.rotation.unwrap_or_else(|| rng.gen_range(0.0..TAU));
    let flip = t.flip.unwrap_or_else(|| rng.gen_bool(0.5));
    SceneObject {
        shape,
        center: [0.5, 0.5],
        size,
        rotation,
        flip,
        color,
    }
}

fn try_free_scene<R: Rng + ?Sized>(t: &Template, opts: &GenOptions, rng: &mut R) -> Option<Vec<SceneObject>> {
    let n = t.count.unwrap_or(1);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for k in 0..n {
        let mut obj = draw_object(t, opts, rng);
        let r = obj.radius();
        obj.center = match (k, t.position) {
            (0, Some(p)) => p,
            _ => free_center(rng, r)?,
        };
        if !fits(obj.center, r) || objects.iter().any(|o| overlaps(o, &obj, OBJECT_GAP)) {
            return None;
        }
        objects.push(obj);
    }
    Some(objects)
}

fn contrasting_color<R: Rng + ?Sized>(rng: &mut R, other: [u8; 3]) -> [u8; 3] {
    let bins = distinct_bins(rng, color_bins(other));
    color_in_bins(rng, bins)
}

fn try_inside_scene<R: Rng + ?Sized>(inside: bool, opts: &GenOptions, rng: &mut R) -> Option<Vec<SceneObject>> {
    let container_shape = if rng.gen_bool(0.5) { Shape::Circle } else { Shape::Square };
    let mut outer = SceneObject {
        shape: container_shape,
        center: [0.5, 0.5],
        size: uniform(rng, CONTAINER_SIZE),
        rotation: rng.gen_range(0.0..TAU),
        flip: false,
        color: random_color(rng),
    };
    outer.center = free_center(rng, outer.radius())?;
    let kind = opts.fixed_shape.unwrap_or_else(|| ShapeKind::ALL[rng.gen_range(0..4)]);
    let mut inner = SceneObject {
        shape: Shape::sample(kind, rng),
        center: [0.5, 0.5],
        size: uniform(rng, CONTAINEE_SIZE),
        rotation: rng.gen_range(0.0..TAU),
        flip: rng.gen_bool(0.5),
        color: contrasting_color(rng, outer.color),
    };
    if inside {
        let budget = outer.shape.inradius()? * outer.size - inner.radius() - 0.01;
        if budget <= 0.0 {
            return None;
        }
        let rho = budget * rng.gen_range(0.0f64..1.0).sqrt();
        let phi = rng.gen_range(0.0..TAU);
        inner.center = [outer.center[0] + rho * phi.cos(), outer.center[1] + rho * phi.sin()];
        (is_inside(&outer, &inner) && fits(inner.center, inner.radius())).then_some(vec![outer, inner])
    } else {
        inner.center = free_center(rng, inner.radius())?;
        (!overlaps(&outer, &inner, OBJECT_GAP)).then_some(vec![outer, inner])
    }
}

fn try_contact_scene<R: Rng + ?Sized>(contact: bool, rng: &mut R) -> Option<Vec<SceneObject>> {
    let disc = |rng: &mut R, color| SceneObject {
        shape: Shape::Circle,
        center: [0.5, 0.5],
        size: uniform(rng, DISC_SIZE),
        rotation: 0.0,
        flip: false,
        color,
    };
    let first_color = random_color(rng);
    let mut a = disc(rng, first_color);
    let second_color = contrasting_color(rng, a.color);
    let mut b = disc(rng, second_color);
    a.center = free_center(rng, a.size)?;
    let d = if contact {
        a.size + b.size
    } else {
        a.size + b.size + rng.gen_range(0.05..0.15)
    };
    let phi = rng.gen_range(0.0..TAU);
    b.center = [a.center[0] + d * phi.cos(), a.center[1] + d * phi.sin()];
    fits(b.center, b.size).then_some(vec![a, b])
}

/// Draws one scene from a template, retrying placement.
pub fn sample_scene<R: Rng + ?Sized>(
    t: &Template,
    opts: &GenOptions,
    rng: &mut R,
) -> Result<Vec<SceneObject>, TaskGenError> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let scene = if let Some(inside) = t.inside {
            try_inside_scene(inside, opts, rng)
        } else if let Some(contact) = t.contact {
            try_contact_scene(contact, rng)
        } else {
            try_free_scene(t, opts, rng)
        };
        if let Some(s) = scene {
            return Ok(s);
        }
    }
    Err(TaskGenError::Placement {
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })
}

/// Value of one attribute read back from scene parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Count(usize),
    Size(f64),
    Position([f64; 2]),
    Shape(Shape),
    ColorBins([u8; 3]),
    Rotation(f64),
    Flip(bool),
    Inside(bool),
    Contact(bool),
    /// Objects of one scene disagree, so the scene has no single value.
    Mixed,
}

const VALUE_EPS: f64 = 1e-9;

fn uniform_value<T: Clone>(scene: &[SceneObject], f: impl Fn(&SceneObject) -> T, eq: impl Fn(&T, &T) -> bool) -> Option<T> {
    let first = f(scene.first()?);
    scene.iter().all(|o| eq(&f(o), &first)).then_some(first)
}

pub fn attribute_value(attr: Attribute, scene: &[SceneObject]) -> AttrValue {
    let first = scene.first();
    let value = match attr {
        Attribute::Count => Some(AttrValue::Count(scene.len())),
        Attribute::Size => uniform_value(scene, |o| o.size, |a, b| (a - b).abs() < VALUE_EPS).map(AttrValue::Size),
        Attribute::Position => first.map(|o| AttrValue::Position(o.center)),
        Attribute::Shape => uniform_value(scene, |o| o.shape.clone(), |a, b| a == b).map(AttrValue::Shape),
        Attribute::Color => uniform_value(scene, |o| color_bins(o.color), |a, b| a == b).map(AttrValue::ColorBins),
        Attribute::Rotation => first.map(|o| AttrValue::Rotation(o.rotation)),
        Attribute::Flip => first.map(|o| AttrValue::Flip(o.flip)),
        Attribute::Inside => Some(AttrValue::Inside(scene.len() == 2 && is_inside(&scene[0], &scene[1]))),
        Attribute::Contact => Some(AttrValue::Contact(scene.len() == 2 && in_contact(&scene[0], &scene[1]))),
    };
    value.unwrap_or(AttrValue::Mixed)
}

pub fn same_value(a: &AttrValue, b: &AttrValue) -> bool {
    match (a, b) {
        (AttrValue::Size(x), AttrValue::Size(y)) => (x - y).abs() < VALUE_EPS,
        (AttrValue::Position(p), AttrValue::Position(q)) => distance(*p, *q) < VALUE_EPS,
        (AttrValue::Rotation(x), AttrValue::Rotation(y)) => angular_distance(*x, *y) < VALUE_EPS,
        (AttrValue::Mixed, _) | (_, AttrValue::Mixed) => false,
        _ => a == b,
    }
}

/// Re-verifies a panel from scene parameters: the three normals agree on
/// every constrained attribute and the outlier differs in exactly one.
pub fn check_panel(rule: &RuleSpec, scenes: &[Vec<SceneObject>], outlier: usize) -> Result<(), String> {
    if scenes.len() != 4 || outlier >= 4 {
        return Err("a panel has four scenes and an outlier slot in 0..4".into());
    }
    let normals: Vec<usize> = (0..4).filter(|&i| i != outlier).collect();
    let mut differing = Vec::new();
    for &attr in rule.attributes() {
        let reference = attribute_value(attr, &scenes[normals[0]]);
        for &i in &normals[1..] {
            let v = attribute_value(attr, &scenes[i]);
            if !same_value(&reference, &v) {
                return Err(format!("normal slots {} and {i} disagree on {}", normals[0], attr.name()));
            }
        }
        if !same_value(&reference, &attribute_value(attr, &scenes[outlier])) {
            differing.push(attr);
        }
    }
    match differing.len() {
        1 => Ok(()),
        0 => Err("outlier satisfies every constraint".into()),
        _ => Err(format!("outlier breaks {} constraints", differing.len())),
    }
}
