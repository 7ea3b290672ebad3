//! Predict-and-verify reasoning over the four encoded slots of a panel.
//!
//! All four targets of a batch are processed together. Group tensors hold
//! rows ordered `(target i, panel b, slot s)` at index `i*4B + 4b + s`;
//! per-target tensors hold rows `(i, b)` at index `i*B + b`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    Three,
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPermutation {
    Canonical,
    AverageAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParmConfig {
    pub k: usize,
    pub context_mode: ContextMode,
    pub eval_permutation: EvalPermutation,
    pub lambda: f64,
    /// Use `sigmoid(label)` as BCE targets, as the loss is literally written.
    pub bce_literal: bool,
}

impl Default for ParmConfig {
    fn default() -> Self {
        Self {
            k: 3,
            context_mode: ContextMode::Both,
            eval_permutation: EvalPermutation::AverageAll,
            lambda: 0.1,
            bce_literal: false,
        }
    }
}

impl ParmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("K must be at least 1".into());
        }
        if !(self.lambda >= 0.0) {
            return Err(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

/// How context slots are ordered before the prediction network.
pub enum ContextOrder<'a> {
    /// Independent random order per panel and target (training).
    Shuffle(&'a mut ChaCha8Rng),
    Canonical,
    /// Average over every ordering.
    AverageAll,
}

impl ContextOrder<'_> {
    pub fn for_eval(p: EvalPermutation) -> ContextOrder<'static> {
        match p {
            EvalPermutation::Canonical => ContextOrder::Canonical,
            EvalPermutation::AverageAll => ContextOrder::AverageAll,
        }
    }
}

const PERMS3: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
const PAIRS: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];

fn context_slots(t: usize) -> [usize; 3] {
    let mut out = [0; 3];
    let mut k = 0;
    for s in (0..4).filter(|&s| s != t) {
        out[k] = s;
        k += 1;
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

impl Conv {
    fn he<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self {
            w: store.he_uniform(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng),
            b: store.zeros(format!("{name}.b"), &[cout]),
            pad: k / 2,
        }
    }

    fn zero<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            w: store.zeros(format!("{name}.w"), &[cout, cin, k, k]),
            b: store.zeros(format!("{name}.b"), &[cout]),
            pad: k / 2,
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NumericsError> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv2d(x, w, Some(b), 1, self.pad)
    }
}

/// Weights of one reasoning block: prediction network and interaction convs.
#[derive(Clone, Debug)]
struct Level {
    mix3: Conv,
    mix2: Conv,
    p1: Conv,
    p2: Conv,
    c_mix: Conv,
    c1: Conv,
    c2: Conv,
}

#[derive(Clone, Debug)]
pub struct Parm {
    cfg: ParmConfig,
    feature: [usize; 3],
    levels: Vec<Level>,
    head: [ParamId; 4],
}

/// Result of [`Parm::reason`].
pub struct Reasoning {
    /// `[B, 4]` outlier logits.
    pub logits: Var,
    /// Prediction errors per level, `[4B, c, h, w]` in `(i, b)` row order.
    pub errors: Vec<Var>,
    /// Final group tensor `[16B, c, h, w]`.
    pub groups: Var,
}

impl Parm {
    /// `feature` is the `[c, h, w]` shape of one encoded image.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: ParmConfig,
        feature: [usize; 3],
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self, String> {
        cfg.validate()?;
        let c = feature[0];
        let levels = (0..cfg.k)
            .map(|j| {
                let n = |part: &str| format!("parm.l{j}.{part}");
                Level {
                    mix3: Conv::he(store, &n("fp.mix3"), 3 * c, c, 1, rng),
                    mix2: Conv::he(store, &n("fp.mix2"), 2 * c, c, 1, rng),
                    p1: Conv::he(store, &n("fp.conv1"), c, c, 3, rng),
                    p2: Conv::he(store, &n("fp.conv2"), c, c, 3, rng),
                    c_mix: Conv::he(store, &n("fc.mix"), 3 * c + 1, c, 1, rng),
                    c1: Conv::he(store, &n("fc.conv1"), c, c, 3, rng),
                    c2: Conv::zero(store, &n("fc.conv2"), c, c, 3),
                }
            })
            .collect();
        let hidden = c.max(16);
        let head = [
            store.he_uniform("head.fc1.w", &[hidden, c], c, rng),
            store.zeros("head.fc1.b", &[hidden]),
            store.he_uniform("head.fc2.w", &[1, hidden], hidden, rng),
            store.zeros("head.fc2.b", &[1]),
        ];
        Ok(Self { cfg, feature, levels, head })
    }

    pub fn config(&self) -> &ParmConfig {
        &self.cfg
    }

    /// Parameters of the final interaction conv at each level.
    pub fn branch_outputs(&self) -> Vec<[ParamId; 2]> {
        self.levels.iter().map(|l| [l.c2.w, l.c2.b]).collect()
    }

    /// Parameters of the final prediction conv at each level.
    pub fn prediction_outputs(&self) -> Vec<[ParamId; 2]> {
        self.levels.iter().map(|l| [l.p2.w, l.p2.b]).collect()
    }

    fn batch_of<T: Scalar>(&self, g: &Graph<T>, y: Var) -> usize {
        g.shape(y)[0] / 16
    }

    /// Runs F_P on the contexts given by `slots[k][row]` (slot index per
    /// channel block), averaging over `variants` stacked groups of `4B` rows.
    #[allow(clippy::too_many_arguments)]
    fn run_fp<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        level: &Level,
        y: Var,
        rows: Vec<Vec<usize>>,
        variants: usize,
        two: bool,
    ) -> Result<Var, NumericsError> {
        let parts: Vec<Var> = rows.iter().map(|r| g.index_select(y, r)).collect::<Result<_, _>>()?;
        let cat = g.concat(&parts, 1)?;
        let mixed = if two { level.mix2.apply(g, store, cat)? } else { level.mix3.apply(g, store, cat)? };
        let h = level.p1.apply(g, store, mixed)?;
        let h = g.relu(h)?;
        let out = level.p2.apply(g, store, h)?;
        if variants == 1 {
            return Ok(out);
        }
        let n = g.shape(out)[0] / variants;
        let [c, hh, ww] = self.feature;
        let flat = g.reshape(out, &[variants, n * c * hh * ww])?;
        let avg = g.mean_axis(flat, 0)?;
        g.reshape(avg, &[n, c, hh, ww])
    }

    /// F_P: predicted target features `[4B, c, h, w]`, one row per `(i, b)`.
    pub fn predict_target<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        level: usize,
        y: Var,
        order: &mut ContextOrder,
    ) -> Result<Var, NumericsError> {
        let lv = &self.levels[level];
        let b = self.batch_of(g, y);
        let row = |i: usize, bb: usize, s: usize| i * 4 * b + 4 * bb + s;
        let mode = self.cfg.context_mode;

        let three = if mode != ContextMode::Two {
            let perms: Vec<Vec<[usize; 3]>> = match order {
                ContextOrder::AverageAll => PERMS3.iter().map(|p| vec![*p; 4 * b]).collect(),
                ContextOrder::Canonical => vec![vec![[0, 1, 2]; 4 * b]],
                ContextOrder::Shuffle(rng) => vec![(0..4 * b)
                    .map(|_| {
                        let mut p = [0, 1, 2];
                        p.shuffle(*rng);
                        p
                    })
                    .collect()],
            };
            let v = perms.len();
            let mut rows: Vec<Vec<usize>> = (0..3).map(|_| Vec::with_capacity(v * 4 * b)).collect();
            for perm in &perms {
                for i in 0..4 {
                    let ctx = context_slots(i);
                    for bb in 0..b {
                        let p = perm[i * b + bb];
                        for k in 0..3 {
                            rows[k].push(row(i, bb, ctx[p[k]]));
                        }
                    }
                }
            }
            Some(self.run_fp(g, store, lv, y, rows, v, false)?)
        } else {
            None
        };

        let two = if mode != ContextMode::Three {
            // (pair, swap flags per row)
            let variants: Vec<([usize; 2], Vec<bool>)> = match order {
                ContextOrder::AverageAll => PAIRS
                    .iter()
                    .flat_map(|&p| [(p, vec![false; 4 * b]), (p, vec![true; 4 * b])])
                    .collect(),
                ContextOrder::Canonical => PAIRS.iter().map(|&p| (p, vec![false; 4 * b])).collect(),
                ContextOrder::Shuffle(rng) => PAIRS
                    .iter()
                    .map(|&p| (p, (0..4 * b).map(|_| rng.gen_bool(0.5)).collect()))
                    .collect(),
            };
            let v = variants.len();
            let mut rows: Vec<Vec<usize>> = (0..2).map(|_| Vec::with_capacity(v * 4 * b)).collect();
            for (pair, swaps) in &variants {
                for i in 0..4 {
                    let ctx = context_slots(i);
                    for bb in 0..b {
                        let (a, c) = if swaps[i * b + bb] { (pair[1], pair[0]) } else { (pair[0], pair[1]) };
                        rows[0].push(row(i, bb, ctx[a]));
                        rows[1].push(row(i, bb, ctx[c]));
                    }
                }
            }
            Some(self.run_fp(g, store, lv, y, rows, v, true)?)
        } else {
            None
        };

        match (three, two) {
            (Some(t), Some(w)) => {
                let s = g.add(t, w)?;
                g.scale(s, T::from_f64_lossy(0.5))
            }
            (Some(t), None) => Ok(t),
            (None, Some(w)) => Ok(w),
            (None, None) => unreachable!("context mode selects at least one predictor"),
        }
    }

    /// Target features `[4B, c, h, w]` in `(i, b)` order.
    pub fn targets<T: Scalar>(&self, g: &mut Graph<T>, y: Var) -> Result<Var, NumericsError> {
        let b = self.batch_of(g, y);
        let rows: Vec<usize> = (0..4).flat_map(|i| (0..b).map(move |bb| i * 4 * b + 4 * bb + i)).collect();
        g.index_select(y, &rows)
    }

    /// Prediction error `F_t - F̂_t`.
    pub fn verify<T: Scalar>(g: &mut Graph<T>, target: Var, predicted: Var) -> Result<Var, NumericsError> {
        g.sub(target, predicted)
    }

    /// One block: predict, verify, interact, add the residual. Returns the
    /// new group tensor and the prediction error.
    pub fn parb<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        level: usize,
        y: Var,
        order: &mut ContextOrder,
    ) -> Result<(Var, Var), NumericsError> {
        let lv = &self.levels[level];
        let b = self.batch_of(g, y);
        let [c, h, w] = self.feature;
        let predicted = self.predict_target(g, store, level, y, order)?;
        let target = self.targets(g, y)?;
        let err = Self::verify(g, target, predicted)?;

        let stacked = g.concat(&[y, err], 0)?;
        let mut swap_rows = Vec::with_capacity(16 * b);
        let mut group_rows = Vec::with_capacity(16 * b);
        let mut indicator = Vec::with_capacity(16 * b * h * w);
        for i in 0..4 {
            for bb in 0..b {
                for s in 0..4 {
                    swap_rows.push(if s == i { 16 * b + i * b + bb } else { i * 4 * b + 4 * bb + s });
                    group_rows.push(i * b + bb);
                    let flag = if s == i { T::one() } else { T::zero() };
                    indicator.extend(std::iter::repeat_n(flag, h * w));
                }
            }
        }
        let replaced = g.index_select(stacked, &swap_rows)?;
        let err_b = g.index_select(err, &group_rows)?;
        let flat = g.reshape(replaced, &[4 * b, 4, c * h * w])?;
        let mean = g.mean_axis(flat, 1)?;
        let mean = g.reshape(mean, &[4 * b, c, h, w])?;
        let mean_b = g.index_select(mean, &group_rows)?;
        let ind = g.input(Tensor::new(vec![16 * b, 1, h, w], indicator)?);
        let input = g.concat(&[replaced, err_b, mean_b, ind], 1)?;

        let z = lv.c_mix.apply(g, store, input)?;
        let z = g.relu(z)?;
        let z = lv.c1.apply(g, store, z)?;
        let z = g.relu(z)?;
        let branch = lv.c2.apply(g, store, z)?;
        let out = g.add(branch, y)?;
        Ok((out, err))
    }

    /// Group tensor with every target's group equal to the encoded panel.
    pub fn initial_groups<T: Scalar>(g: &mut Graph<T>, features: Var) -> Result<Var, NumericsError> {
        g.concat(&[features, features, features, features], 0)
    }

    /// `[4B, c, h, w]` encoded slots to `[B, 4]` outlier logits.
    pub fn reason<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        order: &mut ContextOrder,
    ) -> Result<Reasoning, NumericsError> {
        let fs = g.shape(features).to_vec();
        if fs.len() != 4 || !fs[0].is_multiple_of(4) || fs[1..] != self.feature[..] {
            return Err(NumericsError::Shape {
                op: "reason",
                shapes: vec![fs, self.feature.to_vec()],
            });
        }
        let b = fs[0] / 4;
        let mut y = Self::initial_groups(g, features)?;
        let mut errors = Vec::with_capacity(self.levels.len());
        for level in 0..self.levels.len() {
            let (next, err) = self.parb(g, store, level, y, order)?;
            errors.push(err);
            y = next;
        }
        let target = self.targets(g, y)?;
        let logits = head_logits(g, store, &self.head, target, b)?;
        Ok(Reasoning { logits, errors, groups: y })
    }
}

/// Pooled two-layer head on `[4B, c, h, w]` rows in `(i, b)` order, giving `[B, 4]`.
fn head_logits<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &[ParamId; 4],
    rows: Var,
    b: usize,
) -> Result<Var, NumericsError> {
    let pooled = g.global_avg_pool(rows)?;
    let [w1, b1, w2, b2] = head.map(|id| g.param(store, id));
    let h = g.linear(pooled, w1, Some(b1))?;
    let h = g.relu(h)?;
    let z = g.linear(h, w2, Some(b2))?;
    let order: Vec<usize> = (0..b).flat_map(|bb| (0..4).map(move |i| i * b + bb)).collect();
    let z = g.index_select(z, &order)?;
    g.reshape(z, &[b, 4])
}

/// Baseline without predict-and-verify: each slot is scored from its pooled
/// features next to the mean pooled features of the other three.
#[derive(Clone, Debug)]
pub struct PooledHead {
    channels: usize,
    params: [ParamId; 4],
}

impl PooledHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(channels: usize, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let hidden = channels.max(16);
        Self {
            channels,
            params: [
                store.he_uniform("pooled.fc1.w", &[hidden, 2 * channels], 2 * channels, rng),
                store.zeros("pooled.fc1.b", &[hidden]),
                store.he_uniform("pooled.fc2.w", &[1, hidden], hidden, rng),
                store.zeros("pooled.fc2.b", &[1]),
            ],
        }
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var, NumericsError> {
        let n = g.shape(features)[0];
        let b = n / 4;
        let c = self.channels;
        let pooled = g.global_avg_pool(features)?;
        let grouped = g.reshape(pooled, &[b, 4, c])?;
        let total = g.sum_axis(grouped, 1)?;
        let rows: Vec<usize> = (0..n).map(|r| r / 4).collect();
        let total = g.index_select(total, &rows)?;
        let others = g.sub(total, pooled)?;
        let others = g.scale(others, T::from_f64_lossy(1.0 / 3.0))?;
        let x = g.concat(&[pooled, others], 1)?;
        let [w1, b1, w2, b2] = self.params.map(|id| g.param(store, id));
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.relu(h)?;
        let z = g.linear(h, w2, Some(b2))?;
        g.reshape(z, &[b, 4])
    }
}

/// Four outlier logits of one panel.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelScores<T> {
    pub logits: [T; 4],
}

impl<T: Scalar> PanelScores<T> {
    /// Splits a `[B, 4]` logit tensor into per-panel scores.
    pub fn from_batch(t: &Tensor<T>) -> Vec<Self> {
        t.data()
            .chunks_exact(4)
            .map(|c| Self {
                logits: [c[0], c[1], c[2], c[3]],
            })
            .collect()
    }

    /// Argmax; ties go to the lowest slot.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for i in 1..4 {
            if self.logits[i] > self.logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn probabilities(&self) -> [T; 4] {
        self.logits.map(|z| T::one() / (T::one() + (-z).exp()))
    }
}

/// Mean binary cross-entropy over the `[B, 4]` logits with one-hot targets
/// (or `sigmoid(one-hot)` targets when `literal`).
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, outliers: &[usize], literal: bool) -> Result<Var, NumericsError> {
    let shape = g.shape(logits).to_vec();
    if shape != [outliers.len(), 4] {
        return Err(NumericsError::Shape {
            op: "bce_loss",
            shapes: vec![shape, vec![outliers.len(), 4]],
        });
    }
    let (hi, lo) = if literal {
        (1.0 / (1.0 + (-1.0f64).exp()), 0.5)
    } else {
        (1.0, 0.0)
    };
    let y: Vec<f64> = outliers
        .iter()
        .flat_map(|&o| (0..4).map(move |s| if s == o { hi } else { lo }))
        .collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y = g.input(Tensor::from_f64(&shape, &y)?);
    let not_y = g.input(Tensor::from_f64(&shape, &not_y)?);
    let log_p = g.log_sigmoid(logits)?;
    let neg = g.scale(logits, -T::one())?;
    let log_q = g.log_sigmoid(neg)?;
    let a = g.mul(y, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, -T::one())
}

/// `L_BCE + lambda * L_C`; with `lambda == 0` the BCE node itself is returned.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, bce: Var, acl: Option<Var>, lambda: f64) -> Result<Var, NumericsError> {
    match acl {
        Some(c) if lambda != 0.0 => {
            let weighted = g.scale(c, T::from_f64_lossy(lambda))?;
            g.add(bce, weighted)
        }
        _ => Ok(bce),
    }
}

/// Per-panel L2 norms of the prediction errors `[4B, ...]` in `(i, b)` order.
pub fn error_norms<T: Scalar>(err: &Tensor<T>) -> Vec<[f64; 4]> {
    let n = err.shape()[0];
    let b = n / 4;
    let row = err.numel() / n;
    let d = err.data();
    (0..b)
        .map(|bb| {
            std::array::from_fn(|i| {
                let r = i * b + bb;
                d[r * row..(r + 1) * row].iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    const FEAT: [usize; 3] = [2, 2, 2];

    fn build(cfg: ParmConfig, seed: u64) -> (ParamStore<f64>, Parm) {
        let mut store = ParamStore::new();
        let parm = Parm::new(cfg, FEAT, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, parm)
    }

    fn randomize_branches(store: &mut ParamStore<f64>, parm: &Parm, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ids in parm.branch_outputs() {
            for id in ids {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::uniform(&shape, -0.5, 0.5, &mut rng);
            }
        }
    }

    fn features(b: usize, seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[4 * b, 2, 2, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn logits(store: &ParamStore<f64>, parm: &Parm, f: &Tensor<f64>, order: &mut ContextOrder) -> Tensor<f64> {
        let mut g = Graph::new();
        let x = g.input(f.clone());
        let r = parm.reason(&mut g, store, x, order).unwrap();
        g.value(r.logits).clone()
    }

    fn permute_slots(f: &Tensor<f64>, perm: [usize; 4]) -> Tensor<f64> {
        let row = f.numel() / f.shape()[0];
        let b = f.shape()[0] / 4;
        let mut data = Vec::with_capacity(f.numel());
        for bb in 0..b {
            for s in 0..4 {
                let src = 4 * bb + perm[s];
                data.extend_from_slice(&f.data()[src * row..(src + 1) * row]);
            }
        }
        Tensor::new(f.shape().to_vec(), data).unwrap()
    }

    #[test]
    fn zero_branches_are_the_identity() {
        let (store, parm) = build(ParmConfig::default(), 1);
        let f = features(3, 2);
        let mut g = Graph::new();
        let x = g.input(f.clone());
        let r = parm.reason(&mut g, &store, x, &mut ContextOrder::AverageAll).unwrap();
        let y0 = {
            let mut g0 = Graph::new();
            let x0 = g0.input(f.clone());
            let y = Parm::initial_groups(&mut g0, x0).unwrap();
            g0.value(y).clone()
        };
        assert_eq!(g.value(r.groups).max_abs_diff(&y0), 0.0);
    }

    #[test]
    fn identical_images_get_identical_logits_at_init() {
        let (store, parm) = build(ParmConfig::default(), 3);
        let mut f = features(1, 4);
        let row = 8;
        let copy: Vec<f64> = f.data()[0..row].to_vec();
        f.data_mut()[2 * row..3 * row].copy_from_slice(&copy);
        let z = logits(&store, &parm, &f, &mut ContextOrder::AverageAll);
        assert_eq!(z.data()[0], z.data()[2]);
    }

    #[test]
    fn logits_are_slot_equivariant() {
        let (mut store, parm) = build(ParmConfig::default(), 5);
        randomize_branches(&mut store, &parm, 6);
        let f = features(2, 7);
        let perm = [2, 0, 3, 1];
        let z = logits(&store, &parm, &f, &mut ContextOrder::AverageAll);
        let zp = logits(&store, &parm, &permute_slots(&f, perm), &mut ContextOrder::AverageAll);
        for b in 0..2 {
            for s in 0..4 {
                let d = (zp.data()[4 * b + s] - z.data()[4 * b + perm[s]]).abs();
                assert!(d < 1e-12, "panel {b} slot {s}: {d}");
            }
        }
    }

    #[test]
    fn averaged_predictions_ignore_context_order() {
        for mode in [ContextMode::Three, ContextMode::Two] {
            let cfg = ParmConfig {
                context_mode: mode,
                ..Default::default()
            };
            let (store, parm) = build(cfg, 8);
            let f = features(1, 9);
            // Swapping two non-target slots (1 and 2) leaves target 0's
            // context set unchanged, so its prediction must not move.
            let swapped = permute_slots(&f, [0, 2, 1, 3]);
            let pred = |f: &Tensor<f64>| {
                let mut g = Graph::new();
                let x = g.input(f.clone());
                let y = Parm::initial_groups(&mut g, x).unwrap();
                let p = parm.predict_target(&mut g, &store, 0, y, &mut ContextOrder::AverageAll).unwrap();
                g.value(p).to_f64_vec()[..8].to_vec()
            };
            let (a, b) = (pred(&f), pred(&swapped));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "{mode:?}");
            }
        }
    }

    #[test]
    fn depth_changes_logits() {
        let f = features(2, 10);
        let (mut s1, p1) = build(ParmConfig { k: 1, ..Default::default() }, 11);
        let (mut s3, p3) = build(ParmConfig { k: 3, ..Default::default() }, 11);
        randomize_branches(&mut s1, &p1, 12);
        randomize_branches(&mut s3, &p3, 12);
        let z1 = logits(&s1, &p1, &f, &mut ContextOrder::AverageAll);
        let z3 = logits(&s3, &p3, &f, &mut ContextOrder::AverageAll);
        assert!(z1.max_abs_diff(&z3) > 1e-6);
    }

    #[test]
    fn zero_prediction_makes_error_the_target() {
        let (mut store, parm) = build(ParmConfig::default(), 13);
        for ids in parm.prediction_outputs() {
            for id in ids {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
        let f = features(2, 14);
        let mut g = Graph::new();
        let x = g.input(f.clone());
        let y = Parm::initial_groups(&mut g, x).unwrap();
        let (_, err) = parm.parb(&mut g, &store, 0, y, &mut ContextOrder::AverageAll).unwrap();
        let t = parm.targets(&mut g, y).unwrap();
        assert_eq!(g.value(err), g.value(t));
        // Row (i, b) holds slot i of panel b.
        for i in 0..4 {
            for b in 0..2 {
                let r = i * 2 + b;
                let src = 4 * b + i;
                assert_eq!(&g.value(t).data()[r * 8..(r + 1) * 8], &f.data()[src * 8..(src + 1) * 8]);
            }
        }
    }

    type Maps = Vec<Vec<f64>>;

    /// Stride-1 convolution on `[c][h*w]` maps with "same" padding.
    fn conv_oracle(x: &Maps, w: &Tensor<f64>, bias: &Tensor<f64>, side: usize) -> Maps {
        let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let pad = (k / 2) as isize;
        let mut out = vec![vec![0.0; side * side]; cout];
        for o in 0..cout {
            for y in 0..side {
                for x_ in 0..side {
                    let mut acc = bias.data()[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (y as isize + ky as isize - pad, x_ as isize + kx as isize - pad);
                                if iy < 0 || ix < 0 || iy >= side as isize || ix >= side as isize {
                                    continue;
                                }
                                let wv = w.data()[((o * cin + c) * k + ky) * k + kx];
                                acc += wv * x[c][iy as usize * side + ix as usize];
                            }
                        }
                    }
                    out[o][y * side + x_] = acc;
                }
            }
        }
        out
    }

    fn relu_maps(x: Maps) -> Maps {
        x.into_iter().map(|m| m.into_iter().map(|v| v.max(0.0)).collect()).collect()
    }

    #[test]
    fn block_matches_straight_line_oracle() {
        let cfg = ParmConfig {
            context_mode: ContextMode::Three,
            ..Default::default()
        };
        let (mut store, parm) = build(cfg, 20);
        randomize_branches(&mut store, &parm, 21);
        let f = features(1, 22);
        let mut g = Graph::new();
        let x = g.input(f.clone());
        let y = Parm::initial_groups(&mut g, x).unwrap();
        let (out, _) = parm.parb(&mut g, &store, 0, y, &mut ContextOrder::Canonical).unwrap();
        let got = g.value(out).to_f64_vec();

        let p = |n: &str| store.get(store.find(&format!("parm.l0.{n}")).unwrap()).clone();
        let slot = |s: usize| -> Maps { (0..2).map(|c| f.data()[(s * 2 + c) * 4..(s * 2 + c + 1) * 4].to_vec()).collect() };
        for t in 0..4 {
            let ctx: Vec<usize> = (0..4).filter(|&s| s != t).collect();
            let cat: Maps = ctx.iter().flat_map(|&s| slot(s)).collect();
            let m = conv_oracle(&cat, &p("fp.mix3.w"), &p("fp.mix3.b"), 2);
            let h = relu_maps(conv_oracle(&m, &p("fp.conv1.w"), &p("fp.conv1.b"), 2));
            let pred = conv_oracle(&h, &p("fp.conv2.w"), &p("fp.conv2.b"), 2);
            let target = slot(t);
            let err: Maps = (0..2).map(|c| (0..4).map(|i| target[c][i] - pred[c][i]).collect()).collect();
            let replaced: Vec<Maps> = (0..4).map(|s| if s == t { err.clone() } else { slot(s) }).collect();
            let mean: Maps = (0..2)
                .map(|c| (0..4).map(|i| replaced.iter().map(|r| r[c][i]).sum::<f64>() / 4.0).collect())
                .collect();
            for s in 0..4 {
                let mut input = replaced[s].clone();
                input.extend(err.clone());
                input.extend(mean.clone());
                input.push(vec![if s == t { 1.0 } else { 0.0 }; 4]);
                let z = relu_maps(conv_oracle(&input, &p("fc.mix.w"), &p("fc.mix.b"), 2));
                let z = relu_maps(conv_oracle(&z, &p("fc.conv1.w"), &p("fc.conv1.b"), 2));
                let z = conv_oracle(&z, &p("fc.conv2.w"), &p("fc.conv2.b"), 2);
                let own = slot(s);
                for c in 0..2 {
                    for i in 0..4 {
                        let want = z[c][i] + own[c][i];
                        let have = got[((t * 4 + s) * 2 + c) * 4 + i];
                        assert!((want - have).abs() < 1e-6, "target {t} slot {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn verify_is_elementwise_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = Tensor::<f64>::uniform(&[2, 2, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[2, 2, 2], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let d = Parm::verify(&mut g, va, vb).unwrap();
        for i in 0..8 {
            assert_eq!(g.value(d).data()[i], a.data()[i] - b.data()[i]);
        }
        let same = Parm::verify(&mut g, va, va).unwrap();
        assert!(g.value(same).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let s = PanelScores { logits: [0.5f32, 2.0, 2.0, -1.0] };
        assert_eq!(s.predicted(), 1);
        assert_eq!(PanelScores { logits: [0.0f32; 4] }.predicted(), 0);
        assert_eq!(PanelScores { logits: [0.0f32; 4] }.probabilities(), [0.5; 4]);
    }

    fn bce_value(z: &[f64], outliers: &[usize], literal: bool) -> f64 {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![outliers.len(), 4], z.to_vec()).unwrap());
        let l = bce_loss(&mut g, x, outliers, literal).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn bce_anchors() {
        assert!((bce_value(&[0.0; 4], &[2], false) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_value(&[50.0, -50.0, -50.0, -50.0], &[0], false) < 1e-20);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let oracle = -0.25 * (sig(2.0).ln() + 3.0 * (1.0 - sig(-1.0)).ln());
        assert!((bce_value(&[2.0, -1.0, -1.0, -1.0], &[0], false) - oracle).abs() < 1e-12);
        assert!((oracle - 0.266).abs() < 5e-3);
    }

    #[test]
    fn bce_is_finite_on_wide_logits() {
        let z = [50.0, -50.0, 37.0, -0.0];
        for o in 0..4 {
            assert!(bce_value(&z, &[o], false).is_finite());
            assert!(bce_value(&z, &[o], true).is_finite());
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let ln2 = std::f64::consts::LN_2;
        let bce = g.input(Tensor::scalar(ln2));
        let acl = g.input(Tensor::scalar(ln2));
        let l = total_loss(&mut g, bce, Some(acl), 0.1).unwrap();
        assert!((g.value(l).data()[0] - 1.1 * ln2).abs() < 1e-15);
        assert_eq!(total_loss(&mut g, bce, Some(acl), 0.0).unwrap(), bce);
    }

    #[test]
    fn pooled_head_is_equivariant() {
        let mut store = ParamStore::<f64>::new();
        let head = PooledHead::new(2, &mut store, &mut ChaCha8Rng::seed_from_u64(16));
        let f = features(2, 17);
        let run = |f: &Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.input(f.clone());
            let z = head.logits(&mut g, &store, x).unwrap();
            g.value(z).clone()
        };
        let perm = [3, 2, 0, 1];
        let (z, zp) = (run(&f), run(&permute_slots(&f, perm)));
        for b in 0..2 {
            for s in 0..4 {
                assert!((zp.data()[4 * b + s] - z.data()[4 * b + perm[s]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_is_validated() {
        assert!(ParmConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(ParmConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
    }
}
