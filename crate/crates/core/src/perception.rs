//! Shared CNN encoder, two-layer projection head, and the anomaly contrastive
//! loss over weak and strong views of a panel.

use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::taskgen::Panel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels per stage; each stage halves the spatial side.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub resolution: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 64],
            embed_dim: 128,
            resolution: 64,
        }
    }
}

impl EncoderConfig {
    pub fn channels(&self) -> usize {
        *self.widths.last().expect("at least one stage")
    }

    pub fn out_side(&self) -> usize {
        self.resolution >> self.widths.len()
    }

    /// `[c, h, w]` of one encoded image.
    pub fn feature_shape(&self) -> [usize; 3] {
        [self.channels(), self.out_side(), self.out_side()]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.embed_dim == 0 {
            return Err("encoder widths and embedding size must be positive".into());
        }
        if !self.resolution.is_multiple_of(1 << self.widths.len()) || self.out_side() < 2 {
            return Err(format!(
                "{} stages on a {}px input leave less than a 2x2 feature map",
                self.widths.len(),
                self.resolution
            ));
        }
        Ok(())
    }
}

/// Largest group count up to 8 that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Clone, Debug)]
struct ConvNorm {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
    groups: usize,
}

impl ConvNorm {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.he_uniform(format!("{name}.w"), &[cout, cin, 3, 3], cin * 9, rng),
            b: store.zeros(format!("{name}.b"), &[cout]),
            gamma: store.ones(format!("{name}.gamma"), &[cout]),
            beta: store.zeros(format!("{name}.beta"), &[cout]),
            stride,
            groups: norm_groups(cout),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NumericsError> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.conv2d(x, w, Some(b), self.stride, 1)?;
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        let y = g.group_norm(y, gamma, beta, self.groups)?;
        g.relu(y)
    }
}

/// Encoder F and projection G with weights shared by all slots.
#[derive(Clone, Debug)]
pub struct Perception {
    cfg: EncoderConfig,
    convs: Vec<ConvNorm>,
    proj: [ParamId; 4],
}

impl Perception {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self, String> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut cin = 3;
        for (s, &c) in cfg.widths.iter().enumerate() {
            convs.push(ConvNorm::new(store, &format!("enc.s{s}.down"), cin, c, 2, rng));
            convs.push(ConvNorm::new(store, &format!("enc.s{s}.conv"), c, c, 1, rng));
            cin = c;
        }
        let (c, d) = (cfg.channels(), cfg.embed_dim);
        let proj = [
            store.he_uniform("proj.fc1.w", &[d, c], c, rng),
            store.zeros("proj.fc1.b", &[d]),
            store.he_uniform("proj.fc2.w", &[d, d], d, rng),
            store.zeros("proj.fc2.b", &[d]),
        ];
        Ok(Self { cfg, convs, proj })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `[n, 3, H, W]` images in `[0, 1]` to `[n, c, h, w]` features.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NumericsError> {
        let s = g.shape(x);
        let r = self.cfg.resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(NumericsError::Shape {
                op: "encode",
                shapes: vec![s.to_vec(), vec![0, 3, r, r]],
            });
        }
        self.convs.iter().try_fold(x, |h, layer| layer.forward(g, store, h))
    }

    /// Global average pool, linear, relu, linear: `[n, c, h, w] -> [n, d]`.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var, NumericsError> {
        let pooled = g.global_avg_pool(f)?;
        let [w1, b1, w2, b2] = self.proj.map(|id| g.param(store, id));
        let h = g.linear(pooled, w1, Some(b1))?;
        let h = g.relu(h)?;
        g.linear(h, w2, Some(b2))
    }

    /// Zeroes the last convolution of the last stage.
    pub fn zero_final_conv<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let last = self.convs.last().expect("encoder has layers");
        for id in [last.w, last.b] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
    }

    pub fn projection_params(&self) -> [ParamId; 4] {
        self.proj
    }
}

/// Stacks panels slot-major within panel: row `4 * b + s`, values in `[0, 1]`.
pub fn panels_to_tensor<T: Scalar>(panels: &[&Panel]) -> Tensor<T> {
    let side = panels[0].resolution();
    let plane = side * side;
    let mut data = Vec::with_capacity(panels.len() * 4 * 3 * plane);
    let scale = T::one() / T::from_f64_lossy(255.0);
    for p in panels {
        for img in &p.images {
            let raw = img.data();
            for c in 0..3 {
                data.extend((0..plane).map(|i| T::from_u8(raw[3 * i + c]).unwrap() * scale));
            }
        }
    }
    Tensor::new(vec![panels.len() * 4, 3, side, side], data).expect("panel images are square and equal")
}

/// Row indices for the contrastive terms: for each panel its three normal
/// slots in ascending order, and the outlier row repeated alongside.
pub fn contrastive_rows(outliers: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut normals = Vec::with_capacity(3 * outliers.len());
    let mut anchors = Vec::with_capacity(3 * outliers.len());
    for (b, &o) in outliers.iter().enumerate() {
        for s in (0..4).filter(|&s| s != o) {
            normals.push(4 * b + s);
            anchors.push(4 * b + o);
        }
    }
    (normals, anchors)
}

/// Anomaly contrastive loss on `[4B, d]` weak and strong embeddings:
/// `mean_i [ log(exp(bw_i) + exp(bs_i)) - a_i ]` with all similarities
/// divided by `temperature`.
pub fn acl_loss<T: Scalar>(
    g: &mut Graph<T>,
    weak: Var,
    strong: Var,
    outliers: &[usize],
    temperature: f64,
) -> Result<Var, NumericsError> {
    let (normals, anchors) = contrastive_rows(outliers);
    let hw = g.index_select(weak, &normals)?;
    let hs = g.index_select(strong, &normals)?;
    let uw = g.index_select(weak, &anchors)?;
    let us = g.index_select(strong, &anchors)?;
    let mut alpha = g.cosine(hw, hs)?;
    let mut beta_w = g.cosine(hw, uw)?;
    let mut beta_s = g.cosine(hs, us)?;
    if temperature != 1.0 {
        let inv = T::from_f64_lossy(1.0 / temperature);
        alpha = g.scale(alpha, inv)?;
        beta_w = g.scale(beta_w, inv)?;
        beta_s = g.scale(beta_s, inv)?;
    }
    let ew = g.exp(beta_w)?;
    let es = g.exp(beta_s)?;
    let denom = g.add(ew, es)?;
    let log_denom = g.log(denom)?;
    let per_row = g.sub(log_denom, alpha)?;
    g.mean(per_row)
}

/// Projected embeddings of one panel, normals in canonical slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T> {
    pub weak_normals: [Vec<T>; 3],
    pub weak_outlier: Vec<T>,
    pub strong_normals: [Vec<T>; 3],
    pub strong_outlier: Vec<T>,
}

impl<T: Scalar> EmbeddingSet<T> {
    fn is_finite(&self) -> bool {
        self.weak_normals
            .iter()
            .chain(&self.strong_normals)
            .chain([&self.weak_outlier, &self.strong_outlier])
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Loss value for explicit embedding sets (outlier placed in slot 3).
pub fn acl_loss_sets<T: Scalar>(sets: &[EmbeddingSet<T>], temperature: f64) -> Result<T, NumericsError> {
    if let Some(i) = sets.iter().position(|s| !s.is_finite()) {
        return Err(NumericsError::NonFinitePanel {
            stage: "acl_loss",
            panel: i.to_string(),
        });
    }
    let d = sets.first().map_or(0, |s| s.weak_outlier.len());
    let stack = |normals: fn(&EmbeddingSet<T>) -> &[Vec<T>; 3], outlier: fn(&EmbeddingSet<T>) -> &Vec<T>| {
        let data: Vec<T> = sets
            .iter()
            .flat_map(|s| normals(s).iter().chain([outlier(s)]).flatten().copied().collect::<Vec<_>>())
            .collect();
        Tensor::new(vec![4 * sets.len(), d], data)
    };
    let mut g = Graph::new();
    let weak = g.input(stack(|s| &s.weak_normals, |s| &s.weak_outlier)?);
    let strong = g.input(stack(|s| &s.strong_normals, |s| &s.strong_outlier)?);
    let loss = acl_loss(&mut g, weak, strong, &vec![3; sets.len()], temperature)?;
    Ok(g.value(loss).data()[0])
}

/// One row of `embeddings.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub panel_id: String,
    pub slot: usize,
    /// `'w'` or `'s'`.
    pub view: char,
    pub values: Vec<f32>,
}

pub fn write_embeddings_csv<W: Write>(mut out: W, rows: &[EmbeddingRow]) -> io::Result<()> {
    let d = rows.first().map_or(0, |r| r.values.len());
    write!(out, "panel_id,slot,view")?;
    for i in 0..d {
        write!(out, ",e{i}")?;
    }
    writeln!(out)?;
    for r in rows {
        write!(out, "{},{},{}", r.panel_id, r.slot, r.view)?;
        for v in &r.values {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{lookup_rule, sample_panel, Resolution};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            widths: vec![4, 8],
            embed_dim: 6,
            resolution: 32,
        }
    }

    fn panel(seed: u64) -> Panel {
        sample_panel(&lookup_rule("shape").unwrap(), seed, Resolution::new(32).unwrap()).unwrap()
    }

    fn encode_panel(p: &Panel, store: &ParamStore<f64>, net: &Perception) -> Tensor<f64> {
        let mut g = Graph::new();
        let x = g.input(panels_to_tensor(&[p]));
        let f = net.encode(&mut g, store, x).unwrap();
        g.value(f).clone()
    }

    fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        let n = t.shape()[0];
        let r = t.numel() / n;
        (0..n).map(|i| t.to_f64_vec()[i * r..(i + 1) * r].to_vec()).collect()
    }

    #[test]
    fn groups_divide_channels() {
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(6), 6);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(3), 3);
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let net = Perception::new(small(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 64, 64]));
        assert!(matches!(net.encode(&mut g, &store, x), Err(NumericsError::Shape { op: "encode", .. })));
        assert!(EncoderConfig { resolution: 4, ..small() }.validate().is_err());
    }

    #[test]
    fn slots_share_weights() {
        let mut store = ParamStore::<f64>::new();
        let net = Perception::new(small(), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut p = panel(4);
        p.images[2] = p.images[0].clone();
        let f = rows(&encode_panel(&p, &store, &net));
        assert_eq!(f[0], f[2]);
        assert_eq!(net.config().feature_shape(), [8, 8, 8]);

        let mut q = p.clone();
        q.images = [p.images[3].clone(), p.images[1].clone(), p.images[0].clone(), p.images[2].clone()];
        let fq = rows(&encode_panel(&q, &store, &net));
        assert_eq!(fq, vec![f[3].clone(), f[1].clone(), f[0].clone(), f[2].clone()]);
    }

    #[test]
    fn zero_final_conv_gives_zero_features() {
        let mut store = ParamStore::<f64>::new();
        let net = Perception::new(small(), &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        net.zero_final_conv(&mut store);
        let f = encode_panel(&panel(5), &store, &net);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_features_project_to_zero() {
        let mut store = ParamStore::<f64>::new();
        let net = Perception::new(small(), &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new();
        let f = g.input(Tensor::zeros(&[2, 8, 8, 8]));
        let h = net.project(&mut g, &store, f).unwrap();
        assert_eq!(g.shape(h), &[2, 6]);
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_projection_weight_moves_the_embedding() {
        let mut store = ParamStore::<f64>::new();
        let net = Perception::new(small(), &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        // Bias the hidden layer so every relu is active for this input.
        let [_, b1, _, _] = net.projection_params();
        *store.get_mut(b1) = Tensor::full(&[6], 10.0);
        let input = Tensor::uniform(&[1, 8, 8, 8], 0.1, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let embed = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let f = g.input(input.clone());
            let h = net.project(&mut g, store, f).unwrap();
            g.value(h).clone()
        };
        let base = embed(&store);
        for id in net.projection_params() {
            for i in 0..store.get(id).numel() {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += 1e-4;
                let sens = embed(&s).max_abs_diff(&base) / 1e-4;
                assert!(sens > 1e-6, "{} [{i}] has no effect", store.name(id));
            }
        }
    }

    fn set(u: f64) -> EmbeddingSet<f64> {
        let v = vec![1.0, u];
        EmbeddingSet {
            weak_normals: [v.clone(), v.clone(), v.clone()],
            weak_outlier: v.clone(),
            strong_normals: [v.clone(), v.clone(), v.clone()],
            strong_outlier: v,
        }
    }

    #[test]
    fn equal_similarities_give_ln2() {
        let l = acl_loss_sets(&[set(0.3), set(-2.0)], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn extreme_similarities_give_ln2_minus_2() {
        let e = vec![1.0, 0.0];
        let neg = vec![-1.0, 0.0];
        let s = EmbeddingSet {
            weak_normals: [e.clone(), e.clone(), e.clone()],
            weak_outlier: neg.clone(),
            strong_normals: [e.clone(), e.clone(), e.clone()],
            strong_outlier: neg,
        };
        let l = acl_loss_sets(&[s], 1.0).unwrap();
        assert!((l - (std::f64::consts::LN_2 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_embedding_names_the_panel() {
        let mut bad = set(0.1);
        bad.strong_outlier[1] = f64::NAN;
        match acl_loss_sets(&[set(0.2), bad], 1.0) {
            Err(NumericsError::NonFinitePanel { panel, .. }) => assert_eq!(panel, "1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn contrastive_rows_skip_the_outlier() {
        let (n, a) = contrastive_rows(&[2, 0]);
        assert_eq!(n, vec![0, 1, 3, 5, 6, 7]);
        assert_eq!(a, vec![2, 2, 2, 4, 4, 4]);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut buf = Vec::new();
        let rows = vec![EmbeddingRow {
            panel_id: "size-000001".into(),
            slot: 2,
            view: 'w',
            values: vec![0.5, -1.0],
        }];
        write_embeddings_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "panel_id,slot,view,e0,e1\nsize-000001,2,w,0.5,-1\n");
    }
}
