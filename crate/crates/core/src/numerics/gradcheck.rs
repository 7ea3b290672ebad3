//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Fault, Graph, NumericsError, Tensor, Var};
use crate::scalar::Scalar;

/// How the values of one case input are drawn.
#[derive(Clone, Copy, Debug)]
pub enum Sampler {
    Uniform(f64, f64),
    /// Magnitude in `[0.1, 1]` with random sign: keeps relu away from its kink.
    AwayFromZero,
    /// Distinct values at least 0.05 apart, so max pooling keeps its argmax.
    Distinct,
}

impl Sampler {
    fn draw<T: Scalar>(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = match self {
            Sampler::Uniform(lo, hi) => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
            Sampler::AwayFromZero => (0..n)
                .map(|_| {
                    let m = rng.gen_range(0.1..1.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect(),
            Sampler::Distinct => {
                let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
                v.shuffle(rng);
                v
            }
        };
        Tensor::from_f64(shape, &vals).expect("sampler shape")
    }
}

type Build<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var, NumericsError>>;

/// One differentiable function of several tensor inputs.
pub struct GradCase<T> {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Sampler)>,
    /// Scalar losses are checked as-is; other outputs are contracted with a
    /// fixed random tensor to get a scalar.
    pub build: Build<T>,
}

impl<T: Scalar> GradCase<T> {
    pub fn new(
        name: &'static str,
        inputs: Vec<(Vec<usize>, Sampler)>,
        build: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var, NumericsError> + 'static,
    ) -> Self {
        Self {
            name,
            inputs,
            build: Box::new(build),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    pub points: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl GradcheckOptions {
    /// 32-bit defaults: eps 1e-3, relative error 1e-2, 5 points.
    pub fn single() -> Self {
        Self {
            eps: 1e-3,
            tolerance: 1e-2,
            points: 5,
            seed: 0x6772_6164,
            fault: None,
        }
    }

    /// 64-bit mode: relative error 1e-4.
    pub fn double() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            ..Self::single()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub dtype: &'static str,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-9 {
        diff
    } else {
        diff / scale
    }
}

fn new_graph<T: Scalar>(fault: Option<Fault>) -> Graph<T> {
    match fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    }
}

fn scalar_loss<T: Scalar>(
    case: &GradCase<T>,
    graph: &mut Graph<T>,
    vars: &[Var],
    contraction: &mut Option<Tensor<T>>,
    rng: &mut ChaCha8Rng,
) -> Result<Var, NumericsError> {
    let out = (case.build)(graph, vars)?;
    if graph.value(out).numel() == 1 {
        return Ok(out);
    }
    let weights = contraction
        .get_or_insert_with(|| Tensor::uniform(graph.shape(out), -1.0, 1.0, rng))
        .clone();
    let w = graph.input(weights);
    let prod = graph.mul(out, w)?;
    graph.sum(prod)
}

fn check_point<T: Scalar>(case: &GradCase<T>, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<f64, NumericsError> {
    let inputs: Vec<Tensor<T>> = case.inputs.iter().map(|(s, sm)| sm.draw(s, rng)).collect();
    let mut contraction = None;

    let mut g = new_graph::<T>(opts.fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = scalar_loss(case, &mut g, &vars, &mut contraction, rng)?;
    let grads = g.backward(loss)?;

    let eval = |inputs: &[Tensor<T>], contraction: &mut Option<Tensor<T>>, rng: &mut ChaCha8Rng| -> Result<f64, NumericsError> {
        let mut g = Graph::<T>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = scalar_loss(case, &mut g, &vars, contraction, rng)?;
        Ok(g.value(loss).data()[0].as_f64())
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let eps = T::from_f64_lossy(opts.eps);
    for (k, var) in vars.iter().enumerate() {
        let a = grads
            .wrt(*var)
            .map(Tensor::to_f64_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        analytic.extend(a);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            // Actual perturbation after rounding to T.
            let h = plus[k].data()[i].as_f64() - minus[k].data()[i].as_f64();
            let fp = eval(&plus, &mut contraction, rng)?;
            let fm = eval(&minus, &mut contraction, rng)?;
            numeric.push((fp - fm) / h);
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn run_cases<T: Scalar>(cases: &[GradCase<T>], opts: &GradcheckOptions) -> GradReport {
    let results = cases
        .iter()
        .enumerate()
        .map(|(ci, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (ci as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut worst = 0.0f64;
            let mut error = None;
            for _ in 0..opts.points {
                match check_point(case, opts, &mut rng) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            CaseResult {
                name: case.name,
                max_rel_error: worst,
                passed: error.is_none() && worst <= opts.tolerance,
                error,
            }
        })
        .collect();
    GradReport {
        dtype: T::NAME,
        tolerance: opts.tolerance,
        cases: results,
    }
}

/// One case per differentiable operation of [`Graph`].
pub fn op_cases<T: Scalar>() -> Vec<GradCase<T>> {
    use Sampler::*;
    let u = Uniform(-1.0, 1.0);
    let s = |d: &[usize]| d.to_vec();
    vec![
        GradCase::new("add", vec![(s(&[3, 4]), u), (s(&[3, 4]), u)], |g, v| g.add(v[0], v[1])),
        GradCase::new("sub", vec![(s(&[3, 4]), u), (s(&[3, 4]), u)], |g, v| g.sub(v[0], v[1])),
        GradCase::new("mul", vec![(s(&[3, 4]), u), (s(&[3, 4]), u)], |g, v| g.mul(v[0], v[1])),
        GradCase::new("scale", vec![(s(&[5]), u)], |g, v| g.scale(v[0], T::from_f64_lossy(-1.7))),
        GradCase::new("relu", vec![(s(&[4, 5]), AwayFromZero)], |g, v| g.relu(v[0])),
        GradCase::new("sigmoid", vec![(s(&[4, 5]), Uniform(-3.0, 3.0))], |g, v| g.sigmoid(v[0])),
        GradCase::new("log_sigmoid", vec![(s(&[4, 5]), Uniform(-4.0, 4.0))], |g, v| g.log_sigmoid(v[0])),
        GradCase::new("log", vec![(s(&[4, 5]), Uniform(0.5, 2.0))], |g, v| g.log(v[0])),
        GradCase::new("exp", vec![(s(&[4, 5]), u)], |g, v| g.exp(v[0])),
        GradCase::new("linear", vec![(s(&[3, 4]), u), (s(&[5, 4]), u), (s(&[5]), u)], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        GradCase::new(
            "conv2d",
            vec![(s(&[2, 3, 5, 5]), u), (s(&[4, 3, 3, 3]), u), (s(&[4]), u)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        GradCase::new(
            "group_norm",
            vec![(s(&[2, 4, 3, 3]), u), (s(&[4]), Uniform(0.5, 1.5)), (s(&[4]), u)],
            |g, v| g.group_norm(v[0], v[1], v[2], 2),
        ),
        GradCase::new("sum", vec![(s(&[3, 4]), u)], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        }),
        GradCase::new("mean", vec![(s(&[3, 4]), u)], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.mean(sq)
        }),
        GradCase::new("sum_axis", vec![(s(&[2, 3, 4]), u)], |g, v| g.sum_axis(v[0], 1)),
        GradCase::new("mean_axis", vec![(s(&[2, 3, 4]), u)], |g, v| g.mean_axis(v[0], 2)),
        GradCase::new(
            "concat",
            vec![(s(&[2, 1, 3]), u), (s(&[2, 2, 3]), u)],
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        GradCase::new("index_select", vec![(s(&[4, 3]), u)], |g, v| g.index_select(v[0], &[3, 0, 3, 1])),
        GradCase::new("reshape", vec![(s(&[2, 6]), u)], |g, v| g.reshape(v[0], &[3, 4])),
        GradCase::new("avg_pool", vec![(s(&[2, 2, 4, 4]), u)], |g, v| g.avg_pool(v[0], 2)),
        GradCase::new("max_pool", vec![(s(&[2, 2, 4, 4]), Distinct)], |g, v| g.max_pool(v[0], 2)),
        GradCase::new("l2_norm", vec![(s(&[3, 5]), AwayFromZero)], |g, v| g.l2_norm(v[0])),
        GradCase::new("dot", vec![(s(&[3, 5]), u), (s(&[3, 5]), u)], |g, v| g.dot(v[0], v[1])),
        GradCase::new("cosine", vec![(s(&[3, 5]), AwayFromZero), (s(&[3, 5]), AwayFromZero)], |g, v| {
            g.cosine(v[0], v[1])
        }),
    ]
}
