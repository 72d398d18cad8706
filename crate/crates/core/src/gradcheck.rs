//! Central finite-difference verification of the reverse-mode rules.
//!
//! Every check runs in double precision. A scalar objective is built from
//! fresh leaves, differentiated once, then re-evaluated at `x +/- STEP` per
//! probed coordinate.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbones::{build_densenet_with, build_resnet_with};
use crate::error::{invalid_state, Result};
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::{Graph, Primitive, Tensor, Var};
use crate::wsms::{build_wsms, Integration, Sharing, WsmsNet, WsmsSpec};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-6;
/// Step used to re-probe a coordinate that fails at [`STEP`], which happens
/// when the interval straddles a kink (ReLU at zero, max-pool near-tie).
const FINE_STEP: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    /// The primitive under test, for single-primitive suites.
    pub primitive: Option<Primitive>,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates that needed the finer step.
    pub refined: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= TOLERANCE
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err={:.3e} checked={:<5} refined={:<3} {}",
            self.name,
            self.max_rel_error,
            self.checked,
            self.refined,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.suites.iter().map(|s| s.max_rel_error).fold(0.0, f64::max)
    }

    /// The first failing single-primitive suite. Suites are ordered so that
    /// each one only depends on primitives verified before it.
    pub fn culprit(&self) -> Option<Primitive> {
        self.suites.iter().find(|s| !s.passed()).and_then(|s| s.primitive)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteResult> {
        self.suites.iter().filter(|s| !s.passed())
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{s}")?;
        }
        match (self.passed(), self.culprit()) {
            (true, _) => write!(f, "PASS max_rel_err={:.3e}", self.max_rel_error()),
            (false, Some(p)) => write!(f, "FAIL gradient mismatch in primitive {p}"),
            (false, None) => {
                let names: Vec<_> = self.failures().map(|s| s.name.as_str()).collect();
                write!(f, "FAIL {}", names.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub random_graphs: usize,
    pub max_depth: usize,
    /// Coordinates probed per tensor in the model suites.
    pub model_coords: usize,
    pub fault: Option<Primitive>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            random_graphs: 24,
            max_depth: 6,
            model_coords: 6,
            fault: None,
        }
    }
}

struct Accum {
    max: f64,
    checked: usize,
    refined: usize,
}

impl Accum {
    fn new() -> Self {
        Self { max: 0.0, checked: 0, refined: 0 }
    }

    /// `probe(h)` returns the objective at `x - h` and `x + h`.
    fn record(&mut self, analytic: f64, mut probe: impl FnMut(f64) -> Result<(f64, f64)>) -> Result<()> {
        let central = |(lm, lp): (f64, f64), h: f64| relative_error(analytic, (lp - lm) / (2.0 * h));
        let mut e = central(probe(STEP)?, STEP);
        if !(e <= TOLERANCE) {
            self.refined += 1;
            e = e.min(central(probe(FINE_STEP)?, FINE_STEP));
        }
        self.max = if e.is_nan() { f64::INFINITY } else { self.max.max(e) };
        self.checked += 1;
        Ok(())
    }

    fn finish(self, name: impl Into<String>, primitive: Option<Primitive>) -> SuiteResult {
        SuiteResult {
            name: name.into(),
            primitive,
            max_rel_error: self.max,
            checked: self.checked,
            refined: self.refined,
        }
    }
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn eval(inputs: &[Tensor<f64>], build: &Builder<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares analytic and numeric gradients of `build` with respect to every
/// element of every input (or `limit` sampled elements per input).
pub fn check_function(
    inputs: &[Tensor<f64>],
    build: &Builder<'_>,
    fault: Option<Primitive>,
    limit: Option<(usize, u64)>,
) -> Result<(f64, usize, usize)> {
    let mut g = Graph::new();
    g.inject_fault(fault);
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut acc = Accum::new();
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.var(v).unwrap_or(&zeros);
        let coords: Vec<usize> = match limit {
            Some((k, seed)) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
                sample(&mut rng, n, k).into_vec()
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = work[i].data()[j];
            acc.record(analytic.data()[j], |h| {
                work[i].data_mut()[j] = orig - h;
                let lm = eval(&work, build);
                work[i].data_mut()[j] = orig + h;
                let lp = eval(&work, build);
                work[i].data_mut()[j] = orig;
                Ok((lm?, lp?))
            })?;
        }
    }
    Ok((acc.max, acc.checked, acc.refined))
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU is differentiable at every input.
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Pairwise distinct values, so every max-pool window has a unique winner.
fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| order[i] as f64 / n as f64 - 0.5)
}

/// `sum(y * r)` for a fixed random `r`: a generic scalar projection.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Gradient check of a single primitive in isolation.
pub fn primitive_suite(p: Primitive, seed: u64, fault: Option<Primitive>) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(p as u64 * 1009));
    let s = seed;
    let (inputs, build): (Vec<Tensor<f64>>, Box<Builder<'_>>) = match p {
        Primitive::Sum => (vec![uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|g, v| g.sum(v[0]))),
        Primitive::Mul => (
            vec![uniform(&mut rng, &[2, 3, 4], -1.0, 1.0), uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                g.sum(y)
            }),
        ),
        Primitive::Conv2d => (
            vec![
                uniform(&mut rng, &[2, 4, 6, 6], -1.0, 1.0),
                uniform(&mut rng, &[3, 4, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[3], -1.0, 1.0),
                uniform(&mut rng, &[5, 4, 3, 3], -1.0, 1.0),
            ],
            Box::new(move |g, v| {
                let a = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                let b = g.conv2d(v[0], v[3], None, 2, 1)?;
                let (a, b) = (project(g, a, s)?, project(g, b, s + 1)?);
                g.add(a, b)
            }),
        ),
        Primitive::AvgPoolHalf => (
            vec![uniform(&mut rng, &[2, 3, 4, 6], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.avg_pool_half(v[0])?;
                project(g, y, s)
            }),
        ),
        Primitive::MaxPool2 => (
            vec![distinct(&mut rng, &[2, 3, 4, 6])],
            Box::new(move |g, v| {
                let y = g.max_pool2(v[0])?;
                project(g, y, s)
            }),
        ),
        Primitive::GlobalAvgPool => (
            vec![uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.global_avg_pool(v[0])?;
                project(g, y, s)
            }),
        ),
        Primitive::Relu => (
            vec![off_zero(&mut rng, &[2, 3, 4, 4])],
            Box::new(move |g, v| {
                let y = g.relu(v[0])?;
                project(g, y, s)
            }),
        ),
        Primitive::Add => (
            vec![uniform(&mut rng, &[2, 3, 4], -1.0, 1.0), uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, s)
            }),
        ),
        Primitive::Scale => (
            vec![uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.scale(v[0], -0.7)?;
                project(g, y, s)
            }),
        ),
        Primitive::ConcatChannels => (
            vec![uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0), uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.concat_channels(&[v[0], v[1], v[0]])?;
                project(g, y, s)
            }),
        ),
        Primitive::ShortcutDownsample => (
            vec![uniform(&mut rng, &[2, 3, 5, 6], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.shortcut_downsample(v[0], 5, 2)?;
                project(g, y, s)
            }),
        ),
        Primitive::Reshape => (
            vec![uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.reshape(v[0], vec![2, 12])?;
                project(g, y, s)
            }),
        ),
        Primitive::Linear => (
            vec![
                uniform(&mut rng, &[3, 5], -1.0, 1.0),
                uniform(&mut rng, &[4, 5], -1.0, 1.0),
                uniform(&mut rng, &[4], -1.0, 1.0),
            ],
            Box::new(move |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                project(g, y, s)
            }),
        ),
        Primitive::BatchNormTrain => (
            vec![
                uniform(&mut rng, &[4, 3, 5, 5], -1.0, 1.0),
                uniform(&mut rng, &[3], 0.5, 1.5),
                uniform(&mut rng, &[3], -0.5, 0.5),
            ],
            Box::new(move |g, v| {
                let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                project(g, y, s)
            }),
        ),
        Primitive::BatchNormEval => {
            let mean = uniform(&mut rng, &[3], -0.5, 0.5).into_data();
            let var = uniform(&mut rng, &[3], 0.5, 2.0).into_data();
            (
                vec![
                    uniform(&mut rng, &[4, 3, 5, 5], -1.0, 1.0),
                    uniform(&mut rng, &[3], 0.5, 1.5),
                    uniform(&mut rng, &[3], -0.5, 0.5),
                ],
                Box::new(move |g, v| {
                    let y = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
                    project(g, y, s)
                }),
            )
        }
        Primitive::SoftmaxCrossEntropy => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            (
                vec![uniform(&mut rng, &[4, 5], -2.0, 2.0)],
                Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
            )
        }
    };
    let (max, checked, refined) = check_function(&inputs, build.as_ref(), fault, None)?;
    Ok(SuiteResult {
        name: p.name().to_string(),
        primitive: Some(p),
        max_rel_error: max,
        checked,
        refined,
    })
}

/// Primitive order for [`primitive_suite`]: the projection objective uses
/// `sum` and `mul` and the convolution suite uses `add`, so those come first.
pub fn primitive_order() -> Vec<Primitive> {
    let first = [Primitive::Sum, Primitive::Mul, Primitive::Add];
    first
        .into_iter()
        .chain(Primitive::ALL.into_iter().filter(|p| !first.contains(p)))
        .collect()
}

#[derive(Debug, Clone)]
enum Step {
    Conv { weight: usize, bias: Option<usize>, stride: usize, pad: usize },
    Relu,
    AvgPool,
    MaxPool,
    Bn { gamma: usize, beta: usize },
    Scale(f64),
    Add(usize),
    Mul(usize),
    Concat(usize),
    Shortcut { channels: usize, stride: usize },
}

#[derive(Debug, Clone)]
struct Program {
    steps: Vec<Step>,
    head: Option<(usize, usize, Vec<usize>)>,
}

fn random_program(rng: &mut ChaCha8Rng, depth: usize, leaves: &mut Vec<Tensor<f64>>) -> Program {
    let mut shapes = vec![leaves[0].shape().to_vec()];
    let mut steps = Vec::with_capacity(depth);
    while steps.len() < depth {
        let cur = shapes.last().unwrap().clone();
        let (n, c, h, w) = (cur[0], cur[1], cur[2], cur[3]);
        let same = |s: &Vec<usize>| *s == cur;
        let (step, out) = match rng.random_range(0..10) {
            0 => {
                let cout = rng.random_range(1..=4);
                let k = if rng.random_bool(0.5) { 3 } else { 1 };
                let stride = if h >= 4 && rng.random_bool(0.3) { 2 } else { 1 };
                let weight = leaves.len();
                leaves.push(uniform(rng, &[cout, c, k, k], -0.7, 0.7));
                let bias = rng.random_bool(0.5).then(|| {
                    leaves.push(uniform(rng, &[cout], -0.5, 0.5));
                    leaves.len() - 1
                });
                let (oh, ow) = ((h + 2 * (k / 2) - k) / stride + 1, (w + 2 * (k / 2) - k) / stride + 1);
                (Step::Conv { weight, bias, stride, pad: k / 2 }, vec![n, cout, oh, ow])
            }
            1 => (Step::Relu, cur.clone()),
            2 if h % 2 == 0 && w % 2 == 0 && h >= 2 => (Step::AvgPool, vec![n, c, h / 2, w / 2]),
            3 if h % 2 == 0 && w % 2 == 0 && h >= 2 => (Step::MaxPool, vec![n, c, h / 2, w / 2]),
            4 => {
                leaves.push(uniform(rng, &[c], 0.5, 1.5));
                leaves.push(uniform(rng, &[c], -0.5, 0.5));
                (Step::Bn { gamma: leaves.len() - 2, beta: leaves.len() - 1 }, cur.clone())
            }
            5 => (Step::Scale(rng.random_range(-1.5..1.5)), cur.clone()),
            6 | 7 => {
                let prev: Vec<usize> = (0..shapes.len()).filter(|&i| same(&shapes[i])).collect();
                let j = prev[rng.random_range(0..prev.len())];
                (if rng.random_bool(0.5) { Step::Add(j) } else { Step::Mul(j) }, cur.clone())
            }
            8 => {
                let prev: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i][2..] == cur[2..]).collect();
                let j = prev[rng.random_range(0..prev.len())];
                (Step::Concat(j), vec![n, c + shapes[j][1], h, w])
            }
            9 => {
                let stride = if h >= 2 { 2 } else { 1 };
                let channels = c + rng.random_range(0..=2);
                (Step::Shortcut { channels, stride }, vec![n, channels, (h - 1) / stride + 1, (w - 1) / stride + 1])
            }
            _ => continue,
        };
        steps.push(step);
        shapes.push(out);
    }
    let last = shapes.last().unwrap();
    let head = rng.random_bool(0.5).then(|| {
        let classes = rng.random_range(2..=4);
        leaves.push(uniform(rng, &[classes, last[1]], -1.0, 1.0));
        leaves.push(uniform(rng, &[classes], -0.5, 0.5));
        let labels = (0..last[0]).map(|_| rng.random_range(0..classes)).collect();
        (leaves.len() - 2, leaves.len() - 1, labels)
    });
    Program { steps, head }
}

fn run_program(g: &mut Graph<f64>, v: &[Var], prog: &Program, seed: u64) -> Result<Var> {
    let mut outs = vec![v[0]];
    for step in &prog.steps {
        let x = *outs.last().unwrap();
        let y = match *step {
            Step::Conv { weight, bias, stride, pad } => g.conv2d(x, v[weight], bias.map(|b| v[b]), stride, pad)?,
            Step::Relu => g.relu(x)?,
            Step::AvgPool => g.avg_pool_half(x)?,
            Step::MaxPool => g.max_pool2(x)?,
            Step::Bn { gamma, beta } => g.batch_norm_train(x, v[gamma], v[beta], 1e-5)?.0,
            Step::Scale(f) => g.scale(x, f)?,
            Step::Add(j) => g.add(x, outs[j])?,
            Step::Mul(j) => g.mul(x, outs[j])?,
            Step::Concat(j) => g.concat_channels(&[x, outs[j]])?,
            Step::Shortcut { channels, stride } => g.shortcut_downsample(x, channels, stride)?,
        };
        outs.push(y);
    }
    let y = *outs.last().unwrap();
    match &prog.head {
        Some((w, b, labels)) => {
            let pooled = g.global_avg_pool(y)?;
            let flat = g.flatten(pooled)?;
            let logits = g.linear(flat, v[*w], Some(v[*b]))?;
            g.softmax_cross_entropy(logits, labels)
        }
        None => project(g, y, seed),
    }
}

/// Gradient check of a randomly composed graph of `depth` operations.
pub fn random_graph_suite(seed: u64, depth: usize, fault: Option<Primitive>) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=3);
    let size = [4, 6, 8][rng.random_range(0..3)];
    let mut leaves = vec![uniform(&mut rng, &[2, c, size, size], -1.0, 1.0)];
    let prog = random_program(&mut rng, depth, &mut leaves);
    let build = |g: &mut Graph<f64>, v: &[Var]| run_program(g, v, &prog, seed);
    let (max, checked, refined) = check_function(&leaves, &build, fault, Some((24, seed)))?;
    Ok(SuiteResult {
        name: format!("random graph d={depth} #{seed}"),
        primitive: None,
        max_rel_error: max,
        checked,
        refined,
    })
}

/// Two-stage shared WSMS ResNet (one residual unit per compartment, widths
/// 4 and 8) on 8x8 inputs with a 1x1 integration layer.
pub fn tiny_wsms_resnet() -> Result<WsmsSpec> {
    let backbone = build_resnet_with(1, &[4, 8], 3, 8)?;
    let mut spec = WsmsSpec::new(backbone, 2, Integration::Conv1x1, Sharing::Shared)?;
    spec.integration_channels = 6;
    spec.validate()?;
    Ok(spec)
}

/// Two-stage unshared WSMS DenseNet with a 3x3 integration layer.
pub fn tiny_wsms_densenet() -> Result<WsmsSpec> {
    let backbone = build_densenet_with(2, 2, 2, 4, 3, 8)?;
    let mut spec = WsmsSpec::new(backbone, 2, Integration::Conv3x3, Sharing::Unshared)?;
    spec.integration_channels = 4;
    spec.validate()?;
    Ok(spec)
}

fn model_loss(net: &WsmsNet, store: &ParamStore<f64>, x: &Tensor<f64>, labels: &[usize], fault: Option<Primitive>) -> Result<(Graph<f64>, Var, Var)> {
    let mut g = Graph::new();
    g.inject_fault(fault);
    let xv = g.leaf(x.clone());
    let loss = {
        let mut ctx = Forward::new(&mut g, store, Mode::Train);
        let logits = net.forward(&mut ctx, xv)?;
        ctx.graph.softmax_cross_entropy(logits, labels)?
    };
    Ok((g, xv, loss))
}

/// Train-mode gradient check of a whole network with respect to sampled
/// coordinates of every parameter and of the input.
pub fn model_suite(name: &str, spec: &WsmsSpec, seed: u64, coords: usize, fault: Option<Primitive>) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, mut store) = build_wsms::<f64>(spec, &mut rng)?;
    let classes = spec.backbone.class_count;
    let size = spec.backbone.input_size;
    let batch = 3;
    let x = uniform(&mut rng, &[batch, spec.backbone.input_channels, size, size], -1.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let (g, xv, loss) = model_loss(&net, &store, &x, &labels, fault)?;
    let grads = g.backward(loss)?;
    let eval_store = |s: &ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let (g, _, loss) = model_loss(&net, s, x, &labels, None)?;
        Ok(g.value(loss).data()[0])
    };
    let mut acc = Accum::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.tensor(id)?.numel();
        let picks = sample(&mut rng, n, coords.min(n)).into_vec();
        let analytic = grads
            .param(id)
            .cloned()
            .ok_or_else(|| invalid_state!("parameter {id} received no gradient"))?;
        for j in picks {
            let orig = store.tensor(id)?.data()[j];
            acc.record(analytic.data()[j], |h| {
                store.tensor_mut(id)?.data_mut()[j] = orig - h;
                let lm = eval_store(&store, &x);
                store.tensor_mut(id)?.data_mut()[j] = orig + h;
                let lp = eval_store(&store, &x);
                store.tensor_mut(id)?.data_mut()[j] = orig;
                Ok((lm?, lp?))
            })?;
        }
    }
    let gx = grads.var(xv).cloned().ok_or_else(|| invalid_state!("input received no gradient"))?;
    let mut xw = x.clone();
    for j in sample(&mut rng, x.numel(), (4 * coords).min(x.numel())).into_vec() {
        let orig = xw.data()[j];
        acc.record(gx.data()[j], |h| {
            xw.data_mut()[j] = orig - h;
            let lm = eval_store(&store, &xw);
            xw.data_mut()[j] = orig + h;
            let lp = eval_store(&store, &xw);
            xw.data_mut()[j] = orig;
            Ok((lm?, lp?))
        })?;
    }
    Ok(acc.finish(name, None))
}

/// Runs every primitive suite, `random_graphs` composed graphs with depths
/// cycling through `1..=max_depth`, and the two tiny model suites.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut suites = Vec::new();
    for p in primitive_order() {
        suites.push(primitive_suite(p, opts.seed, opts.fault)?);
    }
    for i in 0..opts.random_graphs {
        let depth = 1 + i % opts.max_depth.max(1);
        let seed = opts.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        suites.push(random_graph_suite(seed, depth, opts.fault)?);
    }
    suites.push(model_suite("tiny wsms-resnet S=2", &tiny_wsms_resnet()?, opts.seed, opts.model_coords, opts.fault)?);
    suites.push(model_suite("tiny wsms-densenet S=2", &tiny_wsms_densenet()?, opts.seed, opts.model_coords, opts.fault)?);
    Ok(GradcheckReport { suites })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn every_primitive_passes() {
        for p in primitive_order() {
            let r = primitive_suite(p, 3, None).unwrap();
            assert!(r.passed(), "{r}");
            assert_eq!(r.refined, 0, "{r}");
        }
    }

    #[test]
    fn composed_graphs_and_models_pass() {
        let opts = GradcheckOptions { seed: 11, random_graphs: 12, ..Default::default() };
        let report = run_gradcheck(&opts).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn fault_in_each_primitive_is_named() {
        for p in Primitive::ALL {
            let opts = GradcheckOptions { seed: 5, random_graphs: 0, fault: Some(p), ..Default::default() };
            let report = run_gradcheck(&opts).unwrap();
            assert!(!report.passed());
            assert_eq!(report.culprit(), Some(p), "{report}");
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let r = primitive_suite(Primitive::Relu, 3, Some(Primitive::Relu)).unwrap();
        assert!(!r.passed());
    }
}
