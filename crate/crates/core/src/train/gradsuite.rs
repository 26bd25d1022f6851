//! Finite-difference suite over every differentiable operation, run in f64
//! on random shapes and values.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dse::{DeformableConv, DseBlock, LocalAttention, SeBlock};
use crate::error::{PdseError, Result};
use crate::nn::ParamBuilder;
use crate::params::{name_seed, ParamId, ParamStore};
use crate::tensor::gradcheck::{check_inputs_with, GradCheckReport};
use crate::tensor::{Graph, OpKind, Tensor, Var};

type Func = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One random instance: a scalar-valued function and its inputs.
struct Case {
    inputs: Vec<Tensor<f64>>,
    f: Func,
}

pub const SUITE_OPS: [&str; 27] = [
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "mul_broadcast",
    "scale",
    "relu",
    "sigmoid",
    "sum",
    "mean",
    "reshape",
    "matmul",
    "linear",
    "conv2d",
    "deform_conv2d",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "upsample2x",
    "concat",
    "batch_norm",
    "focal_loss",
    "smooth_l1",
    "conv_relu_pool",
    "deformable_conv",
    "se_block",
    "local_attention",
];

/// Composite DSE block; listed separately because it dominates the runtime.
pub const DSE_OP: &str = "dse_block";

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub instances: usize,
    pub h: f64,
    pub tol: f64,
    /// Instances whose forward pass comes closer than this to a kink are redrawn.
    pub kink_min: f64,
    pub max_redraws: usize,
    pub seed: u64,
    pub fault: Option<OpKind>,
    /// Restrict to these op names (all when empty).
    pub only: Vec<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            h: 1e-5,
            tol: 1e-4,
            kink_min: 1e-4,
            max_redraws: 200,
            seed: 0,
            fault: None,
            only: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OpResult {
    pub op: String,
    pub instances: usize,
    pub redrawn: usize,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
    /// Description of the first failing instance.
    pub failure: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub ops: Vec<OpResult>,
    pub passed: bool,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<18} {:>5} {:>7} {:>9} {:>12} {:>12}  result\n",
            "op", "runs", "redrawn", "elements", "max_rel_err", "max_abs_err"
        );
        for r in &self.ops {
            let _ = writeln!(
                s,
                "{:<18} {:>5} {:>7} {:>9} {:>12.3e} {:>12.3e}  {}",
                r.op,
                r.instances,
                r.redrawn,
                r.elements,
                r.max_rel_err,
                r.max_abs_err,
                if r.passed { "pass" } else { "FAIL" }
            );
            if let Some(f) = &r.failure {
                let _ = writeln!(s, "    {f}");
            }
        }
        let _ = writeln!(
            s,
            "{} ({:.1}s)",
            if self.passed { "all checks passed" } else { "gradient check FAILED" },
            self.seconds
        );
        s
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, rng)
}

fn shape(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

/// `Σ y ⊙ r` with a fixed random `r`, turning any output into a scalar whose
/// gradient reaches every element.
fn contract(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    g.sum(p)
}

/// Wraps `op` so its output is contracted with a random weight of the output shape.
fn contracted<F>(inputs: Vec<Tensor<f64>>, op: F, rng: &mut ChaCha8Rng) -> Result<Case>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
{
    let mut g = Graph::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = op(&mut g, &vars)?;
    let r = randn(g.shape(y), rng);
    Ok(Case {
        inputs,
        f: Box::new(move |g, v| {
            let y = op(g, v)?;
            contract(g, y, &r)
        }),
    })
}

/// A case over a parameterized block: inputs are `x` followed by every
/// parameter (redrawn uniformly), bound into the graph in store order.
fn block_case<B, F>(x: Tensor<f64>, block: B, mut store: ParamStore<f64>, fwd: F, rng: &mut ChaCha8Rng) -> Result<Case>
where
    B: 'static,
    F: Fn(&B, &mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Var> + 'static,
{
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut inputs = vec![x];
    for &id in &ids {
        let p = store.get_mut(id);
        p.value = uniform(p.value.shape(), -0.8, 0.8, rng);
        inputs.push(p.value.clone());
    }
    let op = move |g: &mut Graph<f64>, v: &[Var]| {
        for (k, &id) in ids.iter().enumerate() {
            g.bind_param(id, v[k + 1]);
        }
        fwd(&block, g, &store, v[0])
    };
    contracted(inputs, op, rng)
}

fn elementwise(rng: &mut ChaCha8Rng, broadcast: bool) -> (Vec<usize>, Vec<usize>) {
    let rank = rng.random_range(1..=4);
    let a = shape(rng, rank, 4);
    let mut b = a.clone();
    if broadcast {
        for d in b.iter_mut() {
            if rng.random_bool(0.5) {
                *d = 1;
            }
        }
    }
    if rng.random_bool(0.5) {
        (a, b)
    } else {
        (b, a)
    }
}

fn conv_dims(rng: &mut ChaCha8Rng, k: usize) -> (Vec<usize>, Vec<usize>, usize, usize) {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let o = rng.random_range(1..=3);
    let h = rng.random_range(k.max(3)..=6);
    let w = rng.random_range(k.max(3)..=6);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    (vec![n, c, h, w], vec![o, c, k, k], stride, pad)
}

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    match op {
        "add" | "sub" | "mul" | "add_broadcast" | "mul_broadcast" => {
            let (sa, sb) = elementwise(rng, op.ends_with("broadcast"));
            let inputs = vec![randn(&sa, rng), randn(&sb, rng)];
            let kind = op.split('_').next().unwrap_or(op).to_string();
            contracted(
                inputs,
                move |g, v| match kind.as_str() {
                    "add" => g.add(v[0], v[1]),
                    "sub" => g.sub(v[0], v[1]),
                    _ => g.mul(v[0], v[1]),
                },
                rng,
            )
        }
        "scale" => {
            let rank = rng.random_range(1..=4);
            let s = shape(rng, rank, 4);
            let f = rng.random_range(-3.0..3.0);
            contracted(vec![randn(&s, rng)], move |g, v| g.scale(v[0], f), rng)
        }
        "relu" | "sigmoid" => {
            let rank = rng.random_range(1..=4);
            let s = shape(rng, rank, 4);
            let x = uniform(&s, -3.0, 3.0, rng);
            let relu = op == "relu";
            contracted(vec![x], move |g, v| if relu { g.relu(v[0]) } else { g.sigmoid(v[0]) }, rng)
        }
        "sum" | "mean" => {
            let rank = rng.random_range(1..=4);
            let s = shape(rng, rank, 4);
            let mean = op == "mean";
            let inputs = vec![randn(&s, rng)];
            // Square first so the reduction is not the only linear step.
            Ok(Case {
                inputs,
                f: Box::new(move |g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    if mean {
                        g.mean(sq)
                    } else {
                        g.sum(sq)
                    }
                }),
            })
        }
        "reshape" => {
            let s = shape(rng, 3, 4);
            let to = [s[2], s[0] * s[1]];
            contracted(vec![randn(&s, rng)], move |g, v| g.reshape(v[0], &to), rng)
        }
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
            contracted(vec![randn(&[m, k], rng), randn(&[k, n], rng)], |g, v| g.matmul(v[0], v[1]), rng)
        }
        "linear" => {
            let (n, i, o) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=4));
            let mut inputs = vec![randn(&[n, i], rng), randn(&[o, i], rng)];
            let bias = rng.random_bool(0.5);
            if bias {
                inputs.push(randn(&[o], rng));
            }
            contracted(inputs, move |g, v| g.linear(v[0], v[1], bias.then(|| v[2])), rng)
        }
        "conv2d" => {
            let k = if rng.random_bool(0.5) { 1 } else { 3 };
            let (xs, ws, stride, pad) = conv_dims(rng, k);
            let bias = rng.random_bool(0.5);
            let mut inputs = vec![randn(&xs, rng), randn(&ws, rng)];
            if bias {
                inputs.push(randn(&[ws[0]], rng));
            }
            contracted(inputs, move |g, v| g.conv2d(v[0], v[1], bias.then(|| v[2]), stride, pad), rng)
        }
        "deform_conv2d" => {
            let (xs, ws, stride, _) = conv_dims(rng, 3);
            let pad = 1;
            let ho = (xs[2] + 2 * pad - 3) / stride + 1;
            let wo = (xs[3] + 2 * pad - 3) / stride + 1;
            let bias = rng.random_bool(0.5);
            let mut inputs = vec![
                randn(&xs, rng),
                uniform(&[xs[0], 18, ho, wo], -1.5, 1.5, rng),
                randn(&ws, rng),
            ];
            if bias {
                inputs.push(randn(&[ws[0]], rng));
            }
            contracted(
                inputs,
                move |g, v| g.deform_conv2d(v[0], v[1], v[2], bias.then(|| v[3]), stride, pad),
                rng,
            )
        }
        "max_pool2d" | "avg_pool2d" => {
            let k = rng.random_range(2..=3);
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=k / 2);
            let s = vec![
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                rng.random_range(k..=6),
                rng.random_range(k..=6),
            ];
            let max = op == "max_pool2d";
            contracted(
                vec![randn(&s, rng)],
                move |g, v| {
                    if max {
                        g.max_pool2d(v[0], k, stride, pad)
                    } else {
                        g.avg_pool2d(v[0], k, stride, pad)
                    }
                },
                rng,
            )
        }
        "global_avg_pool" | "upsample2x" => {
            let s = shape(rng, 4, 4);
            let gap = op == "global_avg_pool";
            contracted(
                vec![randn(&s, rng)],
                move |g, v| if gap { g.global_avg_pool(v[0]) } else { g.upsample2x(v[0]) },
                rng,
            )
        }
        "concat" => {
            let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
            let parts = rng.random_range(2..=3);
            let inputs: Vec<Tensor<f64>> = (0..parts)
                .map(|_| {
                    let c = rng.random_range(1..=3);
                    randn(&[n, c, h, w], rng)
                })
                .collect();
            contracted(inputs, |g, v| g.concat(v), rng)
        }
        "batch_norm" => {
            let s = vec![
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(2..=4),
                rng.random_range(1..=4),
            ];
            let c = s[1];
            let inputs = vec![uniform(&s, -2.0, 2.0, rng), uniform(&[c], 0.5, 1.5, rng), randn(&[c], rng)];
            let (rm, rv) = (Tensor::zeros(&[c]), Tensor::full(&[c], 1.0));
            contracted(inputs, move |g, v| g.batch_norm(v[0], v[1], v[2], &rm, &rv, None, 1e-5), rng)
        }
        "focal_loss" => {
            let rank = rng.random_range(1..=4);
            let s = shape(rng, rank, 4);
            let x = uniform(&s, -4.0, 4.0, rng);
            let t = Tensor::from_fn(&s, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
            let w = Tensor::from_fn(&s, |_| if rng.random_bool(0.9) { 1.0 } else { 0.0 });
            let alpha = rng.random_range(0.1..0.9);
            let gamma = [0.0, 0.5, 1.0, 2.0, 3.0][rng.random_range(0..5)];
            let norm = rng.random_range(1.0..10.0);
            Ok(Case {
                inputs: vec![x],
                f: Box::new(move |g, v| g.focal_loss(v[0], &t, &w, alpha, gamma, norm)),
            })
        }
        "smooth_l1" => {
            let rank = rng.random_range(1..=4);
            let s = shape(rng, rank, 4);
            let p = uniform(&s, -2.0, 2.0, rng);
            let t = uniform(&s, -2.0, 2.0, rng);
            let m = Tensor::from_fn(&s, |_| if rng.random_bool(0.8) { 1.0 } else { 0.0 });
            let beta = rng.random_range(0.05..1.0);
            let norm = rng.random_range(1.0..10.0);
            Ok(Case {
                inputs: vec![p],
                f: Box::new(move |g, v| g.smooth_l1(v[0], &t, &m, beta, norm)),
            })
        }
        "conv_relu_pool" => {
            let (xs, ws, _, _) = conv_dims(rng, 3);
            let inputs = vec![randn(&xs, rng), randn(&ws, rng)];
            Ok(Case {
                inputs,
                f: Box::new(|g, v| {
                    let y = g.conv2d(v[0], v[1], None, 1, 1)?;
                    let y = g.relu(y)?;
                    let y = g.max_pool2d(y, 2, 2, 0)?;
                    g.sum(y)
                }),
            })
        }
        "deformable_conv" => {
            let (c, o) = (rng.random_range(1..=4), rng.random_range(1..=3));
            let x = randn(&[1, c, rng.random_range(3..=6), rng.random_range(3..=6)], rng);
            let mut store = ParamStore::new();
            let block = DeformableConv::build(&mut ParamBuilder::init(&mut store, rng.random()), "d", c, o)?;
            block_case(x, block, store, |b, g, s, x| b.forward(g, s, x), rng)
        }
        "se_block" => {
            let r = rng.random_range(1..=2);
            let c = r * rng.random_range(1..=4);
            let x = randn(&[rng.random_range(1..=2), c, rng.random_range(1..=4), rng.random_range(1..=4)], rng);
            let mut store = ParamStore::new();
            let block = SeBlock::build(&mut ParamBuilder::init(&mut store, rng.random()), "se", c, r)?;
            block_case(x, block, store, |b, g, s, x| b.forward(g, s, x), rng)
        }
        "local_attention" => {
            let c = rng.random_range(1..=4);
            let x = randn(&[rng.random_range(1..=2), c, rng.random_range(1..=4), rng.random_range(1..=4)], rng);
            let mut store = ParamStore::new();
            let block = LocalAttention::build(&mut ParamBuilder::init(&mut store, rng.random()), "la", c)?;
            block_case(x, block, store, |b, g, s, x| b.forward(g, s, x), rng)
        }
        DSE_OP => {
            let c = 2 * rng.random_range(1..=4);
            let x = randn(&[1, c, rng.random_range(4..=6), rng.random_range(4..=6)], rng);
            let mut store = ParamStore::new();
            let block = DseBlock::build(&mut ParamBuilder::init(&mut store, rng.random()), "dse", c, 2)?;
            block_case(x, block, store, |b, g, s, x| b.forward(g, s, x), rng)
        }
        other => Err(PdseError::Config(format!("unknown gradient-check op {other:?}"))),
    }
}

/// Every op name the suite knows.
pub fn all_ops() -> Vec<&'static str> {
    SUITE_OPS.iter().copied().chain([DSE_OP]).collect()
}

/// Checks one op on `cfg.instances` random instances.
pub fn check_op(op: &str, cfg: &SuiteConfig) -> Result<OpResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, op));
    let mut total = GradCheckReport::default();
    let (mut redrawn, mut failure) = (0, None);
    for i in 0..cfg.instances {
        let mut attempts = 0;
        let report = loop {
            let case = make_case(op, &mut rng)?;
            let r = check_inputs_with(&case.f, &case.inputs, cfg.h, cfg.tol, cfg.fault)?;
            if r.kink_margin >= cfg.kink_min {
                break r;
            }
            attempts += 1;
            redrawn += 1;
            if attempts > cfg.max_redraws {
                return Err(PdseError::invalid(
                    "gradcheck",
                    format!("{op}: no instance clear of kinks after {attempts} draws"),
                ));
            }
        };
        if !report.passed && failure.is_none() {
            failure = Some(format!(
                "instance {i}: max rel err {:.3e}, max abs err {:.3e} at (input, element) {:?}",
                report.max_rel_err, report.max_abs_err, report.worst
            ));
        }
        total.merge(&report);
    }
    Ok(OpResult {
        op: op.to_string(),
        instances: cfg.instances,
        redrawn,
        elements: total.checked,
        max_rel_err: total.max_rel_err,
        max_abs_err: total.max_abs_err,
        passed: failure.is_none(),
        failure,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut ops = Vec::new();
    for op in all_ops() {
        if !cfg.only.is_empty() && !cfg.only.iter().any(|o| o == op) {
            continue;
        }
        let r = check_op(op, cfg)?;
        log::info!("gradcheck {op}: max rel err {:.3e} ({:.1}s)", r.max_rel_err, r.seconds);
        ops.push(r);
    }
    if ops.is_empty() {
        return Err(PdseError::Config(format!("no known op in {:?}", cfg.only)));
    }
    Ok(SuiteReport {
        passed: ops.iter().all(|r| r.passed),
        ops,
        seconds: start.elapsed().as_secs_f64(),
    })
}
