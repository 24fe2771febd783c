#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tclab::nn::{Graph, Tensor, Var};
use tclab::Result;

/// Where random inputs are drawn from, chosen to keep kinks out of reach of the
/// finite-difference step.
#[derive(Clone, Copy)]
enum Domain {
    General,
    Positive,
    AwayFromZero,
}

fn draw(rng: &mut ChaCha8Rng, (r, c): (usize, usize), d: Domain) -> Tensor {
    Array2::from_shape_fn((r, c), |_| match d {
        Domain::General => rng.random_range(-2.0..2.0),
        Domain::Positive => rng.random_range(0.5..3.0),
        Domain::AwayFromZero => {
            let m: f64 = rng.random_range(0.2..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        }
    })
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    op: &'static str,
    inputs: Vec<Tensor>,
    build: Builder,
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

pub const OPS: [&str; 24] = [
    "matmul", "add_row", "add", "sub", "mul", "scale", "shift", "relu", "tanh", "exp", "log", "softplus", "abs", "sum",
    "mean", "log_sum_exp", "row_log_sum_exp", "pair_sum", "reshape", "diagonal", "slice_rows", "concat_cols", "mse", "mae",
];

fn case(op: &'static str, rng: &mut ChaCha8Rng) -> Case {
    use Domain::*;
    let (r, c) = (dim(rng), dim(rng));
    let one = |rng: &mut ChaCha8Rng, d| vec![draw(rng, (r, c), d)];
    let two = |rng: &mut ChaCha8Rng| vec![draw(rng, (r, c), General), draw(rng, (r, c), General)];
    let (inputs, build): (Vec<Tensor>, Builder) = match op {
        "matmul" => {
            let k = dim(rng);
            (vec![draw(rng, (r, k), General), draw(rng, (k, c), General)], Box::new(|g, v| g.matmul(v[0], v[1])))
        }
        "add_row" => (vec![draw(rng, (r, c), General), draw(rng, (1, c), General)], Box::new(|g, v| g.add_row(v[0], v[1]))),
        "add" => (two(rng), Box::new(|g, v| g.add(v[0], v[1]))),
        "sub" => (two(rng), Box::new(|g, v| g.sub(v[0], v[1]))),
        "mul" => (two(rng), Box::new(|g, v| g.mul(v[0], v[1]))),
        "scale" => {
            let k: f64 = rng.random_range(-3.0..3.0);
            (one(rng, General), Box::new(move |g, v| Ok(g.scale(v[0], k))))
        }
        "shift" => {
            let k: f64 = rng.random_range(-3.0..3.0);
            (one(rng, General), Box::new(move |g, v| Ok(g.shift(v[0], k))))
        }
        "relu" => (one(rng, AwayFromZero), Box::new(|g, v| Ok(g.relu(v[0])))),
        "tanh" => (one(rng, General), Box::new(|g, v| Ok(g.tanh(v[0])))),
        "exp" => (one(rng, General), Box::new(|g, v| Ok(g.exp(v[0])))),
        "log" => (one(rng, Positive), Box::new(|g, v| Ok(g.log(v[0])))),
        "softplus" => (one(rng, General), Box::new(|g, v| Ok(g.softplus(v[0])))),
        "abs" => (one(rng, AwayFromZero), Box::new(|g, v| Ok(g.abs(v[0])))),
        "sum" => (one(rng, General), Box::new(|g, v| Ok(g.sum(v[0])))),
        "mean" => (one(rng, General), Box::new(|g, v| g.mean(v[0]))),
        "log_sum_exp" => (one(rng, General), Box::new(|g, v| g.log_sum_exp(v[0]))),
        "row_log_sum_exp" => (one(rng, General), Box::new(|g, v| g.row_log_sum_exp(v[0]))),
        "pair_sum" => {
            let m = dim(rng);
            (vec![draw(rng, (r, c), General), draw(rng, (m, c), General)], Box::new(|g, v| g.pair_sum(v[0], v[1])))
        }
        "reshape" => {
            let (rr, cc) = if rng.random_bool(0.5) { (c, r) } else { (1, r * c) };
            (one(rng, General), Box::new(move |g, v| g.reshape(v[0], rr, cc)))
        }
        "diagonal" => (vec![draw(rng, (r, r), General)], Box::new(|g, v| g.diagonal(v[0]))),
        "slice_rows" => {
            let start = rng.random_range(0..r);
            let end = rng.random_range(start + 1..=r);
            (one(rng, General), Box::new(move |g, v| g.slice_rows(v[0], start, end)))
        }
        "concat_cols" => {
            let widths = [dim(rng), dim(rng), dim(rng)];
            (
                widths.iter().map(|&w| draw(rng, (r, w), General)).collect(),
                Box::new(|g, v| g.concat_cols(v)),
            )
        }
        "mse" => (two(rng), Box::new(|g, v| g.mse(v[0], v[1]))),
        "mae" => {
            let a = draw(rng, (r, c), General);
            let b = &a + &draw(rng, (r, c), AwayFromZero);
            (vec![a, b], Box::new(|g, v| g.mae(v[0], v[1])))
        }
        other => panic!("unknown op {other}"),
    };
    Case { op, inputs, build }
}

/// Weighted scalar loss `sum(out * w)`, so every output entry gets a distinct cotangent.
fn loss_of(case: &Case, inputs: &[Tensor], weights: &mut Option<Tensor>, rng: &mut ChaCha8Rng) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let shape = g.value(out).dim();
    let w = weights.get_or_insert_with(|| draw(rng, shape, Domain::General)).clone();
    let wv = g.leaf(w);
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod);
    Ok((g, loss, vars))
}

pub struct GradReport {
    pub configs: usize,
    pub entries: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

pub const RTOL: f64 = 1e-4;
/// Absolute floor for entries whose true gradient is near zero.
pub const ATOL: f64 = 1e-7;

/// Central-difference check of every primitive, cycling ops over `configs` random
/// shapes and inputs.
pub fn gradient_check(configs: usize, seed: u64) -> GradReport {
    let mut rng = tclab::seed::rng(seed);
    let mut report = GradReport { configs, entries: 0, worst_rel: 0.0, failures: Vec::new() };
    for i in 0..configs {
        let op = OPS[i % OPS.len()];
        let case = case(op, &mut rng);
        let mut weights = None;
        let (g, loss, vars) = loss_of(&case, &case.inputs, &mut weights, &mut rng).expect("valid case");
        let grads = g.backward(loss).expect("backward");
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(case.inputs[k].dim()));
            for idx in 0..case.inputs[k].len() {
                let (r, c) = (idx / case.inputs[k].ncols(), idx % case.inputs[k].ncols());
                let x = case.inputs[k][[r, c]];
                let h = 1e-5 * x.abs().max(1.0);
                let eval = |delta: f64, rng: &mut ChaCha8Rng, weights: &mut Option<Tensor>| {
                    let mut inputs = case.inputs.clone();
                    inputs[k][[r, c]] = x + delta;
                    let (g, loss, _) = loss_of(&case, &inputs, weights, rng).expect("valid case");
                    g.scalar(loss)
                };
                let numeric = (eval(h, &mut rng, &mut weights) - eval(-h, &mut rng, &mut weights)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                report.entries += 1;
                if scale > 0.0 {
                    report.worst_rel = report.worst_rel.max(err / scale.max(ATOL / RTOL));
                }
                if err > RTOL * scale + ATOL {
                    report.failures.push(format!(
                        "config {i} op {} input {k} entry ({r},{c}): analytic {a:e} numeric {numeric:e}",
                        case.op
                    ));
                }
            }
        }
    }
    report
}

pub mod cli {
    use std::path::{Path, PathBuf};
    use std::process::{Command, Output};

    pub fn tclab(args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tclab"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .expect("spawn tclab")
    }

    fn s(p: &Path) -> &str {
        p.to_str().expect("utf-8 path")
    }

    fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
            .expect("output dir")
            .map(|e| e.expect("entry").path())
            .filter(|p| p.file_name().is_some_and(|n| n != "config.json"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).expect("read")))
            .collect();
        out.sort();
        out
    }

    /// One small invocation per subcommand, each rerun from its emitted config.json
    /// into a fresh directory. Returns (label, outputs identical, files compared).
    pub fn replay_all(root: &Path) -> Vec<(String, bool, usize)> {
        let d = |n: &str| -> PathBuf { root.join(n) };
        let (m, ds) = (d("matrices"), d("dataset"));
        let matrices = m.join("matrices.json");
        let dataset = ds.join("dataset.csv");
        let model = d("model").join("model.json");
        let runs = ds.join("runs.json");
        let samples = root.join("samples.csv");
        let est = ["--iters", "300", "--batch", "32", "--critic-hidden", "8", "--club-hidden", "8", "--lr", "0.002"];
        let small = ["--pretrain-epochs", "4", "--finetune-epochs", "6"];
        let mut text = String::from("a,b,c,d\n");
        for i in 0..400 {
            let x = [(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), (i as f64 * 0.73).sin(), (i as f64 * 0.29).cos()];
            text.push_str(&format!("{},{},{},{}\n", x[0], x[1] + 0.5 * x[0], x[2], x[3] - 0.3 * x[2]));
        }
        std::fs::write(&samples, text).unwrap();

        let jobs: Vec<(&str, Vec<String>)> = vec![
            ("gen-matrices", vec!["gen-matrices".into(), "--per-level".into(), "2".into()]),
            ("gen-dataset", {
                let mut a: Vec<String> = ["gen-dataset", "--matrices", s(&matrices), "--kinds", "mine,nwj"].map(String::from).to_vec();
                a.extend(est.map(String::from));
                a
            }),
            ("train-corrector", {
                let mut a: Vec<String> = ["train-corrector", "--dataset", s(&dataset), "--heads", "mine,nwj"].map(String::from).to_vec();
                a.extend(small.map(String::from));
                a
            }),
            ("predict --sequences", ["predict", "--model", s(&model), "--sequences", s(&dataset)].map(String::from).to_vec()),
            ("predict --samples", {
                let mut a: Vec<String> = ["predict", "--model", s(&model), "--samples", s(&samples)].map(String::from).to_vec();
                a.extend(est.map(String::from));
                a
            }),
            (
                "experiment bias-correlation",
                ["experiment", "bias-correlation", "--runs", s(&runs), "--kinds", "mine,nwj"].map(String::from).to_vec(),
            ),
            ("experiment bias-variance", {
                let mut a: Vec<String> = [
                    "experiment", "bias-variance", "--dataset", s(&dataset), "--kinds", "mine,nwj", "--repetitions", "2",
                    "--reruns", "2", "--variance-per-level", "1", "--levels", "1..2",
                ]
                .map(String::from)
                .to_vec();
                a.extend(est.map(String::from));
                a.extend(small.map(String::from));
                a
            }),
            ("experiment robustness", {
                let mut a: Vec<String> =
                    ["experiment", "robustness", "--dataset", s(&dataset), "--kinds", "mine,nwj"].map(String::from).to_vec();
                a.extend(small.map(String::from));
                a
            }),
            ("experiment heads", {
                let mut a: Vec<String> =
                    ["experiment", "heads", "--dataset", s(&dataset), "--kinds", "mine,nwj"].map(String::from).to_vec();
                a.extend(small.map(String::from));
                a
            }),
        ];
        let dirs = ["matrices", "dataset", "model", "pred_seq", "pred_samples", "bias", "variance", "robust", "heads"];
        let mut results = Vec::new();
        for ((label, args), dir) in jobs.into_iter().zip(dirs) {
            let first = d(dir);
            let mut full: Vec<&str> = vec!["--seed", "17", "--out-dir", s(&first)];
            full.extend(args.iter().map(String::as_str));
            let out1 = tclab(&full);
            assert!(out1.status.success(), "{label}: {}", String::from_utf8_lossy(&out1.stderr));
            let again = d(&format!("{dir}_replay"));
            let out2 = tclab(&["--config", s(&first.join("config.json")), "--out-dir", s(&again), "--jobs", "2"]);
            assert!(out2.status.success(), "{label} replay: {}", String::from_utf8_lossy(&out2.stderr));
            let (a, b) = (files(&first), files(&again));
            results.push((label.to_string(), a == b && out1.stdout == out2.stdout, a.len()));
        }
        results
    }
}
