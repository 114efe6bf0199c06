//! Central finite-difference checks of every tape operation and of the
//! full pretraining and fine-tuning losses on the tiny profile.
//!
//! Operation checks compare input gradients of `Σ W ⊙ f(x)` for a fixed
//! random weight `W`; a plain sum would hide errors in ops whose outputs
//! sum to a constant (softmax rows, normalized activations). Model checks
//! visit a few deterministically sampled elements of every parameter array
//! plus the element with the largest analytic gradient.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autograd::{set_fault_injection, Tape, Var};
use crate::config::RunConfig;
use crate::data::render::{render_synthetic, RenderStyle};
use crate::data::views::{build_views, ViewFlags};
use crate::error::Result;
use crate::model::layers::{multi_head_attention, SaCaFfnBlock};
use crate::model::upsample_tokens;
use crate::params::{Matrix, ParamGrads, ParamStore};
use crate::pretrain::step::{compute_targets, sample_losses, MnspModel};
use crate::recognizer::{causal_bias, Recognizer};
use crate::rng::{rng_from, Rng};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error; below it the check becomes an
/// absolute one at `TOLERANCE * DENOM_FLOOR`.
pub const DENOM_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Location of the worst element.
    pub worst: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<28} {:>8} {:>14}  {:<6} worst element\n",
            "check", "elements", "max rel err", "result"
        );
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<28} {:>8} {:>14.3e}  {:<6} {}",
                r.name,
                r.checked,
                r.max_rel_error,
                if r.passed { "PASS" } else { "FAIL" },
                r.worst
            );
        }
        let _ = writeln!(
            s,
            "{} of {} checks within {:.0e}",
            self.results.iter().filter(|r| r.passed).count(),
            self.results.len(),
            self.tolerance
        );
        s
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random elements per parameter array, on top of the largest-gradient one.
    pub samples_per_array: usize,
    /// Corrupts the GELU backward pass for the duration of the run.
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            samples_per_array: 2,
            inject_fault: false,
        }
    }
}

#[derive(Default)]
struct Tally {
    checked: usize,
    max: f64,
    worst: String,
}

impl Tally {
    fn add(&mut self, a: f64, n: f64, at: impl FnOnce() -> String) {
        let e = relative_error(a, n);
        self.checked += 1;
        if e > self.max || (e.is_nan() && !self.max.is_nan()) {
            self.max = e;
            self.worst = format!("{} (analytic {a:.6e}, numeric {n:.6e})", at());
        }
    }

    fn finish(self, name: &str) -> CheckResult {
        CheckResult {
            name: name.into(),
            checked: self.checked,
            passed: self.max <= TOLERANCE && !self.max.is_nan(),
            max_rel_error: self.max,
            worst: self.worst,
        }
    }
}

fn randn(rng: &mut Rng, shape: (usize, usize)) -> Matrix {
    Matrix::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn check_op(
    name: &str,
    store: &ParamStore,
    inputs: Vec<Matrix>,
    build: &Build,
    rng: &mut Rng,
) -> Result<CheckResult> {
    let mut t = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|m| t.input(m.clone())).collect();
    let out = build(&mut t, &vars)?;
    let weights = randn(rng, t.shape(out));
    let w = t.constant(weights.clone());
    let prod = t.mul(out, w);
    let root = t.sum(prod);
    let grads = t.backward(root);

    let eval = |inputs: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|m| t.constant(m.clone())).collect();
        let out = build(&mut t, &vars)?;
        Ok((t.value(out) * &weights).sum())
    };
    let mut tally = Tally::default();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Matrix::zeros(inputs[k].dim()));
        for ((i, j), &a) in analytic.indexed_iter() {
            let mut xs = inputs.clone();
            xs[k][[i, j]] += STEP;
            let plus = eval(&xs)?;
            xs[k][[i, j]] -= 2.0 * STEP;
            let minus = eval(&xs)?;
            tally.add(a, (plus - minus) / (2.0 * STEP), || format!("input {k} [{i},{j}]"));
        }
    }
    Ok(tally.finish(name))
}

fn operation_checks(rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut r = |shape| randn(rng, shape);
    let cases: Vec<(&str, Vec<Matrix>, Box<Build>)> = vec![
        ("op/matmul", vec![r((3, 4)), r((4, 2))], Box::new(|t, v| Ok(t.matmul(v[0], v[1])))),
        ("op/matmul_t", vec![r((3, 4)), r((5, 4))], Box::new(|t, v| Ok(t.matmul_t(v[0], v[1])))),
        ("op/add", vec![r((2, 3)), r((2, 3))], Box::new(|t, v| Ok(t.add(v[0], v[1])))),
        ("op/sub", vec![r((2, 3)), r((2, 3))], Box::new(|t, v| Ok(t.sub(v[0], v[1])))),
        ("op/mul", vec![r((2, 3)), r((2, 3))], Box::new(|t, v| Ok(t.mul(v[0], v[1])))),
        ("op/add_row", vec![r((3, 4)), r((1, 4))], Box::new(|t, v| Ok(t.add_row(v[0], v[1])))),
        ("op/scale", vec![r((2, 3))], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        (
            "op/row_scale",
            vec![r((3, 2))],
            Box::new(|t, v| Ok(t.row_scale(v[0], vec![0.5, -2.0, 1.25]))),
        ),
        ("op/gelu", vec![r((3, 4))], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("op/softmax", vec![r((3, 5))], Box::new(|t, v| Ok(t.softmax(v[0])))),
        (
            "op/layer_norm",
            vec![r((3, 6)), r((1, 6)), r((1, 6))],
            Box::new(|t, v| Ok(t.layer_norm(v[0], v[1], v[2]))),
        ),
        (
            "op/slice_concat",
            vec![r((2, 5)), r((3, 2))],
            Box::new(|t, v| {
                let a = t.slice_cols(v[0], 1, 2);
                let b = t.concat_cols(&[a, v[0]]);
                let c = t.slice_cols(b, 0, 2);
                Ok(t.concat_rows(&[c, v[1]]))
            }),
        ),
        (
            "op/gather_rows",
            vec![r((4, 3))],
            Box::new(|t, v| Ok(t.gather_rows(v[0], vec![3, 0, 3, 1, 3]))),
        ),
        ("op/sum", vec![r((2, 3))], Box::new(|t, v| Ok(t.sum(v[0])))),
        (
            "op/cross_entropy",
            vec![r((4, 6))],
            Box::new(|t, v| Ok(t.cross_entropy_sum(v[0], vec![1, 5, 2, 0], Some(2)))),
        ),
        (
            "op/bicubic_upsample",
            vec![r((2 * 4, 3))],
            Box::new(|t, v| Ok(upsample_tokens(t, v[0], (2, 4), (4, 8)))),
        ),
        (
            "op/attention_causal",
            vec![r((4, 6)), r((4, 6)), r((4, 6))],
            Box::new(|t, v| {
                let bias = t.constant(causal_bias(4));
                Ok(multi_head_attention(t, v[0], v[1], v[2], 2, Some(bias))?.0)
            }),
        ),
        (
            "op/attention_learned_bias",
            vec![r((3, 2)), r((4, 2)), r((4, 3)), r((3, 4))],
            Box::new(|t, v| Ok(t.attention(v[0], v[1], v[2], 0.7, Some(v[3])))),
        ),
        (
            "op/cross_attention",
            vec![r((3, 4)), r((5, 4)), r((5, 4))],
            Box::new(|t, v| Ok(multi_head_attention(t, v[0], v[1], v[2], 2, None)?.0)),
        ),
    ];
    let empty = ParamStore::new(0);
    for (name, inputs, build) in cases {
        out.push(check_op(name, &empty, inputs, build.as_ref(), rng)?);
    }

    // A full SA-CA-FFN block with respect to its sequence and context.
    let mut store = ParamStore::new(rng.random());
    let block = SaCaFfnBlock::new(&mut store, "block", 4, 6, 2)?;
    let inputs = vec![randn(rng, (3, 4)), randn(rng, (5, 6))];
    let build = move |t: &mut Tape, v: &[Var]| block.forward(t, v[0], v[1], None);
    out.push(check_op("op/sa_ca_ffn_block", &store, inputs, &build, rng)?);
    Ok(out)
}

/// Checks `losses` (value names in `names`) against finite differences on
/// sampled elements of every array in `store`. `values` evaluates the losses
/// only; `grads` also returns one gradient set per loss.
fn check_params(
    prefix: &str,
    names: &[&str],
    store: &ParamStore,
    values: &dyn Fn(&ParamStore) -> Result<Vec<f64>>,
    grads: &dyn Fn(&ParamStore) -> Result<Vec<ParamGrads>>,
    samples_per_array: usize,
    rng: &mut Rng,
) -> Result<Vec<CheckResult>> {
    let analytic = grads(store)?;
    let reference = analytic.len() - 1;
    let mut tallies: Vec<Tally> = names.iter().map(|_| Tally::default()).collect();
    let mut probe = store.clone();
    for (id, name, value) in store.iter() {
        let (rows, cols) = value.dim();
        let mut picks = Vec::with_capacity(samples_per_array + 1);
        if let Some(g) = analytic[reference].get(id) {
            let (best, _) = g
                .indexed_iter()
                .fold(((0, 0), -1.0), |acc, (ix, v)| if v.abs() > acc.1 { (ix, v.abs()) } else { acc });
            picks.push(best);
        }
        for _ in 0..samples_per_array {
            picks.push((rng.random_range(0..rows), rng.random_range(0..cols)));
        }
        picks.sort_unstable();
        picks.dedup();
        for (i, j) in picks {
            let orig = value[[i, j]];
            probe.get_mut(id)[[i, j]] = orig + STEP;
            let plus = values(&probe)?;
            probe.get_mut(id)[[i, j]] = orig - STEP;
            let minus = values(&probe)?;
            probe.get_mut(id)[[i, j]] = orig;
            for (k, tally) in tallies.iter_mut().enumerate() {
                let a = analytic[k].get(id).map_or(0.0, |g| g[[i, j]]);
                tally.add(a, (plus[k] - minus[k]) / (2.0 * STEP), || format!("{name}[{i},{j}]"));
            }
        }
    }
    Ok(tallies
        .into_iter()
        .zip(names)
        .map(|(t, n)| t.finish(&format!("{prefix}/{n}")))
        .collect())
}

fn pretraining_checks(cfg: &RunConfig, opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let mut store = ParamStore::new(opts.seed);
    let model = MnspModel::build(&mut store, &cfg.encoder, &cfg.scales, &cfg.pretrain)?;
    // A separately seeded teacher keeps targets independent of the probe.
    let mut teacher = ParamStore::new(opts.seed ^ 0x5eed);
    MnspModel::build(&mut teacher, &cfg.encoder, &cfg.scales, &cfg.pretrain)?;
    let sample = render_synthetic("grad7", opts.seed, &RenderStyle::default())?;
    let bundle = build_views(
        &sample,
        &cfg.scales,
        &mut rng_from(opts.seed),
        ViewFlags::default(),
        cfg.pretrain.mask_ratio,
        cfg.encoder.channels,
    )?;
    let targets = compute_targets(&model, &teacher, &bundle, &cfg.pretrain)?;
    let pc = &cfg.pretrain;
    let values = |s: &ParamStore| -> Result<Vec<f64>> {
        let mut t = Tape::new(s);
        let v = sample_losses(&mut t, &model, &bundle, &targets, pc)?.values(&t);
        Ok(vec![v.nsp, v.mim, v.mla, v.total])
    };
    let grads = |s: &ParamStore| -> Result<Vec<ParamGrads>> {
        let mut t = Tape::new(s);
        let l = sample_losses(&mut t, &model, &bundle, &targets, pc)?;
        let vars = [l.nsp, l.mim, l.mla, Some(l.total)];
        Ok(vars
            .iter()
            .map(|v| match v {
                Some(v) => t.backward(*v).into_params(),
                None => ParamGrads::zeros_like(s),
            })
            .collect())
    };
    check_params(
        "pretrain",
        &["nsp", "mim", "mla", "total"],
        &store,
        &values,
        &grads,
        opts.samples_per_array,
        rng,
    )
}

fn finetune_checks(cfg: &RunConfig, opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let mut store = ParamStore::new(opts.seed);
    let model = Recognizer::new(&mut store, &cfg.encoder, &cfg.recognizer, cfg.scales.largest())?;
    let sample = render_synthetic("b4x", opts.seed, &RenderStyle::default())?;
    let image = model.prepare(&sample.image);
    let (input, target) = model.charset.teacher_forcing("b4x", None)?;
    let n = target.len() as f64;
    let pad = model.charset.pad();
    let forward = |t: &mut Tape| -> Result<Var> {
        let memory = model.memory(t, &image)?;
        let logits = model.logits(t, memory, &input)?;
        let ce = t.cross_entropy_sum(logits, target.clone(), Some(pad));
        Ok(t.scale(ce, 1.0 / n))
    };
    let values = |s: &ParamStore| -> Result<Vec<f64>> {
        let mut t = Tape::new(s);
        let ce = forward(&mut t)?;
        Ok(vec![t.scalar(ce)])
    };
    let grads = |s: &ParamStore| -> Result<Vec<ParamGrads>> {
        let mut t = Tape::new(s);
        let ce = forward(&mut t)?;
        Ok(vec![t.backward(ce).into_params()])
    };
    check_params("finetune", &["ce"], &store, &values, &grads, opts.samples_per_array, rng)
}

struct FaultGuard;

impl Drop for FaultGuard {
    fn drop(&mut self) {
        set_fault_injection(false);
    }
}

/// Runs the whole suite on `cfg` (normally [`RunConfig::tiny`]).
pub fn run_gradcheck(cfg: &RunConfig, opts: GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let _guard = FaultGuard;
    set_fault_injection(opts.inject_fault);
    let mut rng = rng_from(opts.seed);
    let mut results = operation_checks(&mut rng)?;
    results.extend(pretraining_checks(cfg, &opts, &mut rng)?);
    results.extend(finetune_checks(cfg, &opts, &mut rng)?);
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        results,
    })
}
