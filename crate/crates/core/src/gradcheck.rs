//! Central finite differences and the gradient-check suite that compares
//! them with the tape's analytic gradients, op by op.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::detect::{assign_targets, loss_total_var, predict_var, FeaturePyramid, HeadParams};
use crate::error::{param_err, Error, Result};
use crate::hsi_io::SceneAnnotation;
use crate::nn::{join, Binder, Parameters};
use crate::scl::{cm_att_var, scl_stage_var, SclParams, SclStage};
use crate::sda::{cross_att_var, decode_var, spectral_extractor_var, SdaParams};
use crate::sgg::{channel_gate_var, energy_var, sgg_forward_var, SggParams, DEFAULT_LAMBDA};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_SEEDS: usize = 20;
/// Denominator floor of the relative error, so that two vanishing
/// gradients compare equal.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return param_err(format!("finite-difference step must be > 0, got {h}"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!("non-finite function value at coordinate {i}")));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs()).max(REL_ERROR_FLOOR);
    analytic.max_abs_diff(numeric) / scale
}

/// Loose tensors that take part in a check alongside layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs(pub Vec<Tensor>);

impl Parameters for Inputs {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, t) in self.0.iter().enumerate() {
            out.push((join(prefix, &format!("x{i}")), t));
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.extend(self.0.iter_mut());
    }
}

impl<A: Parameters, B: Parameters> Parameters for (A, B) {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.0.visit(prefix, out);
        self.1.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.0.visit_mut(out);
        self.1.visit_mut(out);
    }
}

/// Compares analytic and numeric gradients of `Σ r ⊙ f(state)` with
/// respect to every tensor of `state`, for a fixed random `r`. Returns
/// the worst relative error over the tensors.
pub fn check_gradients<P, F>(state: &P, f: F, seed: u64, h: f64, corrupt: bool) -> Result<f64>
where
    P: Parameters + Clone,
    F: for<'t> Fn(&Binder<'t>, &P) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let b = Binder::new(&tape);
    let out = f(&b, state)?;
    let weights = Tensor::randn(out.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x77));
    let root = out.mul(b.constant(weights.clone()))?.sum();
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = state.named_params().into_iter().map(|(_, t)| b.grad(&grads, t)).collect();

    let eval = |s: &P| -> Result<f64> {
        let tape = Tape::new();
        let b = Binder::new(&tape);
        let out = f(&b, s)?;
        Ok(out.mul(b.constant(weights.clone()))?.sum().value().data()[0])
    };
    let mut worst: f64 = 0.0;
    for (i, mut a) in analytic.into_iter().enumerate() {
        if corrupt {
            a = a.map(|g| g * 1.01);
        }
        let base = state.named_params()[i].1.clone();
        let numeric = finite_diff_grad(
            |x| {
                let mut s = state.clone();
                *s.params_mut()[i] = x.clone();
                eval(&s)
            },
            &base,
            h,
        )?;
        worst = worst.max(relative_error(&a, &numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub h: f64,
    pub tolerance: f64,
    /// Op whose analytic gradient is deliberately scaled by 1.01.
    pub fault: Option<String>,
    /// Restrict the run to these ops.
    pub only: Option<Vec<String>>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seeds: DEFAULT_SEEDS, h: DEFAULT_STEP, tolerance: DEFAULT_TOLERANCE, fault: None, only: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub seeds: usize,
    pub worst_relative_error: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub const CSV_HEADER: &'static str = "op,seeds,worst_relative_error,tolerance,status";

    pub fn passed(&self) -> bool {
        self.worst_relative_error < self.tolerance
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{}",
            self.op,
            self.seeds,
            self.worst_relative_error,
            self.tolerance,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

pub fn report_csv(reports: &[OpReport]) -> String {
    let mut s = String::from(OpReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

type CaseFn = fn(u64, f64, bool) -> Result<f64>;

/// Every op covered by the suite, in report order.
pub const OPS: &[(&str, CaseFn)] = &[
    ("elementwise", case_elementwise),
    ("matmul", case_matmul),
    ("softmax", case_softmax),
    ("layer_norm", case_layer_norm),
    ("batch_norm", case_batch_norm),
    ("conv2d", case_conv2d),
    ("cm_att", case_cm_att),
    ("scl_block", case_scl_block),
    ("channel_gate", case_channel_gate),
    ("energy_map", case_energy_map),
    ("sgg_forward", case_sgg_forward),
    ("spectral_extractor", case_spectral_extractor),
    ("cross_att", case_cross_att),
    ("decode", case_decode),
    ("predict", case_predict),
    ("loss_total", case_loss_total),
];

pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|(n, _)| *n).collect()
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<OpReport>> {
    if let Some(only) = &opts.only {
        if let Some(bad) = only.iter().find(|o| !OPS.iter().any(|(n, _)| n == o)) {
            return param_err(format!("unknown gradient-check op `{bad}`"));
        }
    }
    let mut reports = Vec::new();
    for &(name, case) in OPS {
        if opts.only.as_ref().is_some_and(|only| !only.iter().any(|o| o == name)) {
            continue;
        }
        let corrupt = opts.fault.as_deref() == Some(name);
        let mut worst: f64 = 0.0;
        for seed in 0..opts.seeds as u64 {
            worst = worst.max(case(seed, opts.h, corrupt)?);
        }
        reports.push(OpReport { op: name, seeds: opts.seeds, worst_relative_error: worst, tolerance: opts.tolerance });
    }
    Ok(reports)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xC0FFEE)
}

fn randn(r: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn case_elementwise(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let state = Inputs(vec![randn(&mut r, [2, 3]), randn(&mut r, [2, 3]).map(|v| v.abs() + 0.5), randn(&mut r, [1, 1, 2, 2])]);
    check_gradients(
        &state,
        |b, s| {
            let x = b.param(&s.0[0]);
            let y = b.param(&s.0[1]);
            let z = b.param(&s.0[2]).upsample(2)?.reshape([2, 8])?;
            let a = x.exp().mul(y.ln())?.add(x.sigmoid().div(y)?)?;
            let c = x.silu().sub(x.scale(3.0).smooth_l1())?.add(y.square().shift(-0.5).clamp_min(0.1))?;
            let t = a.permute(&[1, 0])?.t()?.add(c)?;
            let joined = b.tape().concat(&[t, z.slice(1, 1, 3)?], 1)?;
            joined.mean_axes(&[0]).map(|m| m.neg())
        },
        seed,
        h,
        corrupt,
    )
}

fn case_matmul(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let state = Inputs(vec![randn(&mut r, [3, 4]), randn(&mut r, [4, 2])]);
    check_gradients(&state, |b, s| b.param(&s.0[0]).matmul(b.param(&s.0[1])), seed, h, corrupt)
}

fn case_softmax(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let state = Inputs(vec![randn(&mut r, [3, 5])]);
    check_gradients(&state, |b, s| b.param(&s.0[0]).softmax(), seed, h, corrupt)
}

fn case_layer_norm(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let state = Inputs(vec![randn(&mut r, [3, 6]), randn(&mut r, [6]), randn(&mut r, [6])]);
    check_gradients(
        &state,
        |b, s| b.param(&s.0[0]).layer_norm(b.param(&s.0[1]), b.param(&s.0[2]), 1e-5),
        seed,
        h,
        corrupt,
    )
}

fn case_batch_norm(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let state = Inputs(vec![randn(&mut r, [2, 3, 2, 2]), randn(&mut r, [3]), randn(&mut r, [3])]);
    check_gradients(
        &state,
        |b, s| b.param(&s.0[0]).batch_norm(b.param(&s.0[1]), b.param(&s.0[2]), 1e-5),
        seed,
        h,
        corrupt,
    )
}

fn case_conv2d(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let stride = 1 + (seed as usize % 2);
    let state = Inputs(vec![randn(&mut r, [1, 2, 5, 5]), randn(&mut r, [3, 2, 3, 3])]);
    check_gradients(&state, |b, s| b.param(&s.0[0]).conv2d(b.param(&s.0[1]), stride, 1), seed, h, corrupt)
}

fn stage(r: &mut ChaCha8Rng, c: usize) -> SclStage {
    let mut st = SclStage::new(r, c, 2);
    for t in [&mut st.norm_attn.gain, &mut st.norm_attn.bias, &mut st.norm_ffn.gain, &mut st.norm_ffn.bias] {
        t.axpy(0.3, &Tensor::randn(t.shape().to_vec(), 1.0, r));
    }
    st
}

fn case_cm_att(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let c = 4;
    let st = stage(&mut r, c);
    let state = (Inputs(vec![randn(&mut r, [4, c]), randn(&mut r, [8, c])]), st);
    let masks = {
        let tape = Tape::new();
        let b = Binder::new(&tape);
        let (x, p) = (&state.0, &state.1);
        cm_att_var(&b, b.param(&x.0[0]), b.param(&x.0[1]), p, 0.5, 1, None)?.masks
    };
    check_gradients(
        &state,
        |b, (x, p)| Ok(cm_att_var(b, b.param(&x.0[0]), b.param(&x.0[1]), p, 0.5, 1, Some(&masks))?.out),
        seed,
        h,
        corrupt,
    )
}

type StageMasks = Vec<[Vec<Rc<Vec<bool>>>; 2]>;

fn scl_fixed<'t>(
    b: &Binder<'t>,
    vi: Var<'t>,
    ir: Var<'t>,
    p: &SclParams,
    fixed: Option<&StageMasks>,
) -> Result<(Var<'t>, Var<'t>, StageMasks)> {
    let (mut vi, mut ir) = (vi, ir);
    let mut used = Vec::new();
    for (i, st) in p.stages.iter().enumerate() {
        let m = fixed.map(|f| [&f[i][0][..], &f[i][1][..]]);
        let (v, w, atts) = scl_stage_var(b, vi, ir, st, p.topk_ratio, p.heads, m)?;
        let [a, c] = atts;
        used.push([a.masks, c.masks]);
        vi = v;
        ir = w;
    }
    Ok((vi, ir, used))
}

fn case_scl_block(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let c = 4;
    let mut params = SclParams::new(&mut r, c, 2, 0.5, 2)?;
    params.stages = (0..2).map(|_| stage(&mut r, c)).collect();
    let state = (Inputs(vec![randn(&mut r, [4, c]), randn(&mut r, [4, c])]), params);
    let masks = {
        let tape = Tape::new();
        let b = Binder::new(&tape);
        scl_fixed(&b, b.param(&state.0 .0[0]), b.param(&state.0 .0[1]), &state.1, None)?.2
    };
    check_gradients(
        &state,
        |b, (x, p)| {
            let (vi, ir, _) = scl_fixed(b, b.param(&x.0[0]), b.param(&x.0[1]), p, Some(&masks))?;
            b.tape().concat(&[vi, ir], 0)
        },
        seed,
        h,
        corrupt,
    )
}

fn sgg_state(seed: u64) -> (Inputs, SggParams) {
    let mut r = rng(seed);
    let c = 3;
    let mut p = SggParams::new(c, DEFAULT_LAMBDA);
    p.gamma = Tensor::randn([c], 0.3, &mut r).map(|v| v + 1.0);
    p.beta = Tensor::randn([c], 0.3, &mut r);
    (Inputs(vec![randn(&mut r, [2, c, 2, 2])]), p)
}

fn case_channel_gate(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    check_gradients(&sgg_state(seed), |b, (x, p)| channel_gate_var(b, b.param(&x.0[0]), p), seed, h, corrupt)
}

fn case_energy_map(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let state = Inputs(vec![randn(&mut r, [1, 2, 3, 3])]);
    check_gradients(&state, |b, x| energy_var(b.param(&x.0[0]), DEFAULT_LAMBDA), seed, h, corrupt)
}

fn case_sgg_forward(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    check_gradients(&sgg_state(seed), |b, (x, p)| sgg_forward_var(b, b.param(&x.0[0]), p), seed, h, corrupt)
}

fn sda(r: &mut ChaCha8Rng, d: usize, e: usize, c: usize) -> SdaParams {
    let mut p = SdaParams::new(r, d, e, 2, c, 1, 8);
    for blk in &mut p.decoder {
        for t in [&mut blk.norm_attn.gain, &mut blk.norm_attn.bias, &mut blk.norm_ffn.gain, &mut blk.norm_ffn.bias] {
            t.axpy(0.3, &Tensor::randn(t.shape().to_vec(), 1.0, r));
        }
    }
    for conv in &mut p.extractor {
        conv.bias = Tensor::randn(conv.bias.shape().to_vec(), 0.3, r);
    }
    p
}

fn case_spectral_extractor(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let p = sda(&mut r, 2, 3, 4);
    let state = (Inputs(vec![randn(&mut r, [1, 2, 4, 4])]), p);
    check_gradients(&state, |b, (x, p)| spectral_extractor_var(b, b.param(&x.0[0]), p), seed, h, corrupt)
}

fn case_cross_att(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let p = sda(&mut r, 2, 3, 4);
    let state = (Inputs(vec![randn(&mut r, [3, 3]), randn(&mut r, [5, 4])]), p);
    check_gradients(
        &state,
        |b, (x, p)| Ok(cross_att_var(b, b.param(&x.0[0]), b.param(&x.0[1]), p)?.0),
        seed,
        h,
        corrupt,
    )
}

fn case_decode(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let mut r = rng(seed);
    let p = sda(&mut r, 2, 3, 4);
    let state = (Inputs(vec![randn(&mut r, [4, 4])]), p);
    check_gradients(&state, |b, (x, p)| decode_var(b, b.param(&x.0[0]), p, &mut Vec::new()), seed, h, corrupt)
}

fn predict_state(seed: u64) -> (Inputs, HeadParams) {
    let mut r = rng(seed);
    let (c3, c4, c5, k) = (2, 2, 3, 2);
    let mut head = HeadParams::new(&mut r, c3 + c4 + c5, 4, k);
    head.hidden.bias = Tensor::randn([4], 0.3, &mut r);
    head.out.bias = Tensor::randn([5 + k], 0.3, &mut r);
    let x = Inputs(vec![randn(&mut r, [1, c3, 4, 4]), randn(&mut r, [1, c4, 2, 2]), randn(&mut r, [1, c5])]);
    (x, head)
}

fn predict_raw<'t>(b: &Binder<'t>, x: &Inputs, head: &HeadParams) -> Result<Var<'t>> {
    let pyramid = FeaturePyramid { levels: [None, None, Some(b.param(&x.0[0])), Some(b.param(&x.0[1])), None] };
    Ok(predict_var(b, &pyramid, b.param(&x.0[2]), (1, 1), head)?.0)
}

fn case_predict(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    check_gradients(&predict_state(seed), |b, (x, head)| predict_raw(b, x, head), seed, h, corrupt)
}

fn case_loss_total(seed: u64, h: f64, corrupt: bool) -> Result<f64> {
    let state = predict_state(seed);
    let ann = SceneAnnotation {
        image_id: "gradcheck".into(),
        boxes: vec![[0.3, 0.6, 0.2, 0.25], [0.8, 0.2, 0.15, 0.3]],
        class_ids: vec![0, 1],
    };
    let assignment = assign_targets(&ann, (4, 4))?;
    check_gradients(
        &state,
        |b, (x, head)| Ok(loss_total_var(b, predict_raw(b, x, head)?, &assignment, head.num_classes)?.total),
        seed,
        h,
        corrupt,
    )
}
