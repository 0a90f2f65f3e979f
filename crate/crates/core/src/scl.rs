//! Semantic consistency learning: shared-weight cross-modal attention with
//! row-wise top-k key selection, applied to a visible and an infrared
//! token stream.
//!
//! Each stage maps both branches through
//!
//! ```text
//! s*    = s + CMAtt(LN(s))
//! s'    = s* + FFN(LN(s*))
//! ```
//!
//! where the keys and values of `CMAtt` are the concatenation (along the
//! token axis) of the layer-normed visible and infrared tokens. Within a
//! query row only the `max(1, floor(k·n_keys))` largest similarities stay
//! in the softmax; the rest are set to `-inf` and skipped when the weights
//! are applied to the values.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, param_err, Result};
use crate::nn::{join, Binder, Ffn, LayerNormParams, Parameters};
use crate::tensor::{mac_count, reset_mac_count, Tensor};

/// Flattened `h×w` feature map, one row per spatial position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, h: usize, w: usize) -> Result<Self> {
        match tokens.shape() {
            [n, _] if *n == h * w => Ok(Self { tokens, h, w }),
            s => dim_err(format!("tokens {s:?} do not form a {h}x{w} grid")),
        }
    }

    /// Single-row grid, handy for unstructured token sets.
    pub fn from_rows(tokens: Tensor) -> Result<Self> {
        let n = tokens.shape()[0];
        Self::new(tokens, n, 1)
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SclStage {
    pub norm_attn: LayerNormParams,
    /// `[c×c]`, shared by both branches.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub norm_ffn: LayerNormParams,
    pub ffn: Ffn,
}

impl SclStage {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, width: usize, ffn_ratio: usize) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        Self {
            norm_attn: LayerNormParams::new(width),
            w_q: Tensor::randn([width, width], std, rng),
            w_k: Tensor::randn([width, width], std, rng),
            w_v: Tensor::randn([width, width], std, rng),
            norm_ffn: LayerNormParams::new(width),
            ffn: Ffn::new(rng, width, ffn_ratio * width),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }

    /// Zeroes the value projection and the FFN output layer, turning the
    /// stage into the identity.
    pub fn zero_outputs(&mut self) {
        self.w_v.data_mut().fill(0.0);
        self.ffn.zero_output();
    }
}

impl Parameters for SclStage {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.norm_attn.visit(&join(prefix, "norm_attn"), out);
        out.push((join(prefix, "w_q"), &self.w_q));
        out.push((join(prefix, "w_k"), &self.w_k));
        out.push((join(prefix, "w_v"), &self.w_v));
        self.norm_ffn.visit(&join(prefix, "norm_ffn"), out);
        self.ffn.visit(&join(prefix, "ffn"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.norm_attn.visit_mut(out);
        out.push(&mut self.w_q);
        out.push(&mut self.w_k);
        out.push(&mut self.w_v);
        self.norm_ffn.visit_mut(out);
        self.ffn.visit_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SclParams {
    pub stages: Vec<SclStage>,
    pub topk_ratio: f64,
    pub heads: usize,
}

pub const DEFAULT_STAGES: usize = 2;
pub const DEFAULT_TOPK_RATIO: f64 = 0.5;
pub const DEFAULT_FFN_RATIO: usize = 4;

impl SclParams {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        width: usize,
        stages: usize,
        topk_ratio: f64,
        heads: usize,
    ) -> Result<Self> {
        let p = Self {
            stages: (0..stages).map(|_| SclStage::new(rng, width, DEFAULT_FFN_RATIO)).collect(),
            topk_ratio,
            heads,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.topk_ratio)?;
        if self.stages.is_empty() {
            return param_err("SCL needs at least one stage");
        }
        let c = self.stages[0].width();
        if self.heads == 0 || c % self.heads != 0 {
            return param_err(format!("{} heads do not divide width {c}", self.heads));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.stages[0].width()
    }
}

impl Parameters for SclParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.stages.visit(&join(prefix, "stages"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.stages.visit_mut(out);
    }
}

fn check_ratio(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return param_err(format!("top-k ratio must lie in (0, 1], got {k}"));
    }
    Ok(())
}

/// Number of keys kept per row: `max(1, floor(k·n))`.
pub fn topk_count(k: f64, n: usize) -> usize {
    ((k * n as f64).floor() as usize).clamp(1, n)
}

/// Keep flags for the `count` largest entries of every row of an
/// `[rows × cols]` matrix; ties at the cutoff go to the lower column.
pub fn topk_keep(a: &Tensor, count: usize) -> Vec<bool> {
    let cols = a.shape()[1];
    let mut keep = vec![false; a.len()];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for (r, row) in a.data().chunks(cols).enumerate() {
        order.clear();
        order.extend(0..cols);
        order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
        for &j in &order[..count] {
            keep[r * cols + j] = true;
        }
    }
    keep
}

/// Affinity mask: 1 for each row's top-k entries, `-inf` elsewhere.
pub fn topk_mask(a: &Tensor, k: f64) -> Result<Tensor> {
    check_ratio(k)?;
    let [_, cols] = a.shape() else {
        return dim_err(format!("top-k mask needs a 2-D matrix, got {:?}", a.shape()));
    };
    let keep = topk_keep(a, topk_count(k, *cols));
    Tensor::new(
        a.shape().to_vec(),
        keep.iter().map(|&k| if k { 1.0 } else { f64::NEG_INFINITY }).collect(),
    )
}

fn check_width(tokens: &Tensor, stage: &SclStage) -> Result<()> {
    let c = stage.width();
    match tokens.shape() {
        [_, w] if *w == c => Ok(()),
        s => dim_err(format!("tokens {s:?} do not match projection width {c}")),
    }
}

/// `A = (s·W_Q)(s·W_K)ᵀ`.
pub fn attention_similarity(s: &TokenGrid, stage: &SclStage) -> Result<Tensor> {
    check_width(&s.tokens, stage)?;
    let q = s.tokens.matmul(&stage.w_q)?;
    let k = s.tokens.matmul(&stage.w_k)?;
    q.matmul(&k.transpose()?)
}

/// Per-call diagnostics of one masked attention.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AttentionSummary {
    pub queries: usize,
    pub keys: usize,
    pub kept_per_row: usize,
    /// Mean over rows of the largest attention weight.
    pub mean_max_weight: f64,
}

/// Result of [`cm_att_var`]: the attended tokens plus, per head, the keep
/// mask that was used.
pub struct CmAttOutput<'t> {
    pub out: Var<'t>,
    pub masks: Vec<Rc<Vec<bool>>>,
    pub weights: Vec<Var<'t>>,
}

/// Cross-modal attention of `query` `[n×c]` over `f` `[m×c]`.
///
/// With `fixed_masks` the given keep masks are used instead of being
/// recomputed from the similarities; gradients then treat the selection
/// as constant.
pub fn cm_att_var<'t>(
    b: &Binder<'t>,
    query: Var<'t>,
    f: Var<'t>,
    stage: &SclStage,
    topk_ratio: f64,
    heads: usize,
    fixed_masks: Option<&[Rc<Vec<bool>>]>,
) -> Result<CmAttOutput<'t>> {
    check_ratio(topk_ratio)?;
    let c = stage.width();
    let (qs, fs) = (query.shape(), f.shape());
    if qs.len() != 2 || fs.len() != 2 || qs[1] != c || fs[1] != c {
        return dim_err(format!("cm_att: query {qs:?} and keys {fs:?} must both have width {c}"));
    }
    if heads == 0 || c % heads != 0 {
        return param_err(format!("{heads} heads do not divide width {c}"));
    }
    let head_width = c / heads;
    let scale = 1.0 / (head_width as f64).sqrt();
    let q = query.matmul(b.param(&stage.w_q))?;
    let k = f.matmul(b.param(&stage.w_k))?;
    let v = f.matmul(b.param(&stage.w_v))?;
    let count = topk_count(topk_ratio, fs[0]);
    let mut outs = Vec::with_capacity(heads);
    let mut masks = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            let s = h * head_width;
            (q.slice(1, s, head_width)?, k.slice(1, s, head_width)?, v.slice(1, s, head_width)?)
        };
        let sim = qh.matmul(kh.t()?)?;
        let keep = match fixed_masks {
            Some(m) => {
                let m = m.get(h).ok_or_else(|| {
                    crate::Error::Parameter(format!("no fixed mask for head {h}"))
                })?;
                Rc::clone(m)
            }
            None => Rc::new(topk_keep(&sim.value(), count)),
        };
        let p = sim.mask_fill(Rc::clone(&keep))?.scale(scale).softmax()?;
        outs.push(p.masked_matmul(vh, Rc::clone(&keep))?);
        masks.push(keep);
        weights.push(p);
    }
    let out = if heads == 1 { outs[0] } else { b.tape().concat(&outs, 1)? };
    Ok(CmAttOutput { out, masks, weights })
}

/// Value-level cross-modal attention; `f` supplies keys and values.
pub fn cm_att(query: &TokenGrid, f: &TokenGrid, stage: &SclStage, topk_ratio: f64, heads: usize) -> Result<TokenGrid> {
    let tape = Tape::new();
    let b = Binder::new(&tape);
    let out = cm_att_var(
        &b,
        b.constant(query.tokens.clone()),
        b.constant(f.tokens.clone()),
        stage,
        topk_ratio,
        heads,
        None,
    )?;
    TokenGrid::new(out.out.value(), query.h, query.w)
}

/// One stage on both branches. Returns the new branch states and the
/// per-branch attention outputs (for masks and diagnostics).
pub fn scl_stage_var<'t>(
    b: &Binder<'t>,
    vi: Var<'t>,
    ir: Var<'t>,
    stage: &SclStage,
    topk_ratio: f64,
    heads: usize,
    fixed_masks: Option<[&[Rc<Vec<bool>>]; 2]>,
) -> Result<(Var<'t>, Var<'t>, [CmAttOutput<'t>; 2])> {
    let ln_vi = stage.norm_attn.forward(b, vi)?;
    let ln_ir = stage.norm_attn.forward(b, ir)?;
    let f = b.tape().concat(&[ln_vi, ln_ir], 0)?;
    let att_vi = cm_att_var(b, ln_vi, f, stage, topk_ratio, heads, fixed_masks.map(|m| m[0]))?;
    let att_ir = cm_att_var(b, ln_ir, f, stage, topk_ratio, heads, fixed_masks.map(|m| m[1]))?;
    let vi_star = vi.add(att_vi.out)?;
    let ir_star = ir.add(att_ir.out)?;
    let vi_next = vi_star.add(stage.ffn.forward(b, stage.norm_ffn.forward(b, vi_star)?)?)?;
    let ir_next = ir_star.add(stage.ffn.forward(b, stage.norm_ffn.forward(b, ir_star)?)?)?;
    Ok((vi_next, ir_next, [att_vi, att_ir]))
}

/// All stages of `params` on both branches.
pub fn scl_block_var<'t>(
    b: &Binder<'t>,
    vi: Var<'t>,
    ir: Var<'t>,
    params: &SclParams,
    summaries: &mut Vec<AttentionSummary>,
) -> Result<(Var<'t>, Var<'t>)> {
    params.validate()?;
    let (vs, is) = (vi.shape(), ir.shape());
    if vs != is {
        return dim_err(format!("SCL branches differ in shape: {vs:?} vs {is:?}"));
    }
    let (mut vi, mut ir) = (vi, ir);
    for stage in &params.stages {
        let (v, i, atts) = scl_stage_var(b, vi, ir, stage, params.topk_ratio, params.heads, None)?;
        for att in &atts {
            for w in &att.weights {
                summaries.push(summarize(&w.value(), topk_count(params.topk_ratio, 2 * vs[0])));
            }
        }
        vi = v;
        ir = i;
    }
    Ok((vi, ir))
}

pub(crate) fn summarize(weights: &Tensor, kept_per_row: usize) -> AttentionSummary {
    let [rows, cols] = weights.shape() else { unreachable!("attention weights are 2-D") };
    let max_sum: f64 = weights
        .data()
        .chunks(*cols)
        .map(|r| r.iter().cloned().fold(0.0, f64::max))
        .sum();
    AttentionSummary {
        queries: *rows,
        keys: *cols,
        kept_per_row,
        mean_max_weight: max_sum / *rows as f64,
    }
}

/// Value-level SCL block.
pub fn scl_block(s_vi: &TokenGrid, s_ir: &TokenGrid, params: &SclParams) -> Result<(TokenGrid, TokenGrid)> {
    if s_vi.tokens.shape() != s_ir.tokens.shape() || (s_vi.h, s_vi.w) != (s_ir.h, s_ir.w) {
        return dim_err(format!(
            "SCL branches differ: {:?} ({}x{}) vs {:?} ({}x{})",
            s_vi.tokens.shape(),
            s_vi.h,
            s_vi.w,
            s_ir.tokens.shape(),
            s_ir.h,
            s_ir.w
        ));
    }
    check_width(&s_vi.tokens, &params.stages[0])?;
    let tape = Tape::new();
    let b = Binder::new(&tape);
    let mut sink = Vec::new();
    let (vi, ir) = scl_block_var(
        &b,
        b.constant(s_vi.tokens.clone()),
        b.constant(s_ir.tokens.clone()),
        params,
        &mut sink,
    )?;
    Ok((TokenGrid::new(vi.value(), s_vi.h, s_vi.w)?, TokenGrid::new(ir.value(), s_ir.h, s_ir.w)?))
}

/// Multiply-accumulate counts for one cross-modal attention call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopReport {
    pub n_hat: usize,
    pub c: usize,
    pub k: f64,
    /// Counted while running this implementation on `n_hat` query tokens
    /// attending over `n_hat` key/value tokens of width `c`.
    pub measured: u64,
    /// `10·n·c²·(1 + 0.2/k²) + 1.75·n²·c/k²`
    pub formula_topk: f64,
    /// `12·n·c² + 2·n²·c`
    pub formula_full: f64,
}

impl FlopReport {
    pub const CSV_HEADER: &'static str = "n_hat,c,k,measured,formula_topk,formula_full";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.n_hat, self.c, self.k, self.measured, self.formula_topk, self.formula_full
        )
    }
}

pub fn published_full_complexity(n: usize, c: usize) -> f64 {
    let (n, c) = (n as f64, c as f64);
    12.0 * n * c * c + 2.0 * n * n * c
}

pub fn published_topk_complexity(n: usize, c: usize, k: f64) -> f64 {
    let (n, c) = (n as f64, c as f64);
    10.0 * n * c * c * (1.0 + 0.2 / (k * k)) + 1.75 * n * n * c / (k * k)
}

/// Runs one single-head cross-modal attention on fixed pseudo-random
/// inputs and counts its multiply-accumulates.
pub fn flops_cmatt(n_hat: usize, c: usize, k: f64) -> Result<FlopReport> {
    use rand::SeedableRng;
    check_ratio(k)?;
    if n_hat == 0 || c == 0 {
        return param_err("n_hat and c must be >= 1");
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5C1);
    let stage = SclStage::new(&mut rng, c, 1);
    let query = TokenGrid::from_rows(Tensor::randn([n_hat, c], 1.0, &mut rng))?;
    let keys = TokenGrid::from_rows(Tensor::randn([n_hat, c], 1.0, &mut rng))?;
    reset_mac_count();
    cm_att(&query, &keys, &stage, k, 1)?;
    let measured = mac_count();
    Ok(FlopReport {
        n_hat,
        c,
        k,
        measured,
        formula_topk: published_topk_complexity(n_hat, c, k),
        formula_full: published_full_complexity(n_hat, c),
    })
}
