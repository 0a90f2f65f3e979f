//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdcm_core::autodiff::{smooth_l1, Tape};
use sdcm_core::config::RunConfig;
use sdcm_core::detect::{assign_targets, loss_total};
use sdcm_core::gradcheck::{run_suite, SuiteOptions};
use sdcm_core::hsi_io::{HsiCube, SceneAnnotation};
use sdcm_core::nn::Binder;
use sdcm_core::scl::{cm_att, cm_att_var, flops_cmatt, scl_block, topk_count, SclParams, SclStage, TokenGrid};
use sdcm_core::sda::spectral_filter_pca;
use sdcm_core::sgg::{band_importance, energy_map};
use sdcm_core::tensor::Tensor;
use sdcm_core::train::{evaluate_ap, make_scenes, train_toy, Split};

/// Writes straight to stderr so the line shows without `--nocapture`.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {n} [{status}] {name}: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn criterion_1_gradient_oracle_suite() {
    let start = Instant::now();
    let reports = run_suite(&SuiteOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.worst_relative_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    let required = [
        "matmul", "softmax", "layer_norm", "batch_norm", "conv2d", "cm_att", "channel_gate", "energy_map",
        "sgg_forward", "cross_att", "decode", "predict", "loss_total",
    ];
    let missing: Vec<&&str> = required.iter().filter(|op| !reports.iter().any(|r| r.op == **op)).collect();
    let pass = failed.is_empty() && missing.is_empty() && reports.iter().all(|r| r.seeds >= 20) && secs < 300.0;
    report(
        1,
        "gradient oracle suite",
        pass,
        &format!("{} ops, worst relative error {worst:.2e}, {secs:.1} s, failed {failed:?}, missing {missing:?}", reports.len()),
    );
    assert!(pass);
}

/// `softmax(q·W_Q (f·W_K)ᵀ / √c) · f·W_V` with plain loops.
fn dense_reference(q: &Tensor, f: &Tensor, st: &SclStage) -> Vec<f64> {
    let qp = q.matmul(&st.w_q).unwrap();
    let kp = f.matmul(&st.w_k).unwrap();
    let vp = f.matmul(&st.w_v).unwrap();
    let (n, m, c) = (q.shape()[0], f.shape()[0], st.width());
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let s: Vec<f64> = (0..m)
            .map(|j| (0..c).map(|d| qp.get(&[i, d]) * kp.get(&[j, d])).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for d in 0..c {
            out[i * c + d] = (0..m).map(|j| e[j] / z * vp.get(&[j, d])).sum();
        }
    }
    out
}

#[test]
fn criterion_2_topk_attention() {
    let mut r = rng(2);
    // (a) full ratio is plain attention
    let mut worst_a: f64 = 0.0;
    for _ in 0..50 {
        let c = r.random_range(2..9);
        let (n, m) = (r.random_range(1..12), r.random_range(1..12));
        let st = SclStage::new(&mut r, c, 2);
        let q = Tensor::randn([n, c], 1.0, &mut r);
        let f = Tensor::randn([m, c], 1.0, &mut r);
        let got = cm_att(&TokenGrid::from_rows(q.clone()).unwrap(), &TokenGrid::from_rows(f.clone()).unwrap(), &st, 1.0, 1)
            .unwrap();
        let want = dense_reference(&q, &f, &st);
        for (a, b) in got.tokens.data().iter().zip(&want) {
            worst_a = worst_a.max((a - b).abs());
        }
    }
    let pass_a = worst_a < 1e-12;

    // (b) masked weights are exactly zero and every row keeps the same count
    let mut pass_b = true;
    for trial in 0..30 {
        let k = [0.25, 0.5, 0.75, 0.1, 0.9][trial % 5];
        let (n, m, c) = (r.random_range(1..10), r.random_range(1..20), 4);
        let st = SclStage::new(&mut r, c, 2);
        let tape = Tape::new();
        let b = Binder::new(&tape);
        let q = b.constant(Tensor::randn([n, c], 1.0, &mut r));
        let f = b.constant(Tensor::randn([m, c], 1.0, &mut r));
        let out = cm_att_var(&b, q, f, &st, k, 1, None).unwrap();
        let keep: &Rc<Vec<bool>> = &out.masks[0];
        let w = out.weights[0].value();
        let want = ((k * m as f64).floor() as usize).max(1);
        pass_b &= topk_count(k, m) == want;
        for (row_w, row_k) in w.data().chunks(m).zip(keep.chunks(m)) {
            pass_b &= row_k.iter().filter(|&&x| x).count() == want;
            pass_b &= row_w.iter().zip(row_k).all(|(&wv, &kv)| if kv { wv > 0.0 } else { wv == 0.0 });
        }
    }

    // (c) measured multiply-accumulates fall with k
    let reports: Vec<_> = [1.0, 0.75, 0.5, 0.25].iter().map(|&k| flops_cmatt(256, 64, k).unwrap()).collect();
    let pass_c = reports.windows(2).all(|w| w[0].measured > w[1].measured);
    let table: Vec<String> = reports
        .iter()
        .map(|f| format!("k={} measured={} formula_topk={:.0} formula_full={:.0}", f.k, f.measured, f.formula_topk, f.formula_full))
        .collect();
    let pass = pass_a && pass_b && pass_c;
    report(
        2,
        "top-k attention",
        pass,
        &format!("(a) max diff {worst_a:.1e} over 50 cases; (b) {pass_b}; (c) {pass_c} [{}]", table.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_3_energy_identities() {
    let mut r = rng(3);
    // e = 2 where t equals the channel mean: symmetric channels around a centre value.
    let mut worst_center: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..20 {
        let mu = r.random_range(-3.0..3.0);
        let d: Vec<f64> = (0..7).map(|_| r.random_range(0.1..2.0)).collect();
        let mut vals = vec![mu];
        for x in &d {
            vals.push(mu - x);
            vals.push(mu + x);
        }
        let n = vals.len();
        let x = Tensor::new([1, 1, 1, n], vals.clone()).unwrap();
        let e = energy_map(&x, 1e-4).unwrap();
        let m = e.mu_hat.data()[0];
        worst_center = worst_center.max((e.values.data()[0] - 2.0).abs()).max((m - mu).abs());
        // strictly decreasing in the squared deviation
        let mut pairs: Vec<(f64, f64)> = vals.iter().zip(e.values.data()).map(|(t, e)| ((t - m).powi(2), *e)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            if w[1].0 > w[0].0 * (1.0 + 1e-12) {
                monotone &= w[1].1 < w[0].1;
            }
        }
    }
    let hand = energy_map(&Tensor::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap(), 1.0).unwrap().values.data()[0];
    let pass = worst_center < 1e-12 && monotone && (hand - 1.6).abs() < 1e-12;
    report(
        3,
        "energy identities",
        pass,
        &format!("|e(mu) - 2| max {worst_center:.1e}, strictly decreasing {monotone}, hand case {hand}"),
    );
    assert!(pass);
}

/// Cyclic Jacobi eigensolver; eigenvectors are the columns of the result.
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).map(|i| (0..n).filter(|&j| j != i).map(|j| a[i][j] * a[i][j]).sum::<f64>()).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta == 0.0 { 1.0 } else { theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt()) };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (a[p][k], a[q][k]);
                    a[p][k] = c * x - s * y;
                    a[q][k] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

#[test]
fn criterion_4_pca_oracle() {
    let mut r = rng(4);
    let (mut worst_basis, mut worst_rec): (f64, f64) = (0.0, 0.0);
    for trial in 0..11 {
        let b = 6 + trial;
        let (h, w) = (10, 9);
        let wl: Vec<f64> = (0..b).map(|i| 400.0 + 600.0 * i as f64 / (b - 1) as f64).collect();
        let mix = Tensor::randn([b, b], 1.0, &mut r);
        let z = Tensor::from_fn([h * w, b], |i| r.random::<f64>() * (1 + i % b) as f64);
        let cube = HsiCube::new(wl, z.matmul(&mix).unwrap().reshape([h, w, b]).unwrap()).unwrap();
        let feats = spectral_filter_pca(&cube, b).unwrap();

        let px: Vec<&[f64]> = cube.data().data().chunks(b).collect();
        let n = px.len() as f64;
        let mean: Vec<f64> = (0..b).map(|j| px.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        let cov: Vec<Vec<f64>> = (0..b)
            .map(|i| (0..b).map(|j| px.iter().map(|p| (p[i] - mean[i]) * (p[j] - mean[j])).sum::<f64>() / n).collect())
            .collect();
        let (vals, vecs) = jacobi(cov);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
        for (col, &k) in order.iter().enumerate() {
            let mut v: Vec<f64> = vecs.iter().map(|row| row[k]).collect();
            // sign convention: largest-magnitude entry positive
            let lead = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            for (row, want) in v.iter().enumerate() {
                worst_basis = worst_basis.max((feats.basis.get(&[row, col]) - want).abs());
            }
        }
        let back = feats.back_project().unwrap();
        for (i, x) in cube.data().data().iter().enumerate() {
            worst_rec = worst_rec.max((back.data()[i] + mean[i % b] - x).abs());
        }
    }
    let pass = worst_basis < 1e-8 && worst_rec < 1e-8;
    report(
        4,
        "PCA oracle equivalence",
        pass,
        &format!("6..16 bands, basis max diff {worst_basis:.1e}, reconstruction max error {worst_rec:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_loss_identities() {
    let eps = 1e-9;
    let value_jump = (smooth_l1(1.0 + eps) - smooth_l1(1.0 - eps)).abs();
    let slope = |x: f64| {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::scalar(x));
        let g = tape.backward(v.smooth_l1()).unwrap();
        g.wrt(v).data()[0]
    };
    let slope_jump = (slope(1.0 + eps) - slope(1.0 - eps)).abs().max((slope(-1.0 - eps) - slope(-1.0 + eps)).abs());
    let continuous = value_jump < 1e-8 && slope_jump < 1e-8 && (smooth_l1(1.0) - 0.5).abs() < 1e-15;

    let ann = SceneAnnotation { image_id: "x".into(), boxes: vec![[0.3, 0.6, 0.2, 0.2]], class_ids: vec![1] };
    let a = assign_targets(&ann, (2, 2)).unwrap();
    let cell = a.targets[0].0;
    // perfect classification at the matched cell
    let mut raw = Tensor::zeros([4, 7]);
    raw.set(&[cell, 5], -1e3);
    raw.set(&[cell, 6], 1e3);
    let perfect = loss_total(&raw, &a, 2).unwrap();
    // all confidences at 0.5: one ln 2 per cell
    let bce = perfect.conf / 4.0;
    let parts_sum = perfect.total == perfect.cls + perfect.boxes + perfect.conf;
    let mut r = rng(5);
    let noisy = loss_total(&Tensor::randn([4, 7], 1.0, &mut r), &a, 2).unwrap();
    let parts_sum = parts_sum && noisy.total == noisy.cls + noisy.boxes + noisy.conf;
    let pass = continuous && perfect.cls == 0.0 && (bce - std::f64::consts::LN_2).abs() < 1e-15 && parts_sum;
    report(
        5,
        "loss identities",
        pass,
        &format!(
            "smooth-L1 jump {value_jump:.1e}, slope jump {slope_jump:.1e}, perfect cls {}, BCE at 0.5 {bce}, parts sum exactly {parts_sum}",
            perfect.cls
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_weight_sharing_symmetry() {
    let mut r = rng(6);
    let mut identical = true;
    for _ in 0..10 {
        let c = 8;
        let params = SclParams::new(&mut r, c, 2, 0.5, 1).unwrap();
        let s = TokenGrid::new(Tensor::randn([16, c], 1.0, &mut r), 4, 4).unwrap();
        let (vi, ir) = scl_block(&s, &s.clone(), &params).unwrap();
        identical &= vi.tokens.data().iter().zip(ir.tokens.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        identical &= vi.tokens != s.tokens;
    }
    report(6, "weight-sharing symmetry", identical, &format!("2 stages, 10 random inputs, bit-identical {identical}"));
    assert!(identical);
}

#[test]
fn criterion_7_toy_convergence() {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let out = train_toy(&cfg, |_| {}).unwrap();
    let first = out.curve[0].loss_total;
    let last = out.curve.last().unwrap().loss_total;
    let ratio = last / first;
    let eval = make_scenes(&cfg, Split::Eval, 20).unwrap();
    let ap = evaluate_ap(&out.model, &eval).unwrap();
    let pass = cfg.steps == 200 && ratio < 0.1 && ap > 0.8;
    report(
        7,
        "toy convergence",
        pass,
        &format!(
            "loss {first:.3} -> {last:.3} (ratio {ratio:.4}, need < 0.1), held-out AP@0.5 {ap:.3} on 20 scenes (need > 0.8), {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

fn sdcm(args: &[&str], dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_sdcm")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    sdcm(&["gen-cube", "--seed", "0", "--out", "c.hsic"], d);
    let train = ["--steps", "5", "--train-scenes", "6", "--batch-size", "3", "--eval-scenes", "3"];
    for run in ["a", "b"] {
        sdcm(&["forward", "--cube", "c.hsic", "--score-threshold", "0", "--out", &format!("{run}/forward")], d);
        let mut args = vec!["train-toy", "--out"];
        let out = format!("{run}/train");
        args.push(&out);
        args.extend_from_slice(&train);
        sdcm(&args, d);
    }
    let files = [
        "forward/detections.json",
        "forward/shapes.csv",
        "forward/trace.json",
        "train/loss_curve.csv",
        "train/checkpoint.sdck",
        "train/summary.json",
    ];
    let same: Vec<bool> = files
        .iter()
        .map(|f| fs::read(d.join("a").join(f)).unwrap() == fs::read(d.join("b").join(f)).unwrap())
        .collect();
    let pass = same.iter().all(|&s| s);
    report(8, "determinism", pass, &format!("{} output files byte-identical across two runs: {same:?}", files.len()));
    assert!(pass);
}

#[test]
fn criterion_9_band_importance() {
    let mut r = rng(9);
    let (h, w, bands) = (32, 32, 10);
    let mut hits = 0;
    let trials = 10;
    for trial in 0..trials {
        let signal_band = trial % bands;
        let (cy, cx, rad) = (r.random_range(8.0..24.0), r.random_range(8.0..24.0), r.random_range(3.0..6.0));
        let data = Tensor::from_fn([h, w, bands], |i| {
            let (p, b) = (i / bands, i % bands);
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            let inside = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() <= rad;
            let noise = 0.01 * (r.random::<f64>() - 0.5);
            0.2 + noise + if inside && b == signal_band { 1.0 } else { 0.0 }
        });
        let wl: Vec<f64> = (0..bands).map(|i| 400.0 + 60.0 * i as f64).collect();
        let imp = band_importance(&HsiCube::new(wl, data).unwrap(), 1e-4).unwrap();
        let best = imp.normalized.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        hits += (best == signal_band && imp.normalized[signal_band] == 1.0) as usize;
    }
    let pass = hits == trials;
    report(9, "band-importance sanity", pass, &format!("signal band ranked first in {hits}/{trials} cubes"));
    assert!(pass);
}
