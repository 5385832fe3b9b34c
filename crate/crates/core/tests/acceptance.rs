//! Acceptance checks. Each test prints one `criterion NN PASS|FAIL` line to
//! stderr (uncaptured) and then asserts.
//!
//! Run the optional soak with `cargo test --test acceptance -- --ignored`.

mod common;

use std::io::Write as _;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lrt_core::convergence::{
    make_problem, run_lrt_regression, run_noisy_sgd, LrSchedule, LrtRegression, NoiseModel, Trajectory,
};
use lrt_core::datagen::synthetic_digits;
use lrt_core::harness::{scratch_accuracy, scratch_source, ExperimentConfig};
use lrt_core::layers::{
    AffineCore, ApplyParams, BackwardCtx, BnMode, ConvGeometry, ConvLayer, LayerSpec, LrtOptions, MaxNorm,
    NetOptions, NetSpec, Network, StreamBn, WeightRoute,
};
use lrt_core::lowrank::{apply_split_with_signs, sigma_split, FactorStorage, LowRankState, Variant};
use lrt_core::quant::{QuantProfile, QuantSpec, Quantizer};
use lrt_core::trainer::{ConvWriteCounting, DriftModel, TrainMode, Trainer, UpdatePolicy};

use common::{direct_conv, direct_conv_weight_grad, max_abs_diff, outer, random_matrix, random_vec, signs_from_mask};

fn report(id: u32, what: &str, ok: bool, detail: String) {
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:02} {status} {what}: {detail}");
    assert!(ok, "criterion {id} ({what}) failed: {detail}");
}

// Expectation over every sign sequence of the remaining pairs, weighted
// uniformly at each step.
fn tree_expectation(state: &LowRankState, pairs: &[(Array1<f64>, Array1<f64>)]) -> Array2<f64> {
    let Some(((dz, a), rest)) = pairs.split_first() else {
        return state.estimate();
    };
    let plan = state.plan(dz.view(), a.view()).unwrap();
    let n = plan.sign_len();
    let mut acc = Array2::zeros((state.n_o(), state.n_i()));
    for mask in 0..(1u32 << n) {
        let mut child = state.clone();
        child.commit(&plan, &signs_from_mask(mask, n)).unwrap();
        acc += &tree_expectation(&child, rest);
    }
    acc / f64::from(1u32 << n)
}

#[test]
fn criterion_01_unbiased_expectation_exhaustive() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut step_err = 0.0f64;
    let mut steps = 0;
    for r in 1..=3 {
        let mut state = LowRankState::new(5, 5, r, Variant::Unbiased, f64::INFINITY, 1).unwrap();
        for _ in 0..100 {
            let dz = random_vec(&mut rng, 5);
            let a = random_vec(&mut rng, 5);
            let plan = state.plan(dz.view(), a.view()).unwrap();
            assert!(!plan.is_skip());
            let target = state.estimate() + outer(&dz, &a);
            let n = plan.sign_len();
            let mut mean = Array2::zeros((5, 5));
            for mask in 0..(1u32 << n) {
                let mut trial = state.clone();
                trial.commit(&plan, &signs_from_mask(mask, n)).unwrap();
                mean += &trial.estimate();
            }
            mean /= f64::from(1u32 << n);
            step_err = step_err.max(max_abs_diff(&mean, &target));
            let pick = rng.random_range(0..(1u32 << n));
            state.commit(&plan, &signs_from_mask(pick, n)).unwrap();
            steps += 1;
        }
    }

    // Whole sign tree for short sequences: the mean leaf is the exact sum.
    let mut tree_err = 0.0f64;
    for (r, len) in [(1, 6), (2, 5), (3, 5)] {
        let pairs: Vec<_> = (0..len)
            .map(|_| (random_vec(&mut rng, 5), random_vec(&mut rng, 5)))
            .collect();
        let exact = pairs.iter().fold(Array2::zeros((5, 5)), |m, (d, a)| m + outer(d, a));
        let state = LowRankState::new(5, 5, r, Variant::Unbiased, f64::INFINITY, 2).unwrap();
        tree_err = tree_err.max(max_abs_diff(&tree_expectation(&state, &pairs), &exact));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "unbiased estimate expectation",
        step_err <= 1e-10 && tree_err <= 1e-10 && secs < 10.0,
        format!("{steps} steps, per-step max err {step_err:.2e}, full-tree max err {tree_err:.2e} (tol 1e-10), {secs:.2}s"),
    );
}

#[test]
fn criterion_02_lossless_when_rank_fits() {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (2usize..8, 2usize..8, 1usize..5, 1usize..13, any::<bool>(), any::<bool>(), any::<u64>());
    let mut worst = 0.0f64;
    let result = runner.run(&strategy, |(n_o, n_i, r, steps, unbiased, left, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span_dim = if left { n_o } else { n_i };
        let r_sum = rng.random_range(1..=r.min(span_dim));
        // Every pair shares one side drawn from an r_sum-dimensional span, so
        // every partial sum has rank <= r_sum <= r.
        let span = random_matrix(&mut rng, span_dim, r_sum);
        let variant = if unbiased { Variant::Unbiased } else { Variant::Biased };
        let mut state = LowRankState::new(n_o, n_i, r, variant, f64::INFINITY, seed).unwrap();
        let mut exact = Array2::<f64>::zeros((n_o, n_i));
        let mut err = 0.0f64;
        for _ in 0..steps {
            let coeffs = random_vec(&mut rng, r_sum);
            let constrained = span.dot(&coeffs);
            let (dz, a) = if left {
                (constrained, random_vec(&mut rng, n_i))
            } else {
                (random_vec(&mut rng, n_o), constrained)
            };
            state.update(dz.view(), a.view()).unwrap();
            exact += &outer(&dz, &a);
            err = err.max(max_abs_diff(&state.estimate(), &exact));
        }
        prop_assert!(err <= 1e-10, "max err {err:e}");
        Ok(())
    });
    // Re-run the worst-case metric deterministically for the report line.
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    for _ in 0..200 {
        let (n_o, n_i, r) = (rng.random_range(2..8), rng.random_range(2..8), rng.random_range(1..5));
        let r_sum = rng.random_range(1..=r.min(n_o));
        let span = random_matrix(&mut rng, n_o, r_sum);
        let mut state = LowRankState::new(n_o, n_i, r, Variant::Unbiased, f64::INFINITY, 3).unwrap();
        let mut exact = Array2::<f64>::zeros((n_o, n_i));
        for _ in 0..12 {
            let dz = span.dot(&random_vec(&mut rng, r_sum));
            let a = random_vec(&mut rng, n_i);
            state.update(dz.view(), a.view()).unwrap();
            exact += &outer(&dz, &a);
            worst = worst.max(max_abs_diff(&state.estimate(), &exact));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "lossless accumulation at rank <= r",
        result.is_ok() && worst <= 1e-10 && secs < 10.0,
        format!("1000 property cases {}, sample max err {worst:.2e} (tol 1e-10), {secs:.2}s", match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => format!("failed: {e}"),
        }),
    )
}

#[test]
fn criterion_03_variance_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut worst_minus = 0.0f64;
    let mut worst_plus = 0.0f64;
    let mut worst_mean = 0.0f64;
    let mut cases = 0;
    for q in 2..=5 {
        for _ in 0..200 {
            let mut sigma: Vec<f64> = (0..q).map(|_| rng.random_range(0.01..1.0) * 10f64.powi(rng.random_range(-2..2))).collect();
            sigma.sort_by(|a, b| b.total_cmp(a));
            let sigma = Array1::from(sigma);

            // Oracle split: smallest one-based m with (q - m)·σ_m ≤ Σ_{j≥m} σ_j.
            let m = (1..=q)
                .find(|&m| (q - m) as f64 * sigma[m - 1] <= sigma.slice(ndarray::s![m - 1..]).sum())
                .unwrap();
            let tail = sigma.slice(ndarray::s![m - 1..]);
            let k = (q - m) as f64;
            let s1: f64 = tail.sum();
            let s2: f64 = tail.iter().map(|x| x * x).sum();
            let predicted = s1 * s1 / k - s2;
            let plus_form = s1 * s1 / k + s2;

            let split = sigma_split(sigma.view()).unwrap();
            let n = split.sign_len();
            let truth = Array2::from_diag(&sigma);
            let mut mean = Array2::zeros((q, q));
            let mut var = 0.0;
            for mask in 0..(1u32 << n) {
                let (qx, c) = apply_split_with_signs(&split, Variant::Unbiased, &signs_from_mask(mask, n)).unwrap();
                let est = qx.dot(&Array2::from_diag(&c)).dot(&qx.t());
                var += (&est - &truth).mapv(|x| x * x).sum();
                mean += &est;
            }
            let count = f64::from(1u32 << n);
            var /= count;
            mean /= count;
            worst_mean = worst_mean.max(max_abs_diff(&mean, &truth));
            worst_minus = worst_minus.max((var - predicted).abs() / predicted.abs());
            worst_plus = worst_plus.max((var - plus_form).abs() / plus_form.abs());
            cases += 1;
        }
    }
    report(
        3,
        "unbiased reduction variance s1^2/k - s2",
        worst_minus <= 1e-9 && worst_mean <= 1e-12,
        format!(
            "{cases} spectra q<=5, max rel err {worst_minus:.2e} (tol 1e-9), mean err {worst_mean:.2e}; \
             the s1^2/k + s2 form is off by up to {worst_plus:.2e} relative"
        ),
    );
}

fn ce_total(net: &Network, xs: &[Array3<f64>], labels: &[usize]) -> f64 {
    let mut net = net.clone();
    xs.iter()
        .zip(labels)
        .map(|(x, &y)| {
            let logits = net.forward(x.view(), false).unwrap();
            lrt_core::layers::softmax_cross_entropy(logits.view(), y).0
        })
        .sum()
}

#[test]
fn criterion_04_gradient_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);

    // Two dense layers in float mode; three samples push three pairs per layer.
    let spec = NetSpec {
        input: [1, 1, 5],
        layers: vec![LayerSpec::Dense { out: 6 }, LayerSpec::Dense { out: 4 }],
    };
    let opts = NetOptions {
        quant: QuantProfile::float(),
        batch_norm: false,
        bn_mode: BnMode::Streaming,
        maxnorm: false,
        lrt: Some(LrtOptions {
            rank: 3,
            conv_variant: Variant::Biased,
            fc_variant: Variant::Unbiased,
            kappa_th: f64::INFINITY,
            storage: FactorStorage::Wide,
        }),
        conv_batch: 10,
        fc_batch: 100,
    };
    let mut net = Network::build(&spec, &opts, 11).unwrap();
    for core in net.cores_mut() {
        core.b = random_vec(&mut rng, core.n_o()) * 0.1;
    }
    let xs: Vec<Array3<f64>> = (0..3)
        .map(|_| random_vec(&mut rng, 5).into_shape_with_order((1, 1, 5)).unwrap())
        .collect();
    let labels = [0usize, 2, 3];
    let reference = net.clone();
    for (x, &y) in xs.iter().zip(&labels) {
        let logits = net.forward(x.view(), false).unwrap();
        let (_, d, _) = lrt_core::layers::softmax_cross_entropy(logits.view(), y);
        net.backward(d.view(), &BackwardCtx::accumulate_only()).unwrap();
    }
    let h = 1e-5;
    let mut fd_rel = 0.0f64;
    for (li, core) in net.cores().enumerate() {
        assert_eq!(core.pairs_pushed(), 3);
        let g = core.lrt_gradient().unwrap();
        let mut fd = Array2::zeros(g.dim());
        for ((i, j), v) in fd.indexed_iter_mut() {
            let mut plus = reference.clone();
            plus.cores_mut().nth(li).unwrap().w[[i, j]] += h;
            let mut minus = reference.clone();
            minus.cores_mut().nth(li).unwrap().w[[i, j]] -= h;
            *v = (ce_total(&plus, &xs, &labels) - ce_total(&minus, &xs, &labels)) / (2.0 * h);
        }
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        fd_rel = fd_rel.max(max_abs_diff(&g, &fd) / scale);
    }

    // Convolution: direct loops, im2col matmul, and the accumulated pairs.
    let geom = ConvGeometry::new((6, 6, 2), (3, 3), 1, 1).unwrap();
    let c_out = 3;
    let w = random_matrix(&mut rng, c_out, geom.patch_len());
    let x = Array3::from_shape_fn((6, 6, 2), |_| rng.random_range(-1.0..1.0));
    let delta = Array3::from_shape_fn((6, 6, c_out), |_| rng.random_range(-1.0..1.0));
    let direct = direct_conv(&x, &w, 3, 1, 1);
    let cols = lrt_core::layers::im2col_with(x.view(), &geom);
    let via_cols = cols.dot(&w.t()).into_shape_with_order((6, 6, c_out)).unwrap();
    let mut core = AffineCore::new(w.clone(), Array1::zeros(c_out), 1.0, QuantProfile::float(), false);
    core.lrt = Some(LowRankState::new(c_out, geom.patch_len(), geom.pixels(), Variant::Biased, f64::INFINITY, 5).unwrap());
    let mut layer = ConvLayer::new(geom, core).unwrap();
    let via_layer = layer.forward(x.view(), false).unwrap();
    layer.backward(delta.view(), &BackwardCtx::accumulate_only()).unwrap();
    let fwd_err = max_abs_diff(&direct, &via_cols).max(max_abs_diff(&direct, &via_layer));

    let dw_direct = direct_conv_weight_grad(&x, &delta, 3, 1, 1);
    let d_rows = delta.clone().into_shape_with_order((geom.pixels(), c_out)).unwrap();
    let dw_cols = d_rows.t().dot(&cols);
    let dw_lrt = layer.core.lrt_gradient().unwrap();
    let grad_err = max_abs_diff(&dw_direct, &dw_cols).max(max_abs_diff(&dw_direct, &dw_lrt));
    let secs = start.elapsed().as_secs_f64();
    report(
        4,
        "gradients vs finite differences and conv routes",
        fd_rel <= 1e-4 && fwd_err <= 1e-5 && grad_err <= 1e-5 && secs < 30.0,
        format!(
            "dense FD rel err {fd_rel:.2e} (tol 1e-4); conv forward err {fwd_err:.2e}, weight-grad err {grad_err:.2e} \
             (tol 1e-5, r = {} pixels); {secs:.2}s",
            geom.pixels()
        ),
    );
}

fn decreasing(values: impl Iterator<Item = f64>) -> bool {
    let v: Vec<f64> = values.collect();
    v.windows(2).all(|w| w[1] <= w[0]) && v.last() < v.first()
}

#[test]
fn criterion_05_convergence_lab() {
    let start = Instant::now();
    let problem = make_problem(5, 1024, 100, 256).unwrap();
    let lr = LrSchedule::Constant(1.0 / problem.c_max);
    let ratio = |t: &Trajectory| t.final_loss / t.initial_loss();
    let compliant = run_noisy_sgd(&problem, NoiseModel::RelativeToBound(0.5), 50, lr, 5);
    let excess = run_noisy_sgd(&problem, NoiseModel::RelativeToBound(10.0), 50, lr, 5);
    let lrt = run_lrt_regression(
        &problem,
        &LrtRegression {
            variant: Variant::Biased,
            rank: 10,
            steps: 50,
            lr,
            seed: 5,
            weight_quant: None,
        },
    )
    .unwrap();
    let (a, b) = (ratio(&compliant), ratio(&excess));
    let lhs_down = decreasing(lrt.points.iter().map(|p| p.lhs));
    let rhs_down = decreasing(lrt.points.iter().map(|p| p.rhs_c));
    let secs = start.elapsed().as_secs_f64();
    report(
        5,
        "convergence lab at 1024x100, n_o = 256",
        a <= 0.2 && b >= 0.5 && lhs_down && rhs_down && secs < 120.0,
        format!(
            "compliant noise loss ratio {a:.3e} (<= 0.2), 10x noise ratio {b:.3e} (>= 0.5), \
             biased r=10 lhs decreasing {lhs_down}, rhs decreasing {rhs_down}; {secs:.1}s"
        ),
    );
}

fn write_density_run(mode: TrainMode, counting: ConvWriteCounting) -> Trainer {
    let spec = NetSpec {
        input: [28, 28, 1],
        layers: vec![
            LayerSpec::Conv {
                out_channels: 4,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            LayerSpec::Pool,
            LayerSpec::Dense { out: 10 },
        ],
    };
    let net = Network::build(&spec, &NetOptions::default(), 3).unwrap();
    let policy = UpdatePolicy {
        mode,
        kappa_th: f64::INFINITY,
        conv_counting: counting,
        ..UpdatePolicy::default()
    };
    let mut trainer = Trainer::new(net, policy, DriftModel::default(), 3).unwrap();
    let data = synthetic_digits(3, 1000);
    for i in 0..10_000 {
        let j = i % data.len();
        trainer
            .train_step(data.image(j).insert_axis(Axis(2)), data.labels[j] as usize)
            .unwrap();
    }
    trainer
}

#[test]
fn criterion_06_write_density() {
    let start = Instant::now();
    let sgd = write_density_run(TrainMode::Sgd, ConvWriteCounting::PerPixel);
    let lrt = write_density_run(TrainMode::Lrt, ConvWriteCounting::PerPixel);
    let (sgd_conv, sgd_dense) = sgd.write_events_by_kind();
    let (lrt_conv, lrt_dense) = lrt.write_events_by_kind();
    let skipped: u64 = lrt.net.cores().filter_map(|c| c.lrt.as_ref()).map(|l| l.samples_skipped()).sum();
    let pixels = 14 * 14;
    let dense_ratio = sgd_dense as f64 / lrt_dense.max(1) as f64;
    let conv_ratio = sgd_conv as f64 / lrt_conv.max(1) as f64;
    let secs = start.elapsed().as_secs_f64();
    report(
        6,
        "write density, 10k samples",
        sgd_dense == 10_000
            && lrt_dense <= 100
            && dense_ratio >= 100.0
            && sgd_conv == 10_000 * pixels
            && conv_ratio >= 1000.0
            && skipped == 0,
        format!(
            "dense writes/cell SGD {sgd_dense}, LRT {lrt_dense} (ratio {dense_ratio:.0}); \
             conv writes/cell per-pixel SGD {sgd_conv}, LRT {lrt_conv} (ratio {conv_ratio:.0}, {pixels} px, B=10); \
             skips {skipped}; {secs:.1}s"
        ),
    );
}

#[test]
fn criterion_07_sub_lsb_accumulation() {
    let w_spec = QuantSpec::new(8, -1.0, 1.0).unwrap();
    let lsb = w_spec.lsb();
    let quant = QuantProfile {
        w: w_spec.into(),
        b: Quantizer::IDENTITY,
        a: Quantizer::IDENTITY,
        g: Quantizer::IDENTITY,
    };
    let (n_o, n_i) = (4, 4);
    let a = Array2::from_elem((1, n_i), 0.5);
    let delta = Array2::from_elem((1, n_o), 0.1);
    // Per-sample step lr·dz·a = 0.3 LSB.
    let lr = 0.3 * lsb / 0.05;

    let mut sgd = AffineCore::new(Array2::zeros((n_o, n_i)), Array1::zeros(n_o), 1.0, quant, false);
    let ctx_sgd = BackwardCtx {
        lr,
        train_bias: false,
        train_bn: false,
        weights: WeightRoute::Sgd { per_pixel: false },
    };
    for _ in 0..1000 {
        sgd.forward(a.view(), true).unwrap();
        sgd.backward(delta.view(), &ctx_sgd).unwrap();
    }
    let sgd_moved = sgd.writes.cells_changed();
    let sgd_max = sgd.w.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let mut lrt = AffineCore::new(Array2::zeros((n_o, n_i)), Array1::zeros(n_o), 1.0, quant, false);
    lrt.batch = 100;
    lrt.lrt = Some(LowRankState::new(n_o, n_i, 4, Variant::Biased, f64::INFINITY, 0).unwrap());
    let ctx_lrt = BackwardCtx {
        weights: WeightRoute::Lrt,
        ..ctx_sgd
    };
    let params = ApplyParams {
        base_lr: lr,
        rho_min: 0.01,
    };
    let mut nonzero_applies = 0;
    for _ in 0..1000 {
        lrt.forward(a.view(), true).unwrap();
        lrt.backward(delta.view(), &ctx_lrt).unwrap();
        if let Some(e) = lrt.finish_sample(&params) {
            if e.applied && e.cells_moved > 0 {
                nonzero_applies += 1;
            }
        }
    }
    report(
        7,
        "sub-LSB updates accumulate only under LRT",
        sgd_moved == 0 && sgd_max == 0.0 && nonzero_applies >= 1,
        format!(
            "per-sample step 0.3 LSB; SGD cells changed {sgd_moved} over 1000 samples; \
             LRT nonzero applies {nonzero_applies}, max |w| {:.4}",
            lrt.w.iter().fold(0.0f64, |m, x| m.max(x.abs()))
        ),
    );
}

#[test]
fn criterion_08_memory_budget() {
    let net = Network::build(&NetSpec::default(), &NetOptions::default(), 0).unwrap();
    let policy = UpdatePolicy::default();
    let r = policy.rank;
    let trainer = Trainer::new(net, policy, DriftModel::default(), 0).unwrap();
    let report_mem = trainer.memory_report();
    let mut ok = true;
    let mut worst_fill = 0.0f64;
    for l in &report_mem.layers {
        let bound = (r + 1) * (l.n_i + l.n_o) * 2;
        ok &= l.rank == r && l.lrt_state <= bound;
        worst_fill = worst_fill.max(l.lrt_state as f64 / bound as f64);
    }
    let aux = report_mem.total_auxiliary();
    let nvm = report_mem.total_nvm();
    report(
        8,
        "auxiliary memory budget, default CNN r=4",
        ok && aux < nvm,
        format!(
            "{} layers, max LRT state / (r+1)(n_i+n_o)*2B = {worst_fill:.3}; total auxiliary {aux} B \
             (shared step workspace {} B) < weight memory {nvm} B",
            report_mem.layers.len(),
            report_mem.shared_workspace()
        ),
    );
}

#[test]
#[ignore = "soak: about 4 minutes of single-core training"]
fn criterion_09_adaptation_soak() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let quant = cfg.effective_quant();
    let online = scratch_source(&cfg, 0).unwrap();
    let base = UpdatePolicy {
        mode: TrainMode::Lrt,
        ..cfg.policy
    };
    let acc = |policy: UpdatePolicy| scratch_accuracy(&cfg, &online, policy, quant, cfg.bn_mode, 0).unwrap();
    let lrt_mn = acc(UpdatePolicy { maxnorm: true, ..base });
    let lrt_plain = acc(UpdatePolicy { maxnorm: false, ..base });
    let bias = acc(UpdatePolicy {
        mode: TrainMode::BiasOnly,
        ..base
    });
    let (ref_mn, ref_bias) = (0.830, 0.686);
    let within = (lrt_mn - ref_mn).abs() <= 0.05 && (bias - ref_bias).abs() <= 0.05;
    let secs = start.elapsed().as_secs_f64();
    report(
        9,
        "from-scratch adaptation ordering",
        lrt_mn > lrt_plain && lrt_plain > bias && lrt_mn - bias >= 0.10 && within,
        format!(
            "last-{} accuracy: lrt+max-norm {:.1}%, lrt {:.1}%, bias-only {:.1}% (reference 83.0 / 68.6 +-5); {secs:.0}s",
            cfg.ablation.tail,
            100.0 * lrt_mn,
            100.0 * lrt_plain,
            100.0 * bias
        ),
    );
}

#[test]
fn criterion_10_streaming_bn_and_maxnorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCA);
    let (batch, pixels, channels) = (8, 5, 3);
    let mut bn = StreamBn::new(channels, batch, BnMode::PlainAverage);
    let mut bn_err = 0.0f64;
    for _window in 0..3 {
        let samples: Vec<Array2<f64>> = (0..batch)
            .map(|_| random_matrix(&mut rng, pixels, channels) * 3.0 + 1.0)
            .collect();
        for s in &samples {
            bn.observe(s.view());
        }
        let (mu, var) = bn.batch_stats();
        // Two-pass statistics over every row of the window.
        let rows = batch * pixels;
        for c in 0..channels {
            let mean = samples.iter().map(|s| s.column(c).sum()).sum::<f64>() / rows as f64;
            let v = samples
                .iter()
                .map(|s| s.column(c).iter().map(|x| (x - mean).powi(2)).sum::<f64>())
                .sum::<f64>()
                / rows as f64;
            bn_err = bn_err.max((mu[c] - mean).abs()).max((var[c] - v).abs());
        }
    }

    let (beta, eps) = (0.999_f64, 1e-4_f64);
    let mut mn = MaxNorm::default();
    let out1 = mn.apply(ndarray::array![0.5, -2.0].view());
    let out2 = mn.apply(ndarray::array![0.1, 0.2].view());
    // Recurrence evaluated by hand.
    let x1 = 2.0 + eps;
    let mv1 = beta * eps + (1.0 - beta) * x1;
    let d1 = x1.max(mv1 / (1.0 - beta));
    let x2 = 0.2 + eps;
    let mv2 = beta * mv1 + (1.0 - beta) * x2;
    let d2 = x2.max(mv2 / (1.0 - beta * beta));
    let mut mn_err = (out1[0] - 0.5 / d1).abs().max((out1[1] + 2.0 / d1).abs());
    mn_err = mn_err.max((out2[0] - 0.1 / d2).abs()).max((out2[1] - 0.2 / d2).abs());
    // The first step's divisor is exactly 2.1.
    mn_err = mn_err.max((out1[0] - 0.5 / 2.1).abs()).max((out1[1] + 2.0 / 2.1).abs());
    report(
        10,
        "plain-average BN and max-norm recurrence",
        bn_err <= 1e-12 && mn_err <= 1e-9,
        format!("BN vs two-pass max err {bn_err:.2e} (tol 1e-12) over 3 windows; max-norm err {mn_err:.2e} (tol 1e-9)"),
    );
}
