//! Cross-module oracle tests: sparse models against dense constructions
//! and exact-GP references, generators against the models that should
//! recover them.

use deepgp::data::Dataset;
use deepgp::dgp::{
    dgp_fit, dgp_predict, elbo, DgpArchitecture, DgpModel, DgpObjective, ElboOpts,
};
use deepgp::exact::ExactGp;
use deepgp::fitc::FitcModel;
use deepgp::kernels::KernelParams;
use deepgp::opt::{minimize, DifferentiableObjective, TrainConfig};
use deepgp::synth::{self, BenchmarkKind, BenchmarkSpec};
use deepgp::PredictSpace;
use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn toy_data(n: usize, d: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::<f64>::from_shape_fn((n, d), |_| rng.random_range(0.0..3.0));
    let y = Array1::from_shape_fn(n, |i| {
        x.row(i).sum().sin() + 0.3 * rng.random_range(-1.0..1.0)
    });
    (x, y)
}

#[test]
fn fitc_fit_close_to_exact_gp_on_smooth_data() {
    // 1-D sine + noise: a sparse model with a handful of inducing points
    // should track the exact GP closely.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 2000;
    let x = Array2::<f64>::from_shape_fn((n, 1), |_| rng.random_range(0.0..6.0));
    let y = Array1::from_shape_fn(n, |i| x[[i, 0]].sin() + 0.1 * rng.random_range(-1.0..1.0));
    let data = Dataset::from_xy(x, y).unwrap();

    let mut test_rng = ChaCha8Rng::seed_from_u64(2);
    let xs = Array2::<f64>::from_shape_fn((400, 1), |_| test_rng.random_range(0.0..6.0));
    let truth = xs.column(0).mapv(f64::sin);

    let cfg = TrainConfig {
        learning_rate: 0.05,
        max_steps: 60,
        ..TrainConfig::default()
    };
    let (fitc, _) = FitcModel::fit(&data, 30, &cfg).unwrap();
    let fitc_preds = fitc.predict(&xs, PredictSpace::Latent).unwrap();
    let fitc_rmse = deepgp::eval::rmse(
        &fitc_preds.iter().map(|p| p.mean).collect::<Vec<_>>(),
        &truth.to_vec(),
    )
    .unwrap();

    // Exact GP on a 500-point subsample as the reference.
    let sub = data.select(&(0..500).collect::<Vec<_>>());
    let (exact, _) = ExactGp::fit(&sub, &cfg).unwrap();
    let exact_preds = exact.predict(&xs, PredictSpace::Latent).unwrap();
    let exact_rmse = deepgp::eval::rmse(
        &exact_preds.iter().map(|p| p.mean).collect::<Vec<_>>(),
        &truth.to_vec(),
    )
    .unwrap();

    assert!(
        fitc_rmse <= 1.2 * exact_rmse.max(0.01),
        "fitc rmse {fitc_rmse} vs exact {exact_rmse}"
    );
}

#[test]
fn fitc_frozen_at_inputs_predicts_like_exact() {
    // m = n with Z fixed at X: predictions collapse to the exact GP.
    let (x, y) = toy_data(40, 2, 3);
    let kernel = KernelParams::isotropic(0.0, -0.2);
    let log_noise = (0.1f64).ln();
    let fitc = FitcModel::new(kernel.clone(), log_noise, x.clone(), x.clone(), y.clone()).unwrap();
    let exact = ExactGp::new(kernel, log_noise, x.clone(), y).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = Array2::<f64>::from_shape_fn((10, 2), |_| rng.random_range(0.0..3.0));
    let pf = fitc.predict(&xs, PredictSpace::Observation).unwrap();
    let pe = exact.predict(&xs, PredictSpace::Observation).unwrap();
    for (a, b) in pf.iter().zip(pe.iter()) {
        assert!((a.mean - b.mean).abs() < 1e-6 * b.mean.abs().max(1.0));
        assert!((a.variance - b.variance).abs() < 1e-6 * b.variance);
    }
}

#[test]
fn svgp_bound_stays_below_exact_log_marginal() {
    // L=1, m=n, Z=X, hyperparameters shared with a converged exact GP:
    // the optimized bound approaches log p(y) from below.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 15;
    let x = Array2::<f64>::from_shape_fn((n, 1), |_| rng.random_range(-1.5..1.5));
    let y = Array1::from_shape_fn(n, |i| x[[i, 0]].sin() + 0.2 * rng.random_range(-1.0..1.0));
    let data = Dataset::from_xy(x.clone(), y.clone()).unwrap();

    let cfg = TrainConfig {
        learning_rate: 0.05,
        max_steps: 200,
        ..TrainConfig::default()
    };
    let (exact, _) = ExactGp::fit(&data, &cfg).unwrap();
    let log_py = exact.log_marginal_likelihood();

    let (gap, bound) = svgp_gap_to_exact(&exact, &x, &y);
    assert!(
        bound <= log_py + 1e-6,
        "bound {bound} exceeds log marginal {log_py}"
    );
    assert!(gap < 0.1, "gap {gap} nats");
}

/// Optimizes only the variational parameters of a one-layer model whose
/// kernel, noise, and inducing set are frozen to the exact GP's, and
/// returns (log p(y) - bound, bound).
fn svgp_gap_to_exact(exact: &ExactGp, x: &Array2<f64>, y: &Array1<f64>) -> (f64, f64) {
    use deepgp::dgp::{DgpLayer, MeanFn};
    let n = x.nrows();
    let t0 = Array2::from_diag(&Array1::from_elem(n, 1.0));
    let template = DgpModel {
        layers: vec![DgpLayer {
            width: 1,
            kernel: exact.kernel().clone(),
            z: x.clone(),
            vmean: Array2::zeros((n, 1)),
            sfactor_raw: vec![deepgp::dgp::encode_sfactor(&t0)],
            mean_fn: MeanFn::Zero,
        }],
        log_noise: exact.log_noise(),
    };
    let opts = ElboOpts::new(n, 1, 0);

    // Free parameters: vmean and the whitened factor only. Wrap the full
    // objective and pin everything else to the template values.
    struct VariationalOnly<'a> {
        inner: DgpObjective<'a>,
        base: Vec<f64>,
        vmean_off: usize,
        vmean_len: usize,
        sfac_off: usize,
        sfac_len: usize,
    }
    impl DifferentiableObjective for VariationalOnly<'_> {
        fn dim(&self) -> usize {
            self.vmean_len + self.sfac_len
        }
        fn layout(&self) -> deepgp::opt::ParamLayout {
            let mut l = deepgp::opt::ParamLayout::new();
            l.push(
                "vmean",
                self.vmean_len,
                1,
                deepgp::opt::GroupKind::Plain,
            );
            l.push(
                "sfactor",
                self.sfac_len,
                1,
                deepgp::opt::GroupKind::LowerTriLogDiag,
            );
            l
        }
        fn value_and_grad(&self, p: &[f64]) -> deepgp::Result<(f64, Vec<f64>)> {
            let mut full = self.base.clone();
            full[self.vmean_off..self.vmean_off + self.vmean_len]
                .copy_from_slice(&p[..self.vmean_len]);
            full[self.sfac_off..self.sfac_off + self.sfac_len]
                .copy_from_slice(&p[self.vmean_len..]);
            let (v, g) = self.inner.value_and_grad(&full)?;
            let mut out = Vec::with_capacity(self.dim());
            out.extend(&g[self.vmean_off..self.vmean_off + self.vmean_len]);
            out.extend(&g[self.sfac_off..self.sfac_off + self.sfac_len]);
            Ok((v, out))
        }
    }

    let inner = DgpObjective {
        template: &template,
        x,
        y,
        opts,
    };
    let base = DgpObjective::encode(&template);
    let layout = inner.layout();
    let vmean_off = layout.offset_of("layer1.vmean").unwrap();
    let sfac_off = layout.offset_of("layer1.sfactor0").unwrap();
    let obj = VariationalOnly {
        inner,
        base: base.clone(),
        vmean_off,
        vmean_len: n,
        sfac_off,
        sfac_len: n * n,
    };
    let mut p0 = Vec::with_capacity(obj.dim());
    p0.extend(&base[vmean_off..vmean_off + n]);
    p0.extend(&base[sfac_off..sfac_off + n * n]);

    let cfg = TrainConfig {
        learning_rate: 0.05,
        max_steps: 2000,
        tolerance: 1e-7,
        ..TrainConfig::default()
    };
    let res = minimize(&obj, &p0, &cfg).unwrap();
    let bound = -res.value;
    (exact.log_marginal_likelihood() - bound, bound)
}

#[test]
fn svgp_elbo_value_matches_plain_path() {
    // The tape forward pass and the non-tape marginal/KL path agree.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x, y) = toy_data(20, 1, 8);
    let data = Dataset::from_xy(x.clone(), y.clone()).unwrap();
    let model = deepgp::dgp::initialize_model(&data, &DgpArchitecture::svgp(8), 0).unwrap();

    let opts = ElboOpts::new(20, 1, 9);
    let bound = elbo(&model, &x, &y, &opts).unwrap();

    // One-layer bound is deterministic and decomposes as the closed-form
    // Gaussian expectation minus the KL.
    let lm = deepgp::dgp::layer_marginal(&model.layers[0], &x).unwrap();
    let rho2 = model.noise_variance();
    let mut lik = 0.0;
    for i in 0..x.nrows() {
        let mu = lm.mean[[i, 0]];
        let v = lm.variance[[i, 0]];
        lik += -0.5 * (2.0 * std::f64::consts::PI * rho2).ln()
            - (y[i] - mu) * (y[i] - mu) / (2.0 * rho2)
            - v / (2.0 * rho2);
    }
    let kl = deepgp::dgp::kl_divergence(&model).unwrap();
    let expected = lik - kl;
    assert!(
        (bound - expected).abs() < 1e-9 * expected.abs().max(1.0),
        "tape {bound} vs plain {expected}"
    );
    let _ = rng.random_range(0..2);
}

#[test]
fn dgp_three_layers_beats_shallow_on_step_composite_small() {
    // Desk-scale check that depth pays off on hierarchical step data;
    // the full-size version (with the exact-GP baseline and the frozen
    // margin) lives in the acceptance suite.
    let spec = BenchmarkSpec {
        kind: BenchmarkKind::StepComposite,
        dimensions: 2,
        noise: 0.05,
        n_train: 2000,
        n_test: 500,
        seed: 11,
    };
    let g = synth::generate(&spec).unwrap();

    let cfg = TrainConfig {
        learning_rate: 0.02,
        max_steps: 6000,
        batch_size: 250,
        ..TrainConfig::default()
    };
    let truth: Vec<f64> = g.test.y.to_vec();

    let shallow = synth::fit_and_predict(
        &synth::ModelConfig::new(
            "svgp",
            synth::ModelFamily::Dgp {
                layers: 1,
                hidden_width: 1,
                inducing: 30,
            },
            cfg.clone(),
        ),
        &g.train,
        &g.test,
        0,
    )
    .unwrap();
    let deep = synth::fit_and_predict(
        &synth::ModelConfig::new(
            "dgp3",
            synth::ModelFamily::Dgp {
                layers: 3,
                hidden_width: 5,
                inducing: 30,
            },
            cfg,
        ),
        &g.train,
        &g.test,
        0,
    )
    .unwrap();

    let rmse = |preds: &[deepgp::GaussianPrediction]| {
        deepgp::eval::rmse(&preds.iter().map(|p| p.mean).collect::<Vec<_>>(), &truth).unwrap()
    };
    let shallow_rmse = rmse(&shallow);
    let deep_rmse = rmse(&deep);
    assert!(
        deep_rmse < shallow_rmse,
        "expected deep ({deep_rmse}) below shallow ({shallow_rmse})"
    );
}

#[test]
fn gp_draw_true_hyperparameters_reach_bayes_bound() {
    let spec = BenchmarkSpec {
        kind: BenchmarkKind::GpDraw,
        dimensions: 1,
        noise: 0.1,
        n_train: 2000,
        n_test: 2000,
        seed: 13,
    };
    let g = synth::gen_gp_draw(&spec).unwrap();
    let (lv, lls) = match g.truth {
        synth::TruthInfo::GpDraw {
            log_variance,
            log_lengthscale,
            ..
        } => (log_variance, log_lengthscale),
        _ => unreachable!(),
    };
    let model = ExactGp::new(
        KernelParams::isotropic(lv, lls),
        (spec.noise * spec.noise).ln(),
        g.train.x.clone(),
        g.train.y.clone(),
    )
    .unwrap();
    let preds = model.predict(&g.test.x, PredictSpace::Latent).unwrap();
    let rmse = deepgp::eval::rmse(
        &preds.iter().map(|p| p.mean).collect::<Vec<_>>(),
        &g.test.y.to_vec(),
    )
    .unwrap();
    assert!(
        rmse <= 1.05 * spec.noise,
        "rmse {rmse} vs bayes bound {}",
        spec.noise
    );
}

#[test]
fn gp_draw_hyperparameters_recoverable() {
    let spec = BenchmarkSpec {
        kind: BenchmarkKind::GpDraw,
        dimensions: 1,
        noise: 0.1,
        n_train: 500,
        n_test: 10,
        seed: 29,
    };
    let g = synth::gen_gp_draw(&spec).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        max_steps: 400,
        ..TrainConfig::default()
    };
    let (model, _) = ExactGp::fit(&g.train, &cfg).unwrap();
    let (true_lv, true_lls) = (synth::GP_DRAW_LOG_VARIANCE, synth::GP_DRAW_LOG_LENGTHSCALE);
    let true_ln_noise = (spec.noise * spec.noise).ln();
    assert!(
        (model.kernel().log_variance - true_lv).abs() < 0.3,
        "log variance {} vs {}",
        model.kernel().log_variance,
        true_lv
    );
    assert!(
        (model.kernel().log_lengthscales[0] - true_lls).abs() < 0.3,
        "log lengthscale {} vs {}",
        model.kernel().log_lengthscales[0],
        true_lls
    );
    assert!(
        (model.log_noise() - true_ln_noise).abs() < 0.3,
        "log noise {} vs {}",
        model.log_noise(),
        true_ln_noise
    );
}

#[test]
fn calibrated_exact_gp_scaled_residuals_are_standard_normal() {
    let spec = BenchmarkSpec {
        kind: BenchmarkKind::GpDraw,
        dimensions: 1,
        noise: 0.1,
        n_train: 1000,
        n_test: 2000,
        seed: 19,
    };
    let g = synth::gen_gp_draw(&spec).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        max_steps: 400,
        ..TrainConfig::default()
    };
    let (model, _) = ExactGp::fit(&g.train, &cfg).unwrap();
    let preds = model.predict(&g.test.x, PredictSpace::Observation).unwrap();
    let z = deepgp::eval::scaled_residuals(&preds, &g.test.y.to_vec()).unwrap();
    assert!(z.mean().abs() < 0.07, "zeta mean {}", z.mean());
    assert!(
        z.sd() > 0.93 && z.sd() < 1.07,
        "zeta sd {}",
        z.sd()
    );
}

#[test]
fn dgp_fit_on_sine_tracks_exact_gp() {
    // One-layer sparse training against an exact GP on a subsample.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 5000;
    let x = Array2::<f64>::from_shape_fn((n, 1), |_| rng.random_range(0.0..6.0));
    let y = Array1::from_shape_fn(n, |i| x[[i, 0]].sin() + 0.1 * rng.random_range(-1.0..1.0));
    let data = Dataset::from_xy(x, y).unwrap();
    let mut test_rng = ChaCha8Rng::seed_from_u64(22);
    let xs = Array2::<f64>::from_shape_fn((500, 1), |_| test_rng.random_range(0.0..6.0));
    let truth = xs.column(0).mapv(f64::sin).to_vec();

    let cfg = TrainConfig {
        learning_rate: 0.02,
        max_steps: 1200,
        batch_size: 256,
        ..TrainConfig::default()
    };
    let (svgp, _) = dgp_fit(&data, &DgpArchitecture::svgp(50), &cfg).unwrap();
    let preds = dgp_predict(&svgp, &xs, 1, 0).unwrap();
    let svgp_rmse = deepgp::eval::rmse(
        &preds
            .collapsed(PredictSpace::Latent)
            .iter()
            .map(|p| p.mean)
            .collect::<Vec<_>>(),
        &truth,
    )
    .unwrap();

    let sub = data.select(&(0..1000).collect::<Vec<_>>());
    let exact_cfg = TrainConfig {
        learning_rate: 0.05,
        max_steps: 60,
        ..TrainConfig::default()
    };
    let (exact, _) = ExactGp::fit(&sub, &exact_cfg).unwrap();
    let epreds = exact.predict(&xs, PredictSpace::Latent).unwrap();
    let exact_rmse = deepgp::eval::rmse(
        &epreds.iter().map(|p| p.mean).collect::<Vec<_>>(),
        &truth,
    )
    .unwrap();

    assert!(
        svgp_rmse <= 1.3 * exact_rmse.max(0.01),
        "svgp rmse {svgp_rmse} vs exact {exact_rmse}"
    );
}
