//! Deep GP regression trained with doubly stochastic variational
//! inference.
//!
//! The model stacks L sparse GP layers; layer l carries inducing inputs
//! `Z^{l-1}` and a Gaussian variational posterior `q(u^l) = N(m^l, S^l)`
//! per hidden unit. The posterior marginal of a layer at given inputs is
//! available in closed form after the inducing points are integrated out,
//! and hidden activations are propagated by sampling each point's marginal
//! independently (the reparameterization keeps gradients flowing through
//! the samples). The evidence bound is the expected log-likelihood at the
//! final layer minus the KL terms of every layer, estimated on mini-batches
//! — stochastic in both the Monte Carlo samples and the data subsampling.
//!
//! A one-layer model has no sampled hidden layers, so its bound is
//! deterministic: that special case is the SVGP sparse model.

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{fit_pca, kmeans_centers, Dataset};
use crate::error::{Error, Result};
use crate::exact::LN_2PI;
use crate::kernels::{log_median_distance, KernelParams};
use crate::linalg;
use crate::opt::{
    AdamState, DifferentiableObjective, GroupKind, ParamLayout, TraceEntry, TrainConfig,
};
use crate::tape::{rbf_matrix, Tape, Var};
use crate::{GaussianPrediction, PredictSpace};

/// Floor applied to marginal variances before taking square roots.
const VAR_FLOOR: f64 = 1e-12;

/// Deterministic mean function of a layer, applied to its inputs.
#[derive(Debug, Clone)]
pub enum MeanFn {
    Zero,
    /// `inputs . W` with a fixed D_in x D_out projection.
    Linear(Array2<f64>),
}

impl MeanFn {
    pub fn apply(&self, inputs: &Array2<f64>, width: usize) -> Array2<f64> {
        match self {
            MeanFn::Zero => Array2::zeros((inputs.nrows(), width)),
            MeanFn::Linear(w) => inputs.dot(w),
        }
    }
}

/// One GP layer: kernel and inducing locations shared across the layer's
/// units, variational mean and covariance factor owned per unit.
///
/// The variational posterior `q(u) = N(m_u, S_u)` is stored whitened by
/// the prior factor `L` (`K_zz = L L^T`): the fields hold `V` and `T_u`
/// with `m_u = L v_u` and `S_u = (L T_u)(L T_u)^T`. The whitened KL is
/// independent of the kernel conditioning, which keeps fixed-size
/// optimizer steps stable however ill-conditioned `K_zz` becomes. Each
/// `T_u` is stored with its strict lower triangle raw and its diagonal in
/// log-space.
#[derive(Debug, Clone)]
pub struct DgpLayer {
    pub width: usize,
    pub kernel: KernelParams,
    /// m x D_in inducing inputs in the layer's input space.
    pub z: Array2<f64>,
    /// m x width whitened variational means, one column per unit.
    pub vmean: Array2<f64>,
    /// Raw per-unit whitened factors (strict lower + log-diagonal), m x m.
    pub sfactor_raw: Vec<Array2<f64>>,
    pub mean_fn: MeanFn,
}

impl DgpLayer {
    pub fn inducing_count(&self) -> usize {
        self.z.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    /// Decoded whitened factor `T_u` (lower triangular, positive
    /// diagonal).
    pub fn white_factor(&self, unit: usize) -> Array2<f64> {
        decode_sfactor(&self.sfactor_raw[unit])
    }

    /// Variational mean `m_u = L v_u` in natural (unwhitened) coordinates.
    pub fn variational_mean(&self) -> Result<Array2<f64>> {
        let kzz = self.kernel.matrix_sym(&self.z)?;
        let f = linalg::cholesky(&kzz, 1e-8 * self.kernel.variance())?;
        Ok(f.lower().dot(&self.vmean))
    }

    /// Cholesky factor of `S_u = (L T_u)(L T_u)^T` in natural coordinates.
    pub fn sfactor(&self, unit: usize) -> Result<Array2<f64>> {
        let kzz = self.kernel.matrix_sym(&self.z)?;
        let f = linalg::cholesky(&kzz, 1e-8 * self.kernel.variance())?;
        Ok(f.lower().dot(&self.white_factor(unit)))
    }
}

/// Decodes raw factor storage (strict lower + log-diagonal) into a
/// lower-triangular matrix with positive diagonal.
pub fn decode_sfactor(raw: &Array2<f64>) -> Array2<f64> {
    let m = raw.nrows();
    let mut l = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..i {
            l[[i, j]] = raw[[i, j]];
        }
        l[[i, i]] = raw[[i, i]].exp();
    }
    l
}

/// Encodes a lower-triangular factor into raw storage (log-diagonal).
pub fn encode_sfactor(l: &Array2<f64>) -> Array2<f64> {
    let m = l.nrows();
    let mut raw = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..i {
            raw[[i, j]] = l[[i, j]];
        }
        raw[[i, i]] = l[[i, i]].ln();
    }
    raw
}

/// Deep GP: ordered layers (the last has width one) plus the observation
/// noise.
#[derive(Debug, Clone)]
pub struct DgpModel {
    pub layers: Vec<DgpLayer>,
    pub log_noise: f64,
}

impl DgpModel {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    /// Checks that layer widths chain and the final width is one.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ArchitectureInvalid("no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.width == 0 {
                return Err(Error::ArchitectureInvalid(format!(
                    "layer {l} has zero width"
                )));
            }
            if layer.vmean.dim() != (layer.inducing_count(), layer.width) {
                return Err(Error::ArchitectureInvalid(format!(
                    "layer {l} variational mean shape {:?}",
                    layer.vmean.dim()
                )));
            }
            if layer.sfactor_raw.len() != layer.width {
                return Err(Error::ArchitectureInvalid(format!(
                    "layer {l} has {} S factors for width {}",
                    layer.sfactor_raw.len(),
                    layer.width
                )));
            }
            if l + 1 < self.layers.len() && self.layers[l + 1].input_dim() != layer.width {
                return Err(Error::ArchitectureInvalid(format!(
                    "layer {} expects {} inputs but layer {l} outputs {}",
                    l + 1,
                    self.layers[l + 1].input_dim(),
                    layer.width
                )));
            }
        }
        if self.layers.last().unwrap().width != 1 {
            return Err(Error::ArchitectureInvalid(
                "final layer must have width 1".into(),
            ));
        }
        Ok(())
    }
}

/// Requested architecture: hidden widths (possibly empty for the SVGP
/// one-layer case) and the number of inducing points per layer.
#[derive(Debug, Clone)]
pub struct DgpArchitecture {
    pub hidden_widths: Vec<usize>,
    pub inducing: usize,
}

impl DgpArchitecture {
    /// One-layer architecture: the SVGP sparse model.
    pub fn svgp(inducing: usize) -> Self {
        DgpArchitecture {
            hidden_widths: Vec::new(),
            inducing,
        }
    }

    /// `layers` total layers of hidden width `width`.
    pub fn uniform(layers: usize, width: usize, inducing: usize) -> Self {
        DgpArchitecture {
            hidden_widths: vec![width; layers.saturating_sub(1)],
            inducing,
        }
    }

    pub fn depth(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.inducing == 0 {
            return Err(Error::ArchitectureInvalid(
                "need at least one inducing point".into(),
            ));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::ArchitectureInvalid(
                "hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form posterior marginal of one layer at given inputs: per-point
/// mean and variance for each unit, inducing points integrated out.
#[derive(Debug, Clone)]
pub struct LayerMarginal {
    pub mean: Array2<f64>,
    pub variance: Array2<f64>,
}

/// Per unit u:
/// `mu = mean_fn(x) + K_xz K_zz^{-1} m_u` and
/// `var_i = k(x_i,x_i) - [K_xz K_zz^{-1} (K_zz - S_u) K_zz^{-1} K_zx]_ii`.
///
/// In whitened coordinates with `B = L^{-1} K_zx` these reduce to
/// `mu = mean_fn(x) + B^T V` and `var_i = k_ii - |B_i|^2 + |T_u^T B_i|^2`.
pub fn layer_marginal(layer: &DgpLayer, inputs: &Array2<f64>) -> Result<LayerMarginal> {
    if inputs.ncols() != layer.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "layer expects {} input columns, got {}",
            layer.input_dim(),
            inputs.ncols()
        )));
    }
    let b = inputs.nrows();
    let kzz = layer.kernel.matrix_sym(&layer.z)?;
    let f = linalg::cholesky(&kzz, 1e-8 * layer.kernel.variance())?;
    let k_zx = layer.kernel.matrix(&layer.z, inputs)?; // m x b
    let bmat = f.solve_lower(&k_zx); // m x b

    let mean = layer.mean_fn.apply(inputs, layer.width) + &bmat.t().dot(&layer.vmean);

    let gamma = layer.kernel.variance();
    let q: Array1<f64> = bmat.mapv(|v| v * v).sum_axis(Axis(0));
    let mut variance = Array2::zeros((b, layer.width));
    for u in 0..layer.width {
        let f_u = layer.white_factor(u).t().dot(&bmat); // m x b
        let s: Array1<f64> = f_u.mapv(|v| v * v).sum_axis(Axis(0));
        for i in 0..b {
            variance[[i, u]] = (gamma - q[i] + s[i]).max(0.0);
        }
    }
    Ok(LayerMarginal { mean, variance })
}

/// Per-row noise stream: row `r` of a batch draws from stream `offset + r`
/// of a seeded ChaCha generator, so a point's noise does not depend on
/// which batch it appears in.
fn row_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard-normal draws for every (row, sampled layer, unit, mc sample),
/// grouped as `eps[mc][layer] : b x width`.
fn draw_noise(
    model: &DgpModel,
    batch_rows: usize,
    mc_samples: usize,
    seed: u64,
    row_offset: u64,
) -> Vec<Vec<Array2<f64>>> {
    let sampled_layers = model.depth() - 1;
    let mut eps =
        vec![
            (0..sampled_layers)
                .map(|l| Array2::zeros((batch_rows, model.layers[l].width)))
                .collect::<Vec<_>>();
            mc_samples
        ];
    for r in 0..batch_rows {
        let mut rng = row_rng(seed, row_offset + r as u64);
        for e in eps.iter_mut() {
            for (l, mat) in e.iter_mut().enumerate() {
                for u in 0..model.layers[l].width {
                    mat[[r, u]] = StandardNormal.sample(&mut rng);
                }
            }
        }
    }
    eps
}

/// Recursively samples activations through layers `1..=upto_layer`:
/// each point's path uses only its own row, drawing
/// `f_hat = mu + eps * sqrt(var)` at every layer.
pub fn sample_through(
    model: &DgpModel,
    inputs: &Array2<f64>,
    seed: u64,
    upto_layer: usize,
) -> Result<Array2<f64>> {
    model.validate()?;
    if upto_layer == 0 || upto_layer > model.depth() {
        return Err(Error::ArchitectureInvalid(format!(
            "upto_layer = {upto_layer} out of range 1..={}",
            model.depth()
        )));
    }
    let b = inputs.nrows();
    let mut act = inputs.clone();
    let mut rngs: Vec<ChaCha8Rng> = (0..b).map(|r| row_rng(seed, r as u64)).collect();
    for layer in model.layers.iter().take(upto_layer) {
        let lm = layer_marginal(layer, &act)?;
        let mut next = lm.mean;
        for r in 0..b {
            for u in 0..layer.width {
                let e: f64 = StandardNormal.sample(&mut rngs[r]);
                next[[r, u]] += e * lm.variance[[r, u]].max(0.0).sqrt();
            }
        }
        act = next;
    }
    Ok(act)
}

/// Options for one evidence-bound evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboOpts {
    /// Total training-set size the batch likelihood is scaled to.
    pub n_total: usize,
    pub mc_samples: usize,
    pub seed: u64,
    /// Noise-stream offset of the batch's first row.
    pub row_offset: u64,
}

impl ElboOpts {
    pub fn new(n_total: usize, mc_samples: usize, seed: u64) -> Self {
        ElboOpts {
            n_total,
            mc_samples,
            seed,
            row_offset: 0,
        }
    }
}

/// Sum over layers and units of `KL(q(u) || p(u))` between the variational
/// posterior and the GP prior at the inducing locations. Whitening makes
/// this `KL(N(v_u, T_u T_u^T) || N(0, I))` per unit, independent of the
/// kernel:
/// `1/2 [ |v_u|^2 + |T_u|_F^2 - m - 2 sum(log diag T_u) ]`.
pub fn kl_divergence(model: &DgpModel) -> Result<f64> {
    let mut total = 0.0;
    for layer in &model.layers {
        let m = layer.inducing_count() as f64;
        let quad = layer.vmean.mapv(|v| v * v).sum();
        let mut trace = 0.0;
        let mut ld_t = 0.0;
        for u in 0..layer.width {
            let t_u = layer.white_factor(u);
            trace += t_u.mapv(|v| v * v).sum();
            ld_t += 2.0 * t_u.diag().iter().map(|d| d.ln()).sum::<f64>();
        }
        let w = layer.width as f64;
        total += 0.5 * (trace + quad - w * m - ld_t);
    }
    Ok(total)
}

/// Evidence lower bound of a batch (forward pass only).
pub fn elbo(model: &DgpModel, x: &Array2<f64>, y: &Array1<f64>, opts: &ElboOpts) -> Result<f64> {
    let graph = ElboGraph::build(model, x, y, opts)?;
    Ok(graph.value)
}

/// Leaf handles of one layer inside an ELBO tape.
struct LayerLeaves {
    log_variance: Var,
    log_lengthscales: Var,
    z: Var,
    vmean: Var,
    sfactor_raw: Vec<Var>,
}

struct ElboGraph {
    tape: Tape,
    /// The bound itself (maximized; the objective negates it).
    out: Var,
    value: f64,
    layers: Vec<LayerLeaves>,
    log_noise: Var,
}

impl ElboGraph {
    /// Records the doubly stochastic evidence bound:
    /// hidden layers are sampled with fixed noise via the
    /// reparameterization `mu + eps * sqrt(var)`, the final-layer Gaussian
    /// expectation is taken in closed form
    /// (`log N(y | mu, rho^2) - var / (2 rho^2)`), and the KL terms are
    /// added analytically.
    fn build(model: &DgpModel, x: &Array2<f64>, y: &Array1<f64>, opts: &ElboOpts) -> Result<Self> {
        model.validate()?;
        let b = x.nrows();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if y.len() != b {
            return Err(Error::LengthMismatch {
                left: b,
                right: y.len(),
            });
        }
        if x.ncols() != model.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} columns, model expects {}",
                x.ncols(),
                model.input_dim()
            )));
        }
        if opts.mc_samples == 0 {
            return Err(Error::ArchitectureInvalid("mc_samples must be >= 1".into()));
        }

        let eps = draw_noise(model, b, opts.mc_samples, opts.seed, opts.row_offset);
        let mut t = Tape::new();
        let x0 = t.constant(x.clone());
        let yv = t.constant(y.view().insert_axis(Axis(1)).to_owned());
        let log_noise = t.leaf_scalar(model.log_noise);

        // Static per-layer nodes: leaves, kernel Gram factor, decoded
        // whitened factors, and the KL contribution.
        struct LayerStatic {
            leaves: LayerLeaves,
            l_k: Var,
            vmean: Var,
            t_factors: Vec<Var>,
            gamma: Var,
            mean_w: Option<Var>,
        }
        let mut statics = Vec::with_capacity(model.depth());
        let mut kl_terms = Vec::new();
        for layer in &model.layers {
            let lv = t.leaf_scalar(layer.kernel.log_variance);
            let ll = t.leaf(
                Array2::from_shape_vec(
                    (1, layer.kernel.log_lengthscales.len()),
                    layer.kernel.log_lengthscales.clone(),
                )
                .expect("lengthscale row"),
            );
            let zv = t.leaf(layer.z.clone());
            let mv = t.leaf(layer.vmean.clone());
            let sraw: Vec<Var> = layer.sfactor_raw.iter().map(|r| t.leaf(r.clone())).collect();

            let base_jitter = 1e-8 * layer.kernel.variance();
            let kzz = rbf_matrix(&mut t, lv, ll, zv, zv);
            let l_k = t.chol(kzz, base_jitter)?;
            let gamma = t.exp(lv);

            // Decode the whitened factors T_u.
            let mut t_factors = Vec::with_capacity(layer.width);
            let mut ld_t_terms = Vec::with_capacity(layer.width);
            let mut trace_terms = Vec::with_capacity(layer.width);
            for raw in &sraw {
                let strict = t.tril_strict(*raw);
                let diag_exp = {
                    let d = t.diag(*raw);
                    let e = t.exp(d);
                    t.diag_mat(e)
                };
                let t_u = t.add(strict, diag_exp);
                let tr_u = {
                    let sq = t.square(t_u);
                    t.sum_all(sq)
                };
                let ld_u = {
                    let d = t.diag(t_u);
                    let ln = t.ln(d);
                    let s = t.sum_all(ln);
                    t.scale(s, 2.0)
                };
                t_factors.push(t_u);
                trace_terms.push(tr_u);
                ld_t_terms.push(ld_u);
            }

            // Whitened KL, per unit:
            // 1/2 [ |v_u|^2 + |T_u|_F^2 - m - 2 sum(log diag T_u) ].
            let quad = {
                let sq = t.square(mv);
                t.sum_all(sq)
            };
            let w = layer.width as f64;
            let m = layer.inducing_count() as f64;
            let mut acc = quad;
            for tr in &trace_terms {
                acc = t.add(acc, *tr);
            }
            let mut with_ldt = acc;
            for ld in &ld_t_terms {
                let n = t.neg(*ld);
                with_ldt = t.add(with_ldt, n);
            }
            let shifted = t.add_const(with_ldt, -w * m);
            kl_terms.push(t.scale(shifted, 0.5));

            let mean_w = match &layer.mean_fn {
                MeanFn::Zero => None,
                MeanFn::Linear(w) => Some(t.constant(w.clone())),
            };
            statics.push(LayerStatic {
                leaves: LayerLeaves {
                    log_variance: lv,
                    log_lengthscales: ll,
                    z: zv,
                    vmean: mv,
                    sfactor_raw: sraw,
                },
                l_k,
                vmean: mv,
                t_factors,
                gamma,
                mean_w,
            });
        }

        // Likelihood term, averaged over Monte Carlo paths.
        let mut lik_terms = Vec::with_capacity(opts.mc_samples);
        for eps_s in eps.iter() {
            let mut act = x0;
            let mut final_mean = x0;
            let mut final_var = x0;
            for (l, st) in statics.iter().enumerate() {
                let layer = &model.layers[l];
                let k_zx = rbf_matrix(
                    &mut t,
                    st.leaves.log_variance,
                    st.leaves.log_lengthscales,
                    st.leaves.z,
                    act,
                );
                let bmat = t.tri_solve_lower(st.l_k, k_zx); // m x b
                let mut mean = {
                    let bt = t.transpose(bmat);
                    t.matmul(bt, st.vmean) // b x width
                };
                if let Some(w) = st.mean_w {
                    let base = t.matmul(act, w);
                    mean = t.add(mean, base);
                }
                let q = {
                    let sq = t.square(bmat);
                    let cs = t.col_sums(sq);
                    t.transpose(cs) // b x 1
                };
                let mut var_cols = Vec::with_capacity(layer.width);
                for t_u in &st.t_factors {
                    let f_u = {
                        let tt = t.transpose(*t_u);
                        t.matmul(tt, bmat) // m x b
                    };
                    let s_u = {
                        let sq = t.square(f_u);
                        let cs = t.col_sums(sq);
                        t.transpose(cs) // b x 1
                    };
                    let v = {
                        let gq = t.sub(st.gamma, q);
                        let raw = t.add(gq, s_u);
                        t.clamp_min(raw, VAR_FLOOR)
                    };
                    var_cols.push(v);
                }
                let var = if var_cols.len() == 1 {
                    var_cols[0]
                } else {
                    t.concat_cols(&var_cols)
                };

                if l + 1 < model.depth() {
                    let noise = t.constant(eps_s[l].clone());
                    let sd = t.sqrt(var);
                    let jump = t.mul(noise, sd);
                    act = t.add(mean, jump);
                } else {
                    final_mean = mean;
                    final_var = var;
                }
            }

            // Closed-form Gaussian expectation at the final layer:
            // log N(y | mu, rho^2) - var / (2 rho^2), summed over the batch.
            let rho2 = t.exp(log_noise);
            let resid = t.sub(yv, final_mean);
            let resid_sq = t.square(resid);
            let total_sq = t.add(resid_sq, final_var);
            let quad = t.div(total_sq, rho2);
            let lik = {
                let q_sum = t.sum_all(quad);
                let halfq = t.scale(q_sum, -0.5);
                let ln_term = {
                    let s = t.add_const(log_noise, LN_2PI);
                    t.scale(s, -0.5 * b as f64)
                };
                t.add(halfq, ln_term)
            };
            lik_terms.push(lik);
        }
        let mut lik_sum = lik_terms[0];
        for term in lik_terms.iter().skip(1) {
            lik_sum = t.add(lik_sum, *term);
        }
        let lik_scaled = t.scale(
            lik_sum,
            opts.n_total as f64 / (b as f64 * opts.mc_samples as f64),
        );

        let mut kl_total = kl_terms[0];
        for term in kl_terms.iter().skip(1) {
            kl_total = t.add(kl_total, *term);
        }
        let out = {
            let n = t.neg(kl_total);
            t.add(lik_scaled, n)
        };

        let value = t.scalar_value(out);
        Ok(ElboGraph {
            tape: t,
            out,
            value,
            layers: statics.into_iter().map(|s| s.leaves).collect(),
            log_noise,
        })
    }
}

/// Gaussian-mixture prediction: one final-layer Gaussian per sampled path
/// through the hidden layers, plus moment-matched summaries.
#[derive(Debug, Clone)]
pub struct DgpPrediction {
    /// n* x S component means (latent space).
    pub component_means: Array2<f64>,
    /// n* x S component variances (latent space).
    pub component_variances: Array2<f64>,
    noise_variance: f64,
}

impl DgpPrediction {
    pub fn samples(&self) -> usize {
        self.component_means.ncols()
    }

    /// Moment-matched mean and variance per test point:
    /// the mixture mean, and
    /// `avg(var_s + mean_s^2) - mean^2` (+ noise in observation space).
    pub fn collapsed(&self, space: PredictSpace) -> Vec<GaussianPrediction> {
        let s = self.samples() as f64;
        let noise = match space {
            PredictSpace::Latent => 0.0,
            PredictSpace::Observation => self.noise_variance,
        };
        (0..self.component_means.nrows())
            .map(|i| {
                let mean = self.component_means.row(i).sum() / s;
                let second = self
                    .component_means
                    .row(i)
                    .iter()
                    .zip(self.component_variances.row(i).iter())
                    .map(|(m, v)| v + m * m)
                    .sum::<f64>()
                    / s;
                GaussianPrediction {
                    mean,
                    variance: (second - mean * mean).max(0.0) + noise,
                }
            })
            .collect()
    }
}

/// Draws `s_samples` paths through the hidden layers and conditions the
/// final layer on each, yielding a Gaussian mixture per test point.
pub fn dgp_predict(
    model: &DgpModel,
    xs: &Array2<f64>,
    s_samples: usize,
    seed: u64,
) -> Result<DgpPrediction> {
    model.validate()?;
    if s_samples == 0 {
        return Err(Error::ArchitectureInvalid("s_samples must be >= 1".into()));
    }
    if xs.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "test inputs have {} columns, model expects {}",
            xs.ncols(),
            model.input_dim()
        )));
    }
    let n = xs.nrows();
    let depth = model.depth();
    let mut means = Array2::zeros((n, s_samples));
    let mut vars = Array2::zeros((n, s_samples));
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|r| row_rng(seed, r as u64)).collect();
    for s in 0..s_samples {
        let mut act = xs.clone();
        for layer in model.layers.iter().take(depth - 1) {
            let lm = layer_marginal(layer, &act)?;
            let mut next = lm.mean;
            for (r, rng) in rngs.iter_mut().enumerate() {
                for u in 0..layer.width {
                    let e: f64 = StandardNormal.sample(rng);
                    next[[r, u]] += e * lm.variance[[r, u]].max(0.0).sqrt();
                }
            }
            act = next;
        }
        let lm = layer_marginal(model.layers.last().unwrap(), &act)?;
        means.column_mut(s).assign(&lm.mean.column(0));
        vars.column_mut(s).assign(&lm.variance.column(0));
    }
    Ok(DgpPrediction {
        component_means: means,
        component_variances: vars,
        noise_variance: model.noise_variance(),
    })
}

// ---------------------------------------------------------------------------
// Flat parameterization and training.

/// The (negated) evidence bound as a differentiable objective over every
/// model parameter, with fixed noise draws per evaluation.
pub struct DgpObjective<'a> {
    pub template: &'a DgpModel,
    pub x: &'a Array2<f64>,
    pub y: &'a Array1<f64>,
    pub opts: ElboOpts,
}

impl DgpObjective<'_> {
    pub fn encode(model: &DgpModel) -> Vec<f64> {
        let mut p = Vec::new();
        for layer in &model.layers {
            p.push(layer.kernel.log_variance);
            p.extend(&layer.kernel.log_lengthscales);
            p.extend(layer.z.iter());
            p.extend(layer.vmean.iter());
            for raw in &layer.sfactor_raw {
                p.extend(raw.iter());
            }
        }
        p.push(model.log_noise);
        p
    }

    /// Rebuilds a model with the template's architecture and the given
    /// flat parameters.
    pub fn decode(&self, params: &[f64]) -> DgpModel {
        let mut model = self.template.clone();
        let mut off = 0;
        let mut take = |len: usize| {
            let s = &params[off..off + len];
            off += len;
            s.to_vec()
        };
        for layer in &mut model.layers {
            layer.kernel.log_variance = take(1)[0];
            let nl = layer.kernel.log_lengthscales.len();
            layer.kernel.log_lengthscales = take(nl);
            let zdim = layer.z.dim();
            layer.z = Array2::from_shape_vec(zdim, take(zdim.0 * zdim.1)).unwrap();
            let mdim = layer.vmean.dim();
            layer.vmean = Array2::from_shape_vec(mdim, take(mdim.0 * mdim.1)).unwrap();
            let m = layer.inducing_count();
            for raw in &mut layer.sfactor_raw {
                *raw = Array2::from_shape_vec((m, m), take(m * m)).unwrap();
            }
        }
        model.log_noise = take(1)[0];
        debug_assert_eq!(off, params.len());
        model
    }
}

impl DifferentiableObjective for DgpObjective<'_> {
    fn dim(&self) -> usize {
        Self::encode(self.template).len()
    }

    fn layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::new();
        for (l, layer) in self.template.layers.iter().enumerate() {
            let p = l + 1;
            layout.push_scalar(format!("layer{p}.log_variance"));
            layout.push(
                format!("layer{p}.log_lengthscales"),
                1,
                layer.kernel.log_lengthscales.len(),
                GroupKind::Plain,
            );
            layout.push(
                format!("layer{p}.z"),
                layer.z.nrows(),
                layer.z.ncols(),
                GroupKind::Plain,
            );
            layout.push(
                format!("layer{p}.vmean"),
                layer.vmean.nrows(),
                layer.vmean.ncols(),
                GroupKind::Plain,
            );
            for u in 0..layer.width {
                layout.push(
                    format!("layer{p}.sfactor{u}"),
                    layer.inducing_count(),
                    layer.inducing_count(),
                    GroupKind::LowerTriLogDiag,
                );
            }
        }
        layout.push_scalar("log_noise");
        layout
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let model = self.decode(params);
        let graph = ElboGraph::build(&model, self.x, self.y, &self.opts)?;
        let grads = graph.tape.backward(graph.out);
        // Objective is the negative bound.
        let mut g = Vec::with_capacity(params.len());
        for (leaves, layer) in graph.layers.iter().zip(&model.layers) {
            g.push(-grads.get(leaves.log_variance, (1, 1))[[0, 0]]);
            let nl = layer.kernel.log_lengthscales.len();
            g.extend(grads.get(leaves.log_lengthscales, (1, nl)).iter().map(|v| -v));
            g.extend(grads.get(leaves.z, layer.z.dim()).iter().map(|v| -v));
            g.extend(grads.get(leaves.vmean, layer.vmean.dim()).iter().map(|v| -v));
            let m = layer.inducing_count();
            for raw in &leaves.sfactor_raw {
                g.extend(grads.get(*raw, (m, m)).iter().map(|v| -v));
            }
        }
        g.push(-grads.get(graph.log_noise, (1, 1))[[0, 0]]);
        Ok((-graph.value, g))
    }
}

/// Builds an initial model for `dgp_fit`: inducing inputs from k-means++
/// centers propagated through the layer mean functions, kernel lengthscales
/// from the median-distance heuristic on each layer's input representation,
/// zero variational means, and near-deterministic variational covariances
/// `S = 1e-5 K_zz` (whitened factor `sqrt(1e-5) I`).
pub fn initialize_model(
    data: &Dataset,
    arch: &DgpArchitecture,
    seed: u64,
) -> Result<DgpModel> {
    arch.validate()?;
    let depth = arch.depth();
    let m = arch.inducing.min(data.n());
    let mut widths = arch.hidden_widths.clone();
    widths.push(1);

    let mut layers = Vec::with_capacity(depth);
    let mut rep = data.x.clone(); // representation of the training inputs
    let mut z = kmeans_centers(&data.x, m, seed);
    for (l, &width) in widths.iter().enumerate() {
        let d_in = rep.ncols();
        let is_last = l + 1 == depth;
        let mean_fn = if is_last {
            MeanFn::Zero
        } else if d_in == width {
            MeanFn::Linear(Array2::eye(d_in))
        } else if d_in > width {
            // Project onto the leading principal directions of the current
            // representation.
            let rep_data = Dataset::from_xy(rep.clone(), Array1::zeros(rep.nrows()))?;
            let pca = fit_pca(&rep_data, width)?;
            MeanFn::Linear(pca.basis())
        } else {
            let mut w = Array2::zeros((d_in, width));
            for i in 0..d_in {
                w[[i, i]] = 1.0;
            }
            MeanFn::Linear(w)
        };

        let log_ls = log_median_distance(&rep);
        let kernel = KernelParams::isotropic(0.0, log_ls);
        // T = sqrt(1e-5) I whitens to S = 1e-5 K_zz: a near-deterministic
        // start.
        let t0 = Array2::from_diag(&Array1::from_elem(z.nrows(), 1e-5f64.sqrt()));
        let raw = encode_sfactor(&t0);
        let layer = DgpLayer {
            width,
            kernel,
            z: z.clone(),
            vmean: Array2::zeros((z.nrows(), width)),
            sfactor_raw: vec![raw; width],
            mean_fn,
        };

        // Propagate representations and inducing inputs through the mean
        // path for the next layer.
        if !is_last {
            rep = layer.mean_fn.apply(&rep, width);
            z = layer.mean_fn.apply(&z, width);
        }
        layers.push(layer);
    }

    let n = data.n() as f64;
    let mean = data.y.sum() / n;
    let var = data.y.mapv(|v| (v - mean) * (v - mean)).sum() / n;
    // A small initial likelihood variance makes the data term dominate
    // early; starting with most variance assigned to noise tends to prune
    // the layers before they learn anything.
    Ok(DgpModel {
        layers,
        log_noise: (0.01 * var).max(1e-6).ln(),
    })
}

fn mix_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains a deep GP by stochastic ascent on the evidence bound over
/// shuffled mini-batches. Returns the model and the per-step bound trace.
pub fn dgp_fit(
    data: &Dataset,
    arch: &DgpArchitecture,
    config: &TrainConfig,
) -> Result<(DgpModel, Vec<TraceEntry>)> {
    config.validate()?;
    let model0 = initialize_model(data, arch, config.seed)?;
    model0.validate()?;
    let n = data.n();
    let batch = config.batch_size.min(n);
    let start = std::time::Instant::now();

    let mut params = DgpObjective::encode(&model0);
    let mut adam = AdamState::new(params.len(), config);
    let mut trace = Vec::with_capacity(config.max_steps);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, u64::MAX));
    let mut cursor = n; // force an initial shuffle

    for step in 0..config.max_steps {
        if cursor + batch > n {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let xb = data.x.select(Axis(0), idx);
        let yb = data.y.select(Axis(0), idx);

        let objective = DgpObjective {
            template: &model0,
            x: &xb,
            y: &yb,
            opts: ElboOpts {
                n_total: n,
                mc_samples: config.mc_samples,
                seed: mix_seed(config.seed, step as u64),
                row_offset: 0,
            },
        };
        let (neg_elbo, grads) = objective.value_and_grad(&params)?;
        // A non-finite gradient skips the step but keeps training.
        let _ = adam.step(&mut params, &grads);
        trace.push(TraceEntry {
            step,
            objective: -neg_elbo,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let objective = DgpObjective {
        template: &model0,
        x: &data.x,
        y: &data.y,
        opts: ElboOpts::new(n, config.mc_samples, config.seed),
    };
    let model = objective.decode(&params);
    model.validate()?;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;

    fn simple_layer(m: usize, width: usize, seed: u64) -> DgpLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_fn((m, 1), |_| rng.random_range(-2.0..2.0));
        let kernel = KernelParams::isotropic(0.0, 0.0);
        // A modest whitened factor with some strict-lower structure.
        let mut t0 = Array2::from_diag(&Array1::from_elem(m, 0.3));
        for i in 1..m {
            for j in 0..i {
                t0[[i, j]] = 0.05 * rng.random_range(-1.0..1.0);
            }
        }
        let raw = encode_sfactor(&t0);
        DgpLayer {
            width,
            kernel,
            z: z.clone(),
            vmean: Array2::from_shape_fn((m, width), |_| rng.random_range(-0.5..0.5)),
            sfactor_raw: vec![raw; width],
            mean_fn: MeanFn::Zero,
        }
    }

    fn one_layer_model(m: usize, seed: u64) -> DgpModel {
        DgpModel {
            layers: vec![simple_layer(m, 1, seed)],
            log_noise: (0.1f64).ln(),
        }
    }

    #[test]
    fn marginal_prior_matching_posterior() {
        // m = 0 mean, S = K_zz (whitened T = I): the marginal is the prior.
        let mut layer = simple_layer(5, 1, 1);
        layer.vmean.fill(0.0);
        layer.sfactor_raw = vec![encode_sfactor(&Array2::eye(5))];
        let xs = array![[0.3], [-1.0], [5.0]];
        let lm = layer_marginal(&layer, &xs).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(lm.mean[[i, 0]], 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(lm.variance[[i, 0]], 1.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn marginal_deterministic_at_inducing_point() {
        // S -> 0 and the input at an inducing location: the marginal
        // reproduces that unit's variational mean with no variance.
        let mut layer = simple_layer(4, 1, 2);
        let m = layer.inducing_count();
        let tiny = Array2::from_diag(&Array1::from_elem(m, 1e-8));
        layer.sfactor_raw = vec![encode_sfactor(&tiny)];
        let natural_mean = layer.variational_mean().unwrap();
        let xs = layer.z.slice(s![1..2, ..]).to_owned();
        let lm = layer_marginal(&layer, &xs).unwrap();
        assert_abs_diff_eq!(lm.mean[[0, 0]], natural_mean[[1, 0]], epsilon = 1e-5);
        assert!(lm.variance[[0, 0]] < 1e-5);
    }

    #[test]
    fn marginal_matches_dense_conditioning_oracle() {
        // Explicitly form the joint Gaussian over (u, f) under q(u) and
        // condition: mean = K_xz K_zz^{-1} m,
        // cov = K_xx - K_xz K_zz^{-1} (K_zz - S) K_zz^{-1} K_zx.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = simple_layer(8, 2, 4);
        let xs = Array2::from_shape_fn((40, 1), |_| rng.random_range(-2.0..2.0));
        let lm = layer_marginal(&layer, &xs).unwrap();

        let kzz = layer.kernel.matrix_sym(&layer.z).unwrap();
        let f = linalg::cholesky(&kzz, 0.0).unwrap();
        let k_zx = layer.kernel.matrix(&layer.z, &xs).unwrap();
        let kinv_kzx = linalg::tri_solve(&f, &k_zx).unwrap(); // K_zz^{-1} K_zx
        let natural_mean = layer.variational_mean().unwrap();
        for u in 0..2 {
            let m_u = natural_mean.column(u).to_owned();
            let mean_oracle = kinv_kzx.t().dot(&m_u);
            let s_u = {
                let l = layer.sfactor(u).unwrap();
                l.dot(&l.t())
            };
            let inner = kzz.as_array() - &s_u;
            let cov_reduction = kinv_kzx.t().dot(&inner.dot(&kinv_kzx));
            for i in 0..xs.nrows() {
                assert_abs_diff_eq!(lm.mean[[i, u]], mean_oracle[i], epsilon = 1e-8);
                let var_oracle = layer.kernel.variance() - cov_reduction[[i, i]];
                assert_abs_diff_eq!(lm.variance[[i, u]], var_oracle, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn sample_through_zero_variance_is_deterministic() {
        let mut layer = simple_layer(6, 1, 5);
        let m = layer.inducing_count();
        let tiny = Array2::from_diag(&Array1::from_elem(m, 1e-10));
        layer.sfactor_raw = vec![encode_sfactor(&tiny)];
        // Noiseless data fit would give zero marginal variance only at the
        // inducing inputs, so sample there.
        let model = DgpModel {
            layers: vec![layer],
            log_noise: (0.1f64).ln(),
        };
        let xs = model.layers[0].z.clone();
        let a = sample_through(&model, &xs, 1, 1).unwrap();
        let b = sample_through(&model, &xs, 99, 1).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-4);
        }
    }

    #[test]
    fn sample_through_is_seed_reproducible() {
        let model = DgpModel {
            layers: vec![simple_layer(6, 3, 6), simple_layer(6, 1, 7)],
            log_noise: (0.1f64).ln(),
        };
        // Two-layer model needs chaining widths; rebuild layer 2 on 3 cols.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z2 = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let mut model = model;
        model.layers[1].z = z2;
        model.validate().unwrap();

        let xs = Array2::from_shape_fn((5, 1), |_| rng.random_range(-1.0..1.0));
        let a = sample_through(&model, &xs, 42, 2).unwrap();
        let b = sample_through(&model, &xs, 42, 2).unwrap();
        assert_eq!(a, b);
        let c = sample_through(&model, &xs, 43, 2).unwrap();
        assert!(a.iter().zip(c.iter()).any(|(p, q)| p != q));
    }

    #[test]
    fn sample_through_moments_match_marginal() {
        let model = one_layer_model(6, 9);
        let x0 = array![[0.4]];
        let lm = layer_marginal(&model.layers[0], &x0).unwrap();
        let reps = 10_000;
        let tiled = Array2::from_shape_fn((reps, 1), |_| 0.4);
        let samples = sample_through(&model, &tiled, 7, 1).unwrap();
        let mean = samples.column(0).sum() / reps as f64;
        let var = samples
            .column(0)
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / reps as f64;
        // 3 standard errors of the Monte Carlo estimators.
        let se_mean = (lm.variance[[0, 0]] / reps as f64).sqrt();
        let se_var = lm.variance[[0, 0]] * (2.0 / reps as f64).sqrt();
        assert!(
            (mean - lm.mean[[0, 0]]).abs() < 3.0 * se_mean,
            "mean {mean} vs {}",
            lm.mean[[0, 0]]
        );
        assert!(
            (var - lm.variance[[0, 0]]).abs() < 3.0 * se_var,
            "var {var} vs {}",
            lm.variance[[0, 0]]
        );
    }

    #[test]
    fn kl_zero_for_prior_posterior() {
        let mut layer = simple_layer(5, 1, 10);
        layer.vmean.fill(0.0);
        layer.sfactor_raw = vec![encode_sfactor(&Array2::eye(5))];
        let model = DgpModel {
            layers: vec![layer],
            log_noise: 0.0,
        };
        let kl = kl_divergence(&model).unwrap();
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn kl_shared_covariance_closed_form() {
        // KL(N(m, K) || N(0, K)) = 1/2 m^T K^{-1} m.
        let mut layer = simple_layer(5, 1, 11);
        layer.sfactor_raw = vec![encode_sfactor(&Array2::eye(5))];
        let kzz = layer.kernel.matrix_sym(&layer.z).unwrap();
        let f = linalg::cholesky(&kzz, 0.0).unwrap();
        let m_u = layer.variational_mean().unwrap().column(0).to_owned();
        let model = DgpModel {
            layers: vec![layer],
            log_noise: 0.0,
        };
        let kl = kl_divergence(&model).unwrap();
        let sol = linalg::tri_solve_vec(&f, &m_u).unwrap();
        assert_abs_diff_eq!(kl, 0.5 * m_u.dot(&sol), epsilon = 1e-8);
    }

    #[test]
    fn elbo_batch_factorizes_over_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = one_layer_model(5, 13);
        let x = Array2::from_shape_fn((6, 1), |_| rng.random_range(-1.5..1.5));
        let y = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
        let kl = kl_divergence(&model).unwrap();

        let full = elbo(&model, &x, &y, &ElboOpts::new(6, 1, 77)).unwrap();
        let mut sum_single = 0.0;
        for i in 0..6 {
            let xi = x.slice(s![i..i + 1, ..]).to_owned();
            let yi = y.slice(s![i..i + 1]).to_owned();
            let opts = ElboOpts {
                n_total: 1,
                mc_samples: 1,
                seed: 77,
                row_offset: i as u64,
            };
            sum_single += elbo(&model, &xi, &yi, &opts).unwrap();
        }
        // Batch bound = sum of single-point bounds + (n_b - 1) * KL.
        assert_abs_diff_eq!(full, sum_single + 5.0 * kl, epsilon = 1e-9 * full.abs().max(1.0));
    }

    #[test]
    fn elbo_rejects_empty_batch() {
        let model = one_layer_model(4, 14);
        let x = Array2::<f64>::zeros((0, 1));
        let y = Array1::<f64>::zeros(0);
        assert!(matches!(
            elbo(&model, &x, &y, &ElboOpts::new(1, 1, 0)),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn elbo_gradients_match_finite_differences_two_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut l1 = simple_layer(4, 2, 16);
        l1.mean_fn = MeanFn::Linear(array![[1.0, 0.5]]);
        let mut l2 = simple_layer(4, 1, 17);
        l2.z = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let model = DgpModel {
            layers: vec![l1, l2],
            log_noise: (0.2f64).ln(),
        };
        model.validate().unwrap();
        let x = Array2::from_shape_fn((8, 1), |_| rng.random_range(-1.5..1.5));
        let y = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let obj = DgpObjective {
            template: &model,
            x: &x,
            y: &y,
            opts: ElboOpts::new(20, 2, 123),
        };
        let point = DgpObjective::encode(&model);
        let report = crate::opt::check_gradients(&obj, &point, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-3,
            "max rel error {} ({} coords)",
            report.max_rel_error,
            report.failures(1e-3).len()
        );
    }

    #[test]
    fn predict_single_sample_is_one_component() {
        let model = one_layer_model(5, 18);
        let xs = array![[0.2], [1.4]];
        let pred = dgp_predict(&model, &xs, 1, 0).unwrap();
        assert_eq!(pred.samples(), 1);
        let collapsed = pred.collapsed(PredictSpace::Latent);
        for (i, c) in collapsed.iter().enumerate() {
            assert_abs_diff_eq!(c.mean, pred.component_means[[i, 0]], epsilon = 1e-14);
            // The collapse subtracts mean^2 from the second moment, so a
            // little cancellation noise is expected.
            assert_abs_diff_eq!(
                c.variance,
                pred.component_variances[[i, 0]],
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn predict_one_layer_matches_marginal_for_any_seed() {
        let model = one_layer_model(6, 19);
        let xs = array![[0.0], [0.7], [-1.1]];
        let pred = dgp_predict(&model, &xs, 5, 3).unwrap();
        let lm = layer_marginal(&model.layers[0], &xs).unwrap();
        for i in 0..3 {
            for s in 0..5 {
                assert_abs_diff_eq!(pred.component_means[[i, s]], lm.mean[[i, 0]], epsilon = 0.0);
                assert_abs_diff_eq!(
                    pred.component_variances[[i, s]],
                    lm.variance[[i, 0]],
                    epsilon = 0.0
                );
            }
            let c = pred.collapsed(PredictSpace::Latent);
            assert_abs_diff_eq!(c[i].mean, lm.mean[[i, 0]], epsilon = 1e-12);
            assert_abs_diff_eq!(c[i].variance, lm.variance[[i, 0]], epsilon = 1e-12);
        }
    }

    #[test]
    fn collapsed_moments_match_mixture_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut l1 = simple_layer(5, 2, 21);
        l1.mean_fn = MeanFn::Linear(array![[1.0, -0.3]]);
        let mut l2 = simple_layer(5, 1, 22);
        l2.z = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let model = DgpModel {
            layers: vec![l1, l2],
            log_noise: (0.05f64).ln(),
        };
        let xs = array![[0.5]];
        let pred = dgp_predict(&model, &xs, 50, 7).unwrap();
        let collapsed = pred.collapsed(PredictSpace::Latent)[0];

        // Sample the mixture directly.
        let draws = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..draws {
            let s = rng.random_range(0..pred.samples());
            let m = pred.component_means[[0, s]];
            let v = pred.component_variances[[0, s]];
            let e: f64 = StandardNormal.sample(&mut rng);
            let val = m + e * v.sqrt();
            sum += val;
            sumsq += val * val;
        }
        let emp_mean = sum / draws as f64;
        let emp_var = sumsq / draws as f64 - emp_mean * emp_mean;
        let se_mean = (collapsed.variance / draws as f64).sqrt();
        let se_var = collapsed.variance * (2.0 / draws as f64).sqrt();
        assert!((emp_mean - collapsed.mean).abs() < 3.0 * se_mean);
        assert!((emp_var - collapsed.variance).abs() < 3.0 * se_var);
    }

    #[test]
    fn fit_one_layer_reduces_noise_on_clean_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Array2::<f64>::from_shape_fn((120, 1), |_| rng.random_range(-2.0..2.0));
        let y = Array1::from_shape_fn(120, |i| (2.0 * x[[i, 0]]).sin());
        let d = Dataset::from_xy(x, y).unwrap();
        let arch = DgpArchitecture::svgp(15);
        let cfg = TrainConfig {
            learning_rate: 0.02,
            max_steps: 400,
            batch_size: 60,
            ..TrainConfig::default()
        };
        let (model, trace) = dgp_fit(&d, &arch, &cfg).unwrap();
        assert_eq!(trace.len(), 400);
        let early: f64 = trace[..20].iter().map(|t| t.objective).sum::<f64>() / 20.0;
        let late: f64 =
            trace[380..].iter().map(|t| t.objective).sum::<f64>() / 20.0;
        assert!(late > early, "bound should improve: {early} -> {late}");
        let preds = dgp_predict(&model, &d.x, 1, 0).unwrap();
        let collapsed = preds.collapsed(PredictSpace::Latent);
        let rmse = (collapsed
            .iter()
            .zip(d.y.iter())
            .map(|(p, t)| (p.mean - t) * (p.mean - t))
            .sum::<f64>()
            / d.n() as f64)
            .sqrt();
        assert!(rmse < 0.2, "rmse {rmse}");
    }

    #[test]
    fn architecture_validation() {
        assert!(DgpArchitecture::svgp(0).validate().is_err());
        assert!(DgpArchitecture {
            hidden_widths: vec![0],
            inducing: 4
        }
        .validate()
        .is_err());
        assert!(DgpArchitecture::uniform(3, 5, 10).validate().is_ok());
    }
}
