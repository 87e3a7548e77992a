//! Reference computations used to certify the fast paths.
//!
//! Everything here is re-derived with plain loops over flat arrays: the
//! forward pass, the parameter gradient and all grid summations share no
//! code with `net`, `linearize` or `learner`. Grid quantities are exact for
//! the grid-normalized reference measure, not for the continuous density.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::learner::{grad_params, mle_step, ParamGrad, TrainConfig};
use crate::linearize::{grad_score, perturb_within_piece, top_down};
use crate::net::{forward, softmax_posterior, Network, TopMode};
use crate::sampler::{descend, ChainState};
use crate::tensor::{gaussian_noise, SeededRng, Shape, Tensor3};

/// Largest grid the oracles will enumerate.
pub const MAX_GRID_STATES: usize = 1_000_000;

const CHUNK: usize = 4096;

/// Outcome of one certified check, printed as one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl CheckReport {
    fn new(name: &str, deviation: f64, tolerance: f64) -> Self {
        CheckReport {
            name: name.to_string(),
            max_abs_deviation: deviation,
            tolerance,
            pass: deviation <= tolerance,
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Finite image space: every pixel takes one of `levels`. State `n` assigns
/// pixel `p` (flat layout) the level of base-`levels.len()` digit `p` of `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteImageSpace {
    shape: Shape,
    levels: Vec<f64>,
    count: usize,
}

impl DiscreteImageSpace {
    pub fn new(shape: Shape, levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("levels", "need at least one finite level"));
        }
        let mut count: usize = 1;
        for _ in 0..shape.len() {
            count = count.saturating_mul(levels.len());
            if count > MAX_GRID_STATES {
                return Err(Error::TooLarge {
                    what: "discrete image space",
                    size: count,
                    limit: MAX_GRID_STATES,
                });
            }
        }
        Ok(DiscreteImageSpace { shape, levels, count })
    }

    /// 1-channel 2×2 grid with levels {−1, −0.5, 0, 0.5, 1}.
    pub fn default_grid() -> Self {
        Self::new(Shape::new(1, 2, 2), vec![-1.0, -0.5, 0.0, 0.5, 1.0]).expect("625 states")
    }

    /// `n` evenly spaced levels on `[-half_width, half_width]`.
    pub fn uniform(shape: Shape, n: usize, half_width: f64) -> Result<Self> {
        if n < 2 || !(half_width > 0.0) {
            return Err(Error::param("levels", "need n ≥ 2 and a positive half width"));
        }
        let step = 2.0 * half_width / (n - 1) as f64;
        Self::new(shape, (0..n).map(|i| -half_width + step * i as f64).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn pixels(&self, mut n: usize, out: &mut [f64]) {
        let b = self.levels.len();
        for v in out.iter_mut() {
            *v = self.levels[n % b];
            n /= b;
        }
    }

    pub fn image(&self, n: usize) -> Tensor3 {
        let mut data = vec![0.0; self.shape.len()];
        self.pixels(n, &mut data);
        Tensor3::from_vec(self.shape, data).expect("grid levels are finite")
    }

    fn check_net(&self, net: &Network) -> Result<()> {
        if net.input_shape() != self.shape {
            return Err(Error::dim("grid shape", net.input_shape(), self.shape));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reference network evaluation.

struct RefLayer {
    in_shape: Shape,
    out_shape: Shape,
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn ref_forward(net: &Network, pixels: &[f64]) -> Vec<RefLayer> {
    let mut out = Vec::with_capacity(net.depth());
    let mut input: Vec<f64> = pixels.to_vec();
    let mut in_shape = net.input_shape();
    for layer in net.layers() {
        let ls = layer.shape();
        let (kh, kw, s) = (ls.kernel_height, ls.kernel_width, ls.stride);
        let oh = (in_shape.height - kh) / s + 1;
        let ow = (in_shape.width - kw) / s + 1;
        let out_shape = Shape::new(ls.filters, oh, ow);
        let mut pre = vec![0.0; out_shape.len()];
        for k in 0..ls.filters {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut r = layer.biases()[k];
                    for i in 0..in_shape.channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let px = (i * in_shape.height + oy * s + ky) * in_shape.width + ox * s + kx;
                                r += layer.weight(k, i, ky, kx) * input[px];
                            }
                        }
                    }
                    pre[(k * oh + oy) * ow + ox] = r;
                }
            }
        }
        let act: Vec<f64> = pre.iter().map(|&r| if r > 0.0 { r } else { 0.0 }).collect();
        input = act.clone();
        out.push(RefLayer {
            in_shape,
            out_shape,
            pre,
            act,
        });
        in_shape = out_shape;
    }
    out
}

/// Score of `category` (ignored for conv-sum networks) by the reference pass.
fn ref_score(net: &Network, pixels: &[f64], category: Option<usize>) -> Result<f64> {
    let layers = ref_forward(net, pixels);
    let top = &layers.last().expect("networks have at least one layer").act;
    match (net.top_mode(), category) {
        (TopMode::ConvSum, _) => Ok(top.iter().sum()),
        (TopMode::CategoryHeads(h), Some(c)) => {
            let shape = layers.last().unwrap().out_shape;
            if shape.height != 1 || shape.width != 1 {
                return Err(Error::dim("category heads", "1x1 top maps", shape));
            }
            let w = h
                .weights
                .get(c)
                .ok_or_else(|| Error::param("category", format!("{c} out of range")))?;
            Ok(w.iter().zip(top).map(|(a, b)| a * b).sum())
        }
        (TopMode::CategoryHeads(_), None) => Err(Error::param("category", "required for category heads")),
    }
}

/// `∂f/∂w` of a conv-sum network by the reference pass, in
/// [`Network::params_flat`] order.
fn ref_grad_params(net: &Network, pixels: &[f64]) -> Vec<f64> {
    let layers = ref_forward(net, pixels);
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); net.depth()];
    let mut g_out = vec![1.0; layers.last().unwrap().out_shape.len()];
    for l in (0..net.depth()).rev() {
        let spec = &net.layers()[l];
        let rl = &layers[l];
        let input: &[f64] = if l == 0 { pixels } else { &layers[l - 1].act };
        let ls = spec.shape();
        let (kh, kw, s) = (ls.kernel_height, ls.kernel_width, ls.stride);
        let (ins, outs) = (rl.in_shape, rl.out_shape);
        let mut dw = vec![0.0; spec.weights().len()];
        let mut db = vec![0.0; ls.filters];
        let mut g_in = vec![0.0; ins.len()];
        for k in 0..ls.filters {
            for oy in 0..outs.height {
                for ox in 0..outs.width {
                    let o = (k * outs.height + oy) * outs.width + ox;
                    if rl.pre[o] <= 0.0 {
                        continue;
                    }
                    let g = g_out[o];
                    db[k] += g;
                    for i in 0..ins.channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let px = (i * ins.height + oy * s + ky) * ins.width + ox * s + kx;
                                dw[spec.weight_index(k, i, ky, kx)] += g * input[px];
                                g_in[px] += g * spec.weight(k, i, ky, kx);
                            }
                        }
                    }
                }
            }
        }
        dw.extend(db);
        per_layer[l] = dw;
        g_out = g_in;
    }
    per_layer.concat()
}

fn ref_energy(net: &Network, image: &Tensor3) -> f64 {
    let sq: f64 = image.data().iter().map(|v| v * v).sum();
    let f: f64 = ref_forward(net, image.data()).last().unwrap().act.iter().sum();
    sq / (2.0 * net.sigma_sq()) - f
}

// ---------------------------------------------------------------------------
// Grid summation.

/// Chunked parallel map-reduce over grid states with a fixed reduction order.
fn grid_fold<T, F, R>(space: &DiscreteImageSpace, zero: T, per_state: F, reduce: R) -> T
where
    T: Clone + Send + Sync,
    F: Fn(&mut T, &[f64]) + Sync,
    R: Fn(&mut T, &T),
{
    let chunks = space.count().div_ceil(CHUNK);
    let partials: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = zero.clone();
            let mut px = vec![0.0; space.shape().len()];
            for n in c * CHUNK..((c + 1) * CHUNK).min(space.count()) {
                space.pixels(n, &mut px);
                per_state(&mut acc, &px);
            }
            acc
        })
        .collect();
    let mut total = zero;
    for p in &partials {
        reduce(&mut total, p);
    }
    total
}

fn grid_log_weights(
    net: &Network,
    space: &DiscreteImageSpace,
    category: Option<usize>,
) -> Result<Vec<f64>> {
    space.check_net(net)?;
    let s2 = net.sigma_sq();
    (0..space.count())
        .into_par_iter()
        .map(|n| {
            let mut px = vec![0.0; space.shape().len()];
            space.pixels(n, &mut px);
            let sq: f64 = px.iter().map(|v| v * v).sum();
            Ok(ref_score(net, &px, category)? - sq / (2.0 * s2))
        })
        .collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log Σ_J exp(−||J||²/2σ²)`, the normalizer of the grid reference `q̃`.
fn log_reference_normalizer(space: &DiscreteImageSpace, sigma_sq: f64) -> f64 {
    let lw: Vec<f64> = (0..space.count())
        .map(|n| {
            let mut px = vec![0.0; space.shape().len()];
            space.pixels(n, &mut px);
            -px.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma_sq)
        })
        .collect();
    log_sum_exp(&lw)
}

/// `log Z = log Σ_I exp(f(I)) q̃(I)` over the grid.
pub fn log_partition_brute(net: &Network, category: Option<usize>, space: &DiscreteImageSpace) -> Result<f64> {
    let lw = grid_log_weights(net, space, category)?;
    Ok(log_sum_exp(&lw) - log_reference_normalizer(space, net.sigma_sq()))
}

pub fn partition_brute(net: &Network, category: Option<usize>, space: &DiscreteImageSpace) -> Result<f64> {
    Ok(log_partition_brute(net, category, space)?.exp())
}

/// `E_p[∂f/∂w]` under the grid-normalized model `p ∝ exp(f) q̃`.
pub fn model_expected_grad(net: &Network, space: &DiscreteImageSpace) -> Result<Vec<f64>> {
    Ok(model_grad_moments(net, space)?.0)
}

/// First and second moments of each entry of `∂f/∂w` under the grid model.
fn model_grad_moments(net: &Network, space: &DiscreteImageSpace) -> Result<(Vec<f64>, Vec<f64>)> {
    require_conv_sum(net)?;
    let lw = grid_log_weights(net, space, None)?;
    let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let np = net.num_params();
    // Accumulator: [Σ weight, Σ weight · grad..., Σ weight · grad²...].
    let acc = grid_fold(
        space,
        vec![0.0; 2 * np + 1],
        |acc, px| {
            let sq: f64 = px.iter().map(|v| v * v).sum();
            let layers = ref_forward(net, px);
            let f: f64 = layers.last().unwrap().act.iter().sum();
            let w = (f - sq / (2.0 * net.sigma_sq()) - m).exp();
            acc[0] += w;
            for (j, g) in ref_grad_params(net, px).into_iter().enumerate() {
                acc[1 + j] += w * g;
                acc[1 + np + j] += w * g * g;
            }
        },
        |t, p| t.iter_mut().zip(p).for_each(|(a, b)| *a += b),
    );
    let first = acc[1..=np].iter().map(|v| v / acc[0]).collect();
    let second = acc[np + 1..].iter().map(|v| v / acc[0]).collect();
    Ok((first, second))
}

fn require_conv_sum(net: &Network) -> Result<()> {
    match net.top_mode() {
        TopMode::ConvSum => Ok(()),
        TopMode::CategoryHeads(_) => Err(Error::TopMode { expected: "ConvSum" }),
    }
}

/// Gradient of `(1/M) Σ_m f(I_m) − log Z` computed exactly on the grid.
pub fn loglik_grad_exact(net: &Network, images: &[Tensor3], space: &DiscreteImageSpace) -> Result<ParamGrad> {
    require_conv_sum(net)?;
    if images.is_empty() {
        return Err(Error::param("images", "need at least one image"));
    }
    let mut obs = vec![0.0; net.num_params()];
    for im in images {
        if im.shape() != net.input_shape() {
            return Err(Error::dim("loglik_grad_exact image", net.input_shape(), im.shape()));
        }
        for (a, g) in obs.iter_mut().zip(ref_grad_params(net, im.data())) {
            *a += g / images.len() as f64;
        }
    }
    let exp = model_expected_grad(net, space)?;
    let diff: Vec<f64> = obs.iter().zip(&exp).map(|(a, b)| a - b).collect();
    ParamGrad::from_flat(net, &diff)
}

/// `(1/M) Σ_m f(I_m) − log Z`, the grid log-likelihood up to a `w`-free term.
pub fn log_likelihood_brute(net: &Network, images: &[Tensor3], space: &DiscreteImageSpace) -> Result<f64> {
    let mut mean_f = 0.0;
    for im in images {
        mean_f += ref_score(net, im.data(), None)? / images.len() as f64;
    }
    Ok(mean_f - log_partition_brute(net, None, space)?)
}

/// Certifies [`loglik_grad_exact`] against central differences of
/// [`log_likelihood_brute`] (relative to `max(|g|, 1)`).
pub fn check_loglik_fd(
    net: &Network,
    images: &[Tensor3],
    space: &DiscreteImageSpace,
    h: f64,
    tolerance: f64,
) -> Result<CheckReport> {
    let g = loglik_grad_exact(net, images, space)?.flat();
    let p0 = net.params_flat();
    let mut worst: f64 = 0.0;
    for j in 0..p0.len() {
        let at = |d: f64| -> Result<f64> {
            let mut n = net.clone();
            let mut p = p0.clone();
            p[j] += d;
            n.set_params_flat(&p)?;
            log_likelihood_brute(&n, images, space)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
    }
    Ok(CheckReport::new("loglik_grad_finite_difference", worst, tolerance)
        .with_detail(format!("{} parameters, {} grid states", p0.len(), space.count())))
}

/// Runs one [`mle_step`] from zero-initialized chains and compares
/// `H_obs − H_syn` with the exact grid gradient, in units of the standard
/// error of a mean of independent draws: `sqrt(Var_p[∂f/∂w] / chains)`,
/// with the variance taken exactly on the grid. Parameters with zero model
/// variance must match to 1e-12.
pub fn check_mle_vs_exact(
    net: &Network,
    observed: &[Tensor3],
    space: &DiscreteImageSpace,
    config: &TrainConfig,
) -> Result<CheckReport> {
    let exact = loglik_grad_exact(net, observed, space)?.flat();
    let (mean, second) = model_grad_moments(net, space)?;
    let mut chains: Vec<ChainState> = (0..config.num_chains)
        .map(|i| ChainState::new(Tensor3::zeros(net.input_shape()), SeededRng::substream(config.seed, i as u64)))
        .collect();
    let mut work = net.clone();
    let stats = mle_step(&mut work, observed, &mut chains, config)?;
    let mut mc = stats.h_obs.clone();
    mc.add_scaled(-1.0, &stats.h_syn);
    let mc = mc.flat();

    let n = config.num_chains as f64;
    let mut worst: f64 = 0.0;
    for j in 0..exact.len() {
        let se = ((second[j] - mean[j] * mean[j]).max(0.0) / n).sqrt();
        let dev = (mc[j] - exact[j]).abs();
        let z = if se > 0.0 {
            dev / se
        } else if dev <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    Ok(CheckReport::new("mle_gradient_vs_exact", worst, 3.0).with_detail(format!(
        "{} chains x {} Langevin steps, eps {}, {} grid states; deviation in standard errors",
        config.num_chains,
        config.langevin_steps,
        config.epsilon,
        space.count()
    )))
}

// ---------------------------------------------------------------------------
// Generative / discriminative equivalence.

/// Shared trunk with category heads plus category priors.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryModel {
    net: Network,
    priors: Vec<f64>,
}

impl CategoryModel {
    pub fn new(net: Network, priors: Vec<f64>) -> Result<Self> {
        let TopMode::CategoryHeads(h) = net.top_mode() else {
            return Err(Error::TopMode {
                expected: "CategoryHeads",
            });
        };
        if priors.len() != h.num_categories() {
            return Err(Error::dim("category priors", h.num_categories(), priors.len()));
        }
        if priors.iter().any(|p| !(*p > 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::param("priors", "must be positive and sum to 1"));
        }
        Ok(CategoryModel { net, priors })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn num_categories(&self) -> usize {
        self.priors.len()
    }

    fn head_biases(&self) -> &[f64] {
        match self.net.top_mode() {
            TopMode::CategoryHeads(h) => &h.biases,
            TopMode::ConvSum => unreachable!("checked in new"),
        }
    }
}

/// Both directions of the generative/discriminative equivalence on the grid.
///
/// (a) Class-conditionals `p(I|c) = exp(f_c) q̃ / Z_c` with priors `ρ_c` give
/// the Bayes posterior `softmax(f_c + b_c)` with `b_c = log ρ_c − log Z_c`.
///
/// (b) The discriminative model with the trunk's own head biases and a base
/// category 0 satisfying `f_0 ≡ 0, b_0 = 0`, whose class-conditional is the
/// reference `q̃`, implies `ρ_c ∝ e^{b_c} Z_c` and
/// `p(I|c) = exp(f_c) q̃ / Z_c`; i.e. `b_c = log ρ_c − log ρ_0 − log Z_c`.
pub fn check_prop1(model: &CategoryModel, space: &DiscreteImageSpace) -> Result<Vec<CheckReport>> {
    let net = &model.net;
    space.check_net(net)?;
    let c_count = model.num_categories();
    let log_q_norm = log_reference_normalizer(space, net.sigma_sq());
    // log exp(f_c) q̃ per category and state.
    let mut lw = Vec::with_capacity(c_count);
    let mut log_z = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let w: Vec<f64> = grid_log_weights(net, space, Some(c))?
            .into_iter()
            .map(|v| v - log_q_norm)
            .collect();
        log_z.push(log_sum_exp(&w));
        lw.push(w);
    }
    let scores = |n: usize| -> Result<Vec<f64>> {
        let mut px = vec![0.0; space.shape().len()];
        space.pixels(n, &mut px);
        (0..c_count).map(|c| ref_score(net, &px, Some(c))).collect()
    };

    // (a)
    let b_a: Vec<f64> = (0..c_count).map(|c| model.priors[c].ln() - log_z[c]).collect();
    let mut dev_a: f64 = 0.0;
    for n in 0..space.count() {
        let joint: Vec<f64> = (0..c_count)
            .map(|c| model.priors[c].ln() + lw[c][n] - log_z[c])
            .collect();
        let norm = log_sum_exp(&joint);
        let post = softmax_posterior(&scores(n)?, &b_a)?;
        for c in 0..c_count {
            dev_a = dev_a.max(((joint[c] - norm).exp() - post[c]).abs());
        }
    }
    let a = CheckReport::new("prop1_generative_to_discriminative", dev_a, 1e-10)
        .with_detail(format!("{c_count} categories, {} grid states", space.count()));

    // (b)
    let b = model.head_biases();
    let base_is_reference = b[0] == 0.0
        && (0..space.count()).try_fold(true, |ok, n| Ok::<_, Error>(ok && scores(n)?[0] == 0.0))?;
    let b_report = if !base_is_reference {
        CheckReport::new("prop1_discriminative_to_generative", f64::INFINITY, 1e-10)
            .with_detail("base category must have f_0 = 0 and b_0 = 0")
    } else {
        // ρ_c = ρ_0 e^{b_c} Z_c, normalized.
        let log_rho_un: Vec<f64> = (0..c_count).map(|c| b[c] + log_z[c]).collect();
        let log_rho0 = -log_sum_exp(&log_rho_un);
        let mut dev_b: f64 = 0.0;
        let mut mass = 0.0;
        for n in 0..space.count() {
            let post = softmax_posterior(&scores(n)?, b)?;
            let q = lw_ref(space, n, net.sigma_sq(), log_q_norm).exp();
            let marginal = log_rho0.exp() * q / post[0];
            mass += marginal;
            for c in 0..c_count {
                let rho_c = (log_rho0 + log_rho_un[c]).exp();
                let bayes = post[c] * marginal / rho_c;
                let generative = (lw[c][n] - log_z[c]).exp();
                dev_b = dev_b.max((bayes - generative).abs());
            }
        }
        dev_b = dev_b.max((mass - 1.0).abs());
        CheckReport::new("prop1_discriminative_to_generative", dev_b, 1e-10)
            .with_detail("b_c = log rho_c - log rho_0 - log Z_c; includes total mass of the implied marginal")
    };
    Ok(vec![a, b_report])
}

fn lw_ref(space: &DiscreteImageSpace, n: usize, sigma_sq: f64, log_q_norm: f64) -> f64 {
    let mut px = vec![0.0; space.shape().len()];
    space.pixels(n, &mut px);
    -px.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma_sq) - log_q_norm
}

// ---------------------------------------------------------------------------
// Piecewise-Gaussian structure, local modes, contrastive divergence.

/// `f(I) = α + ⟨I, B⟩` on the piece of each image (relative to
/// `1 + |f|`, tolerance 1e-8), and `B` from the top-down pass equals the
/// backpropagated input gradient (absolute, 1e-10).
pub fn check_linearization(net: &Network, images: &[Tensor3]) -> Result<Vec<CheckReport>> {
    require_conv_sum(net)?;
    let mut identity: f64 = 0.0;
    let mut two_ways: f64 = 0.0;
    for im in images {
        let f = ref_score(net, im.data(), None)?;
        let (_, pattern) = forward(net, im)?;
        let piece = top_down(net, &pattern)?;
        let lin = piece.alpha + piece.basis.inner_product(im)?;
        identity = identity.max((f - lin).abs() / (1.0 + f.abs()));
        two_ways = two_ways.max(piece.basis.max_abs_diff(&grad_score(net, im)?)?);
    }
    let note = format!("{} images", images.len());
    Ok(vec![
        CheckReport::new("linearization_identity", identity, 1e-8).with_detail(note.clone()),
        CheckReport::new("basis_equals_input_gradient", two_ways, 1e-10).with_detail(note),
    ])
}

/// [`grad_params`] against central differences of the reference score,
/// relative to `max(|g|, 1)`. A difference is only valid inside one piece,
/// so (image, parameter) pairs whose `±h` perturbation changes the
/// activation pattern are skipped and counted in the detail.
pub fn check_param_grad_fd(net: &Network, images: &[Tensor3], h: f64, tolerance: f64) -> Result<CheckReport> {
    require_conv_sum(net)?;
    let pattern = |n: &Network, px: &[f64]| -> Vec<bool> {
        ref_forward(n, px).iter().flat_map(|l| l.pre.iter().map(|&r| r > 0.0)).collect()
    };
    let p0 = net.params_flat();
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for im in images {
        let g = grad_params(net, im)?.flat();
        let base = pattern(net, im.data());
        for j in 0..p0.len() {
            let shifted = |d: f64| -> Result<Network> {
                let mut n = net.clone();
                let mut p = p0.clone();
                p[j] += d;
                n.set_params_flat(&p)?;
                Ok(n)
            };
            let (up, down) = (shifted(h)?, shifted(-h)?);
            if pattern(&up, im.data()) != base || pattern(&down, im.data()) != base {
                skipped += 1;
                continue;
            }
            let fd = (ref_score(&up, im.data(), None)? - ref_score(&down, im.data(), None)?) / (2.0 * h);
            worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
        }
    }
    Ok(CheckReport::new("param_grad_finite_difference", worst, tolerance).with_detail(format!(
        "{} parameters, {} images, {skipped} pairs skipped at piece boundaries",
        p0.len(),
        images.len()
    )))
}

/// Probe settings for [`check_theorem1`].
#[derive(Clone, Copy, Debug)]
pub struct Theorem1Probe {
    pub trials: usize,
    pub probes_per_trial: usize,
    pub directions: usize,
    pub radius: f64,
}

impl Default for Theorem1Probe {
    fn default() -> Self {
        Theorem1Probe {
            trials: 20,
            probes_per_trial: 20,
            directions: 5,
            radius: 0.5,
        }
    }
}

/// On each piece visited, `U(I) − ||I − σ²B||²/(2σ²)` must be constant and
/// the curvature of `U` along any direction must be `1/σ²`.
pub fn check_theorem1(net: &Network, probe: Theorem1Probe, rng: &mut SeededRng) -> Result<Vec<CheckReport>> {
    require_conv_sum(net)?;
    let s2 = net.sigma_sq();
    let shape = net.input_shape();
    let residual = |img: &Tensor3, basis: &Tensor3| -> Result<f64> {
        let d = img.sub(&basis.scaled(s2))?;
        Ok(ref_energy(net, img) - d.sq_norm() / (2.0 * s2))
    };
    let mut spread: f64 = 0.0;
    let mut curvature: f64 = 0.0;
    let mut stuck = 0;
    for _ in 0..probe.trials {
        let img = gaussian_noise(shape, 1.0, rng)?;
        let (_, pattern) = forward(net, &img)?;
        let basis = top_down(net, &pattern)?.basis;
        let c0 = residual(&img, &basis)?;
        let (mut lo, mut hi) = (c0, c0);
        for _ in 0..probe.probes_per_trial {
            let dir = unit(gaussian_noise(shape, 1.0, rng)?);
            match perturb_within_piece(net, &img, &dir, probe.radius)? {
                Some((p, _)) => {
                    let c = residual(&p, &basis)?;
                    lo = lo.min(c);
                    hi = hi.max(c);
                }
                None => stuck += 1,
            }
        }
        spread = spread.max(hi - lo);
        let u0 = ref_energy(net, &img);
        for _ in 0..probe.directions {
            let dir = unit(gaussian_noise(shape, 1.0, rng)?);
            let plus = perturb_within_piece(net, &img, &dir, probe.radius)?;
            let minus = perturb_within_piece(net, &img, &dir.scaled(-1.0), probe.radius)?;
            let (Some((_, rp)), Some((_, rm))) = (plus, minus) else {
                stuck += 1;
                continue;
            };
            let h = rp.min(rm);
            let mut ip = img.clone();
            ip.add_scaled(h, &dir)?;
            let mut im = img.clone();
            im.add_scaled(-h, &dir)?;
            let second = (ref_energy(net, &ip) - 2.0 * u0 + ref_energy(net, &im)) / (h * h);
            curvature = curvature.max((second - 1.0 / s2).abs());
        }
    }
    let note = format!("{} pieces, {stuck} boundary-stuck probes", probe.trials);
    Ok(vec![
        CheckReport::new("theorem1_constant_residual", spread, 1e-8).with_detail(note.clone()),
        CheckReport::new("theorem1_unit_curvature", curvature, 1e-4).with_detail(note),
    ])
}

fn unit(t: Tensor3) -> Tensor3 {
    let n = t.sq_norm().sqrt();
    if n > 0.0 {
        t.scaled(1.0 / n)
    } else {
        t
    }
}

/// Descent settings for [`check_prop3`].
#[derive(Clone, Copy, Debug)]
pub struct DescentCheck {
    pub epsilon: f64,
    pub max_steps: usize,
    pub tol: f64,
    /// Bound on `||Î − σ²B||_∞ / σ²` at the converged point.
    pub residual_tol: f64,
}

impl Default for DescentCheck {
    fn default() -> Self {
        DescentCheck {
            epsilon: crate::sampler::DEFAULT_EPSILON,
            max_steps: 200_000,
            tol: crate::sampler::DEFAULT_DESCENT_TOL,
            residual_tol: 1e-6,
        }
    }
}

/// Descends from every start; each must converge to a point that
/// reconstructs itself through its own activation pattern.
pub fn check_prop3(net: &Network, starts: &[Tensor3], cfg: DescentCheck) -> Result<CheckReport> {
    require_conv_sum(net)?;
    let s2 = net.sigma_sq();
    let outcomes: Vec<(bool, f64)> = starts
        .par_iter()
        .map(|s| {
            let d = descend(net, s, cfg.epsilon, cfg.max_steps, cfg.tol)?;
            let (_, pattern) = forward(net, &d.image)?;
            let b = top_down(net, &pattern)?.basis.scaled(s2);
            Ok((d.converged, d.image.max_abs_diff(&b)? / s2))
        })
        .collect::<Result<_>>()?;
    let failed = outcomes.iter().filter(|(c, _)| !c).count();
    let worst = outcomes.iter().map(|(_, r)| *r).fold(0.0, f64::max);
    let mut r = CheckReport::new("prop3_modes_auto_encode", worst, cfg.residual_tol)
        .with_detail(format!("{} starts, {failed} did not converge", starts.len()));
    r.pass &= failed == 0;
    Ok(r)
}

/// One-step contrastive divergence at a fixed image with a step size small
/// enough that every draw stays on the image's piece. The mean of
/// `∂f(I_obs)/∂w − ∂f(I_syn)/∂w` is compared per parameter, in standard
/// errors, with `(ε²/2) ⟨I_obs/σ² − B, ∂B/∂w⟩`.
pub fn check_prop4(net: &Network, image: &Tensor3, draws: usize, rng: &mut SeededRng) -> Result<CheckReport> {
    require_conv_sum(net)?;
    if draws < 2 {
        return Err(Error::param("draws", "need at least two draws"));
    }
    let s2 = net.sigma_sq();
    let (_, pattern) = forward(net, image)?;
    let basis = top_down(net, &pattern)?.basis;
    let mut drift = image.scaled(1.0 / s2);
    drift.add_scaled(-1.0, &basis)?;
    let noise: Vec<Tensor3> = (0..draws)
        .map(|_| gaussian_noise(image.shape(), 1.0, rng))
        .collect::<Result<_>>()?;

    let synth = |eps: f64, z: &Tensor3| -> Result<Tensor3> {
        let mut s = image.clone();
        s.add_scaled(-eps * eps / 2.0, &drift)?;
        s.add_scaled(eps, z)?;
        Ok(s)
    };
    let mut eps = crate::sampler::DEFAULT_EPSILON;
    loop {
        let keeps = noise
            .par_iter()
            .map(|z| Ok(forward(net, &synth(eps, z)?)?.1 == pattern))
            .collect::<Result<Vec<bool>>>()?;
        if keeps.iter().all(|&k| k) {
            break;
        }
        eps *= 0.5;
        if eps < 1e-12 {
            return Ok(CheckReport::new("prop4_cd_reconstruction_gradient", f64::INFINITY, 3.0)
                .with_detail("image sits on a piece boundary"));
        }
    }

    // ∂B/∂w_j by central differences with the pattern fixed; B is linear in
    // each single parameter so this is exact up to rounding.
    let p0 = net.params_flat();
    let h = 1e-3;
    let target: Vec<f64> = (0..p0.len())
        .into_par_iter()
        .map(|j| {
            let basis_at = |d: f64| -> Result<Tensor3> {
                let mut n = net.clone();
                let mut p = p0.clone();
                p[j] += d;
                n.set_params_flat(&p)?;
                Ok(top_down(&n, &pattern)?.basis)
            };
            let db = basis_at(h)?.sub(&basis_at(-h)?)?.scaled(1.0 / (2.0 * h));
            Ok(eps * eps / 2.0 * drift.inner_product(&db)?)
        })
        .collect::<Result<_>>()?;

    let g_obs = grad_params(net, image)?.flat();
    let diffs: Vec<Vec<f64>> = noise
        .par_iter()
        .map(|z| {
            let g = grad_params(net, &synth(eps, z)?)?.flat();
            Ok(g_obs.iter().zip(g).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_>>()?;
    let n = draws as f64;
    let mut worst: f64 = 0.0;
    for j in 0..p0.len() {
        let mean = diffs.iter().map(|d| d[j]).sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let dev = (mean - target[j]).abs();
        let z = if se > 0.0 {
            dev / se
        } else if dev <= 1e-12 * (1.0 + target[j].abs()) {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    Ok(CheckReport::new("prop4_cd_reconstruction_gradient", worst, 3.0).with_detail(format!(
        "{} parameters, {draws} draws, eps {eps:e}; deviation in standard errors",
        p0.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{category_model, grid_net, random_conv_net, random_image};
    use crate::learner::grad_params;
    use crate::net::{score_conv, CategoryHeads, LayerShape, LayerSpec};
    use crate::prototype::PrototypeModel;


    fn zero_grid_net() -> Network {
        let l = LayerSpec::zeros(LayerShape::new(2, 2, 1), 1);
        Network::new(Shape::new(1, 2, 2), vec![l], TopMode::ConvSum, 1.0).unwrap()
    }

    #[test]
    fn grid_enumeration() {
        let s = DiscreteImageSpace::default_grid();
        assert_eq!(s.count(), 625);
        assert_eq!(s.image(0).data(), &[-1.0; 4]);
        assert_eq!(s.image(1).data(), &[-0.5, -1.0, -1.0, -1.0]);
        assert_eq!(s.image(624).data(), &[1.0; 4]);
        assert!(matches!(
            DiscreteImageSpace::new(Shape::new(1, 3, 3), vec![0.0; 5]),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn reference_pass_agrees_with_fast_path() {
        let mut rng = SeededRng::new(1);
        for depth in 1..=3 {
            let net = random_conv_net(&mut rng, Shape::new(2, 9, 8), depth);
            let img = random_image(&mut rng, net.input_shape());
            let f = ref_score(&net, img.data(), None).unwrap();
            assert!((f - score_conv(&net, &img).unwrap()).abs() < 1e-10);
            let g = ref_grad_params(&net, img.data());
            let fast = grad_params(&net, &img).unwrap().flat();
            for (a, b) in g.iter().zip(&fast) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn partition_of_zero_and_constant_tilt() {
        let space = DiscreteImageSpace::default_grid();
        let net = zero_grid_net();
        assert!((partition_brute(&net, None, &space).unwrap() - 1.0).abs() < 1e-14);

        // Single 2x2 filter with zero weights and bias κ: f ≡ κ.
        let kappa = 0.7;
        let l = LayerSpec::new(LayerShape::new(1, 2, 1), 1, vec![0.0; 4], vec![kappa]).unwrap();
        let net = Network::new(Shape::new(1, 2, 2), vec![l], TopMode::ConvSum, 1.0).unwrap();
        let z = partition_brute(&net, None, &space).unwrap();
        assert!((z - kappa.exp()).abs() < 1e-13);
    }

    #[test]
    fn partition_matches_independent_accumulation() {
        let mut rng = SeededRng::new(2);
        let space = DiscreteImageSpace::default_grid();
        let net = grid_net(&mut rng, 3);
        let log_z = log_partition_brute(&net, None, &space).unwrap();
        // Reverse order, most significant pixel first, plain scaled sums.
        let b = space.levels().len();
        let mut terms = Vec::new();
        let mut refs = Vec::new();
        for n in (0..space.count()).rev() {
            let mut px = [0.0; 4];
            let mut m = n;
            for p in (0..4).rev() {
                let d = m / b.pow(p as u32);
                m %= b.pow(p as u32);
                px[p] = space.levels()[d];
            }
            let img = Tensor3::from_vec(space.shape(), px.to_vec()).unwrap();
            let q = (-img.sq_norm() / 2.0).exp();
            terms.push(score_conv(&net, &img).unwrap().exp() * q);
            refs.push(q);
        }
        let alt = terms.iter().sum::<f64>().ln() - refs.iter().sum::<f64>().ln();
        assert!((alt - log_z).abs() < 1e-12, "{alt} vs {log_z}");
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(3);
        let space = DiscreteImageSpace::default_grid();
        let net = grid_net(&mut rng, 2);
        let images: Vec<Tensor3> = (0..3).map(|_| random_image(&mut rng, space.shape())).collect();
        let r = check_loglik_fd(&net, &images, &space, 1e-6, 1e-6).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn gradient_vanishes_when_data_is_the_model() {
        // Weighted grid states reproduce the model expectation exactly.
        let mut rng = SeededRng::new(4);
        let space = DiscreteImageSpace::default_grid();
        let net = grid_net(&mut rng, 2);
        let exp = model_expected_grad(&net, &space).unwrap();
        let lw = grid_log_weights(&net, &space, None).unwrap();
        let total = lw.iter().map(|v| v.exp()).sum::<f64>();
        let mut data = vec![0.0; exp.len()];
        for n in 0..space.count() {
            let p = lw[n].exp() / total;
            for (a, g) in data.iter_mut().zip(ref_grad_params(&net, space.image(n).data())) {
                *a += p * g;
            }
        }
        for (a, b) in data.iter().zip(&exp) {
            assert!((a - b).abs() < 1e-12);
        }
    }


    #[test]
    fn prop1_two_categories() {
        let mut rng = SeededRng::new(5);
        let space = DiscreteImageSpace::new(Shape::new(1, 2, 2), vec![-1.0, 0.0, 1.0]).unwrap();
        let model = category_model(&mut rng, 2, true);
        for r in check_prop1(&model, &space).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn prop1_single_category_and_symmetry() {
        let mut rng = SeededRng::new(6);
        let space = DiscreteImageSpace::default_grid();
        let model = category_model(&mut rng, 1, true);
        assert!(check_prop1(&model, &space).unwrap().iter().all(|r| r.pass));

        // Identical heads and priors: the Bayes posterior is uniform.
        let m = category_model(&mut rng, 3, false);
        let TopMode::CategoryHeads(h) = m.net().top_mode().clone() else {
            unreachable!()
        };
        let mut net = m.net().clone();
        *net.top_mode_mut() = TopMode::CategoryHeads(CategoryHeads {
            weights: vec![h.weights[0].clone(); 3],
            biases: vec![0.0; 3],
        });
        let m = CategoryModel::new(net, vec![1.0 / 3.0; 3]).unwrap();
        let r = check_prop1(&m, &space).unwrap();
        assert!(r[0].pass);
    }

    #[test]
    fn prop1_b_requires_reference_base() {
        let mut rng = SeededRng::new(7);
        let model = category_model(&mut rng, 2, false);
        let r = check_prop1(&model, &DiscreteImageSpace::default_grid()).unwrap();
        assert!(r[0].pass);
        assert!(!r[1].pass);
    }

    #[test]
    fn zero_net_passes_structural_checks() {
        let mut rng = SeededRng::new(8);
        let arch = crate::net::ArchSpec {
            input: Shape::new(1, 6, 6),
            layers: vec![LayerShape::new(2, 3, 1), LayerShape::new(2, 2, 1)],
        };
        let net = crate::net::init_network(&arch, 0.0, &mut rng).unwrap();
        for r in check_theorem1(&net, Theorem1Probe::default(), &mut rng).unwrap() {
            assert!(r.pass, "{r:?}");
        }
        let starts: Vec<Tensor3> = (0..5).map(|_| random_image(&mut rng, arch.input)).collect();
        assert!(check_prop3(&net, &starts, DescentCheck::default()).unwrap().pass);
        let img = random_image(&mut rng, arch.input);
        assert!(check_prop4(&net, &img, 200, &mut rng).unwrap().pass);
    }

    #[test]
    fn theorem1_on_random_two_layer_net() {
        let mut rng = SeededRng::new(9);
        let net = random_conv_net(&mut rng, Shape::new(1, 10, 10), 2);
        let probe = Theorem1Probe {
            trials: 20,
            ..Theorem1Probe::default()
        };
        for r in check_theorem1(&net, probe, &mut rng).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn prototype_modes_are_certified() {
        let mut rng = SeededRng::new(10);
        let m = PrototypeModel::random(&mut rng, Shape::new(1, 4, 4), 4, 1.0, 0.5).unwrap();
        let net = m.to_network().unwrap();
        let modes: Vec<Tensor3> = m
            .enumerate_pieces()
            .unwrap()
            .into_iter()
            .filter(|p| p.mean_in_piece)
            .map(|p| p.mean)
            .collect();
        assert!(!modes.is_empty());
        let r = check_prop3(&net, &modes, DescentCheck::default()).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn prop4_on_small_net() {
        let mut rng = SeededRng::new(11);
        let net = random_conv_net(&mut rng, Shape::new(1, 5, 5), 2);
        let img = random_image(&mut rng, net.input_shape());
        let r = check_prop4(&net, &img, 2000, &mut rng).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn report_json_line() {
        let r = CheckReport::new("x", 0.5, 1.0);
        assert_eq!(r.to_json(), r#"{"name":"x","max_abs_deviation":0.5,"tolerance":1.0,"pass":true}"#);
    }

    #[test]
    fn linearization_and_param_grad_checks() {
        let mut rng = SeededRng::new(31);
        for _ in 0..5 {
            let net = random_conv_net(&mut rng, Shape::new(1, 6, 6), 2);
            let imgs: Vec<Tensor3> = (0..3).map(|_| random_image(&mut rng, Shape::new(1, 6, 6))).collect();
            assert!(check_linearization(&net, &imgs).unwrap().iter().all(|r| r.pass));
        }
        let net = grid_net(&mut rng, 2);
        let imgs: Vec<Tensor3> = (0..4).map(|_| random_image(&mut rng, Shape::new(1, 2, 2))).collect();
        let r = check_param_grad_fd(&net, &imgs, 1e-5, 1e-5).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.detail.contains(" 0 pairs skipped"), "{r:?}");

        // The zero net sits on the boundary of every unit.
        let mut zero = net.clone();
        zero.set_params_flat(&vec![0.0; zero.num_params()]).unwrap();
        let r = check_param_grad_fd(&zero, &imgs, 1e-5, 1e-5).unwrap();
        assert!(r.pass && !r.detail.contains(" 0 pairs skipped"), "{r:?}");
    }
}
