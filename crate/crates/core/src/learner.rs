//! Parameter estimation: maximum likelihood with persistent Langevin chains,
//! contrastive divergence, and sequential layer growth.
//!
//! Both learners ascend `H_obs − H_syn`, the difference between the mean
//! parameter gradient of the score over observed and synthesized images.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearize::{reverse_pass, top_down};
use crate::net::{forward, Network, TopMode};
use crate::sampler::{langevin_run, run_chains, ChainState, LangevinConfig, DEFAULT_EPSILON};
use crate::tensor::{sq_norm, SeededRng, Tensor3};

/// Gradient of one layer's weights and biases, laid out like [`crate::net::LayerSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradient with respect to every network parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrad {
    pub fn zeros_like(net: &Network) -> Self {
        ParamGrad {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights().len()],
                    biases: vec![0.0; l.biases().len()],
                })
                .collect(),
        }
    }

    /// Same order as [`Network::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.biases);
        }
        v
    }

    pub fn from_flat(net: &Network, flat: &[f64]) -> Result<Self> {
        if flat.len() != net.num_params() {
            return Err(Error::dim("ParamGrad::from_flat", net.num_params(), flat.len()));
        }
        let mut g = Self::zeros_like(net);
        let mut off = 0;
        for l in &mut g.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    /// `self += a * other`. Shapes must match.
    pub fn add_scaled(&mut self, a: f64, other: &ParamGrad) {
        debug_assert_eq!(self.len(), other.len());
        for (s, o) in self.values_mut().zip(other.values()) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.values_mut().for_each(|v| *v *= a);
    }

    pub fn mean_abs(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        self.values().map(|v| v.abs()).sum::<f64>() / n as f64
    }

    /// Mean of `grads` accumulated in slice order.
    pub fn mean_of(net: &Network, grads: &[ParamGrad]) -> ParamGrad {
        let mut acc = Self::zeros_like(net);
        for g in grads {
            acc.add_scaled(1.0, g);
        }
        if !grads.is_empty() {
            acc.scale(1.0 / grads.len() as f64);
        }
        acc
    }
}

fn require_conv_sum(net: &Network) -> Result<()> {
    match net.top_mode() {
        TopMode::ConvSum => Ok(()),
        TopMode::CategoryHeads(_) => Err(Error::TopMode { expected: "ConvSum" }),
    }
}

/// `∂f(I; w)/∂w` by back-propagation with the ReLU gates of the forward pass.
pub fn grad_params(net: &Network, image: &Tensor3) -> Result<ParamGrad> {
    Ok(score_and_grad(net, image)?.1)
}

fn score_and_grad(net: &Network, image: &Tensor3) -> Result<(f64, ParamGrad)> {
    require_conv_sum(net)?;
    let (fm, _) = forward(net, image)?;
    let (_, g) = reverse_pass(net, &fm, false, true);
    Ok((fm.top().sum(), g.expect("parameter gradient requested")))
}

/// `σ² B_{w,δ(I)}`: bottom-up encoding then top-down decoding.
pub fn reconstruct(net: &Network, image: &Tensor3) -> Result<Tensor3> {
    require_conv_sum(net)?;
    let (_, pattern) = forward(net, image)?;
    Ok(top_down(net, &pattern)?.basis.scaled(net.sigma_sq()))
}

/// `||I − σ² B_{w,δ(I)}|| / sqrt(|D|)`.
pub fn reconstruction_rmse(net: &Network, image: &Tensor3) -> Result<f64> {
    let r = reconstruct(net, image)?;
    Ok((sq_norm(&image.sub(&r)?) / image.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Mle,
    Cd,
}

/// Stage of sequential growth: train the first `layers` layers for
/// `iterations` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthStage {
    pub layers: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    /// All layers learned together for `TrainConfig::iterations`.
    AllAtOnce,
    Sequential(Vec<GrowthStage>),
}

impl Growth {
    /// One stage per layer, splitting `total` iterations as evenly as
    /// possible (later stages take the remainder).
    pub fn equal_stages(depth: usize, total: usize) -> Growth {
        let base = total / depth.max(1);
        let extra = total % depth.max(1);
        Growth::Sequential(
            (1..=depth)
                .map(|l| GrowthStage {
                    layers: l,
                    iterations: base + usize::from(depth - l < extra),
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub num_chains: usize,
    pub langevin_steps: usize,
    pub iterations: usize,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// Per-layer multipliers of `learning_rate`; missing means 1 for all.
    #[serde(default)]
    pub layer_lr_scale: Option<Vec<f64>>,
    pub init_std: f64,
    pub mode: TrainMode,
    pub growth: Growth,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_chains: 16,
            langevin_steps: 10,
            iterations: 700,
            epsilon: DEFAULT_EPSILON,
            learning_rate: 0.01,
            layer_lr_scale: None,
            init_std: 0.01,
            mode: TrainMode::Mle,
            growth: Growth::AllAtOnce,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.num_chains == 0 {
            return Err(Error::param("num_chains", "must be at least 1"));
        }
        if self.langevin_steps == 0 {
            return Err(Error::param("langevin_steps", "must be at least 1"));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::param("epsilon", "must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if !(self.init_std >= 0.0) || !self.init_std.is_finite() {
            return Err(Error::param("init_std", "must be non-negative"));
        }
        if let Some(s) = &self.layer_lr_scale {
            if s.len() != depth {
                return Err(Error::param(
                    "layer_lr_scale",
                    format!("expected {depth} entries, got {}", s.len()),
                ));
            }
            if s.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::param("layer_lr_scale", "entries must be non-negative"));
            }
        }
        if let Growth::Sequential(stages) = &self.growth {
            if stages.is_empty() {
                return Err(Error::param("growth", "sequential schedule needs at least one stage"));
            }
            for st in stages {
                if st.layers == 0 || st.layers > depth {
                    return Err(Error::param(
                        "growth",
                        format!("stage uses {} layers but the network has {depth}", st.layers),
                    ));
                }
            }
            if stages.windows(2).any(|w| w[1].layers < w[0].layers) {
                return Err(Error::param("growth", "stages must not remove layers"));
            }
        }
        Ok(())
    }

    fn langevin(&self) -> LangevinConfig {
        LangevinConfig {
            epsilon: self.epsilon,
            steps: self.langevin_steps,
        }
    }

    fn stages(&self, depth: usize) -> Vec<GrowthStage> {
        match &self.growth {
            Growth::AllAtOnce => vec![GrowthStage {
                layers: depth,
                iterations: self.iterations,
            }],
            Growth::Sequential(s) => s.clone(),
        }
    }
}

/// Diagnostics of one learning iteration, measured before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub h_obs: ParamGrad,
    pub h_syn: ParamGrad,
    /// Mean absolute entry of `H_obs − H_syn`.
    pub grad_norm: f64,
    /// Mean energy of the synthesized images.
    pub mean_energy: f64,
    /// Mean reconstruction RMSE of the observed images.
    pub recon_rmse: f64,
}

/// `w ← w + η s_l (H_obs − H_syn)` layer by layer.
fn apply_update(net: &mut Network, h_obs: &ParamGrad, h_syn: &ParamGrad, config: &TrainConfig) {
    for (l, (go, gs)) in h_obs.layers.iter().zip(&h_syn.layers).enumerate() {
        let scale = config
            .layer_lr_scale
            .as_ref()
            .map_or(1.0, |s| s[l])
            * config.learning_rate;
        let layer = net.layer_mut(l);
        for ((w, a), b) in layer.weights_mut().iter_mut().zip(&go.weights).zip(&gs.weights) {
            *w += scale * (a - b);
        }
        for ((w, a), b) in layer.biases_mut().iter_mut().zip(&go.biases).zip(&gs.biases) {
            *w += scale * (a - b);
        }
    }
}

struct ImageStats {
    grad: ParamGrad,
    energy: f64,
    rmse: f64,
}

fn image_stats(net: &Network, image: &Tensor3, with_recon: bool) -> Result<ImageStats> {
    require_conv_sum(net)?;
    let (fm, pattern) = forward(net, image)?;
    let (_, g) = reverse_pass(net, &fm, false, true);
    let energy = sq_norm(image) / (2.0 * net.sigma_sq()) - fm.top().sum();
    let rmse = if with_recon {
        let b = top_down(net, &pattern)?.basis.scaled(net.sigma_sq());
        (sq_norm(&image.sub(&b)?) / image.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok(ImageStats {
        grad: g.expect("parameter gradient requested"),
        energy,
        rmse,
    })
}

fn batch_stats(net: &Network, images: &[&Tensor3], with_recon: bool) -> Result<Vec<ImageStats>> {
    images.par_iter().map(|im| image_stats(net, im, with_recon)).collect()
}

fn mean_grad(net: &Network, stats: &[ImageStats]) -> ParamGrad {
    let mut acc = ParamGrad::zeros_like(net);
    for s in stats {
        acc.add_scaled(1.0, &s.grad);
    }
    acc.scale(1.0 / stats.len() as f64);
    acc
}

fn finish_step(net: &mut Network, obs: &[ImageStats], syn: &[ImageStats], config: &TrainConfig) -> StepStats {
    let h_obs = mean_grad(net, obs);
    let h_syn = mean_grad(net, syn);
    let mut diff = h_obs.clone();
    diff.add_scaled(-1.0, &h_syn);
    let grad_norm = diff.mean_abs();
    let mean_energy = syn.iter().map(|s| s.energy).sum::<f64>() / syn.len() as f64;
    let recon_rmse = obs.iter().map(|s| s.rmse).sum::<f64>() / obs.len() as f64;
    apply_update(net, &h_obs, &h_syn, config);
    StepStats {
        h_obs,
        h_syn,
        grad_norm,
        mean_energy,
        recon_rmse,
    }
}

/// One maximum-likelihood iteration: advance every chain by
/// `langevin_steps`, then ascend `H_obs − H_syn`.
pub fn mle_step(
    net: &mut Network,
    observed: &[Tensor3],
    chains: &mut [ChainState],
    config: &TrainConfig,
) -> Result<StepStats> {
    if observed.is_empty() || chains.is_empty() {
        return Err(Error::param("observed", "need at least one observed image and one chain"));
    }
    run_chains(net, chains, &config.langevin())?;
    let obs = batch_stats(net, &observed.iter().collect::<Vec<_>>(), true)?;
    let syn = batch_stats(net, &chains.iter().map(|c| &c.image).collect::<Vec<_>>(), false)?;
    Ok(finish_step(net, &obs, &syn, config))
}

/// One contrastive-divergence iteration: each observed image seeds a chain
/// of `langevin_steps` steps whose end point is the synthesized image.
/// `rngs[m]` is the noise stream of observed image `m`.
pub fn cd_step(
    net: &mut Network,
    observed: &[Tensor3],
    rngs: &mut [SeededRng],
    config: &TrainConfig,
) -> Result<(StepStats, Vec<Tensor3>)> {
    if observed.is_empty() {
        return Err(Error::param("observed", "need at least one observed image"));
    }
    if rngs.len() != observed.len() {
        return Err(Error::dim("cd_step streams", observed.len(), rngs.len()));
    }
    let lc = config.langevin();
    let frozen: &Network = net;
    let synthesized = observed
        .par_iter()
        .zip(rngs.par_iter_mut())
        .map(|(obs, rng)| {
            let mut chain = ChainState::new(obs.clone(), rng.clone());
            langevin_run(frozen, &mut chain, &lc)?;
            *rng = chain.rng().clone();
            Ok(chain.image)
        })
        .collect::<Result<Vec<_>>>()?;
    let obs = batch_stats(net, &observed.iter().collect::<Vec<_>>(), true)?;
    let syn = batch_stats(net, &synthesized.iter().collect::<Vec<_>>(), false)?;
    Ok((finish_step(net, &obs, &syn, config), synthesized))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub stage: usize,
    pub grad_norm: f64,
    pub mean_energy: f64,
    pub recon_rmse: f64,
}

impl HistoryRecord {
    pub const CSV_HEADER: &'static str = "iter,grad_norm,mean_energy";

    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.iteration, self.grad_norm, self.mean_energy)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    /// Final chain images (MLE) or last one-step samples (CD).
    pub synthesized: Vec<Tensor3>,
    pub history: Vec<HistoryRecord>,
    /// Persistent chains after the last iteration (empty for CD).
    pub chains: Vec<ChainState>,
}

/// Algorithm driver. MLE chains start at zero images with streams
/// `seed ^ i`; CD streams for observed image `m` use `seed ^ (2^32 + m)`.
pub fn train(net0: &Network, images: &[Tensor3], config: &TrainConfig) -> Result<TrainOutcome> {
    require_conv_sum(net0)?;
    config.validate(net0.depth())?;
    if images.is_empty() {
        return Err(Error::param("images", "need at least one training image"));
    }
    if let Some(im) = images.iter().find(|im| im.shape() != net0.input_shape()) {
        return Err(Error::dim("training image", net0.input_shape(), im.shape()));
    }

    let mut net = net0.clone();
    let mut history = Vec::new();
    let mut chains: Vec<ChainState> = (0..config.num_chains)
        .map(|i| ChainState::new(Tensor3::zeros(net.input_shape()), SeededRng::substream(config.seed, i as u64)))
        .collect();
    let mut cd_rngs: Vec<SeededRng> = (0..images.len())
        .map(|m| SeededRng::substream(config.seed, (1u64 << 32) + m as u64))
        .collect();
    let mut cd_samples = Vec::new();

    let mut iteration = 0;
    for (stage_idx, stage) in config.stages(net.depth()).iter().enumerate() {
        let mut active = net.prefix(stage.layers)?;
        let stage_config = TrainConfig {
            layer_lr_scale: config
                .layer_lr_scale
                .as_ref()
                .map(|s| s[..stage.layers].to_vec()),
            ..config.clone()
        };
        for _ in 0..stage.iterations {
            iteration += 1;
            let stats = match config.mode {
                TrainMode::Mle => mle_step(&mut active, images, &mut chains, &stage_config)?,
                TrainMode::Cd => {
                    let (s, samples) = cd_step(&mut active, images, &mut cd_rngs, &stage_config)?;
                    cd_samples = samples;
                    s
                }
            };
            if !active.is_finite() || !stats.grad_norm.is_finite() {
                return Err(Error::Divergence {
                    what: "network parameters",
                    iteration,
                });
            }
            history.push(HistoryRecord {
                iteration,
                stage: stage_idx,
                grad_norm: stats.grad_norm,
                mean_energy: stats.mean_energy,
                recon_rmse: stats.recon_rmse,
            });
        }
        net.copy_prefix_from(&active)?;
    }

    let (synthesized, chains) = match config.mode {
        TrainMode::Mle => (chains.iter().map(|c| c.image.clone()).collect(), chains),
        TrainMode::Cd => (cd_samples, Vec::new()),
    };
    Ok(TrainOutcome {
        net,
        synthesized,
        history,
        chains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_conv_net, random_image};
    use crate::linearize::top_down;
    use crate::net::{init_network, score_conv, ArchSpec, LayerShape, LayerSpec};
    use crate::tensor::{gaussian_noise, Shape};

    #[test]
    fn dead_network_has_zero_gradient() {
        let arch = ArchSpec {
            input: Shape::new(1, 6, 6),
            layers: vec![LayerShape::new(2, 3, 1), LayerShape::new(2, 2, 1)],
        };
        let net = init_network(&arch, 0.0, &mut SeededRng::new(0)).unwrap();
        let img = gaussian_noise(arch.input, 1.0, &mut SeededRng::new(1)).unwrap();
        assert!(grad_params(&net, &img).unwrap().flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_window_gradient_is_the_window() {
        let layer = LayerSpec::new(LayerShape::new(1, 2, 1), 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.5]).unwrap();
        let net = Network::new(Shape::new(1, 3, 3), vec![layer], TopMode::ConvSum, 1.0).unwrap();
        let mut img = Tensor3::filled(Shape::new(1, 3, 3), -1.0);
        // Only the top-left window is active.
        img.set(0, 0, 0, 2.0);
        img.set(0, 1, 1, 2.0);
        img.set(0, 0, 1, -7.0);
        img.set(0, 2, 2, -5.0);
        let (_, pattern) = forward(&net, &img).unwrap();
        assert_eq!(pattern.active_count(), 1);
        assert_eq!(pattern.layers[0].get(0, 0, 0), 1.0);
        let g = grad_params(&net, &img).unwrap();
        assert_eq!(g.layers[0].weights, vec![2.0, -7.0, -1.0, 2.0]);
        assert_eq!(g.layers[0].biases, vec![1.0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = SeededRng::new(4);
        let mut tested = 0;
        while tested < 10 {
            let net = random_conv_net(&mut rng, Shape::new(1, 6, 6), 2);
            if net.num_params() > 50 {
                continue;
            }
            let img = random_image(&mut rng, net.input_shape());
            let g = grad_params(&net, &img).unwrap().flat();
            let p0 = net.params_flat();
            let h = 1e-6;
            for j in 0..p0.len() {
                let eval = |d: f64| {
                    let mut n = net.clone();
                    let mut p = p0.clone();
                    p[j] += d;
                    n.set_params_flat(&p).unwrap();
                    score_conv(&n, &img).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "param {j}: {fd} vs {}", g[j]);
            }
            tested += 1;
        }
    }

    fn tiny_setup(seed: u64) -> (Network, Vec<Tensor3>) {
        let mut rng = SeededRng::new(seed);
        let net = random_conv_net(&mut rng, Shape::new(1, 6, 6), 2);
        let imgs = (0..3).map(|_| random_image(&mut rng, net.input_shape())).collect();
        (net, imgs)
    }

    #[test]
    fn matched_statistics_leave_parameters_unchanged() {
        let (mut net, imgs) = tiny_setup(5);
        let before = net.clone();
        let cfg = TrainConfig::default();
        let obs = batch_stats(&net, &imgs.iter().collect::<Vec<_>>(), false).unwrap();
        let syn = batch_stats(&net, &imgs.iter().collect::<Vec<_>>(), false).unwrap();
        let s = finish_step(&mut net, &obs, &syn, &cfg);
        assert_eq!(s.grad_norm, 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn cd_update_equals_linear_piece_expansion() {
        let mut rng = SeededRng::new(6);
        let net = random_conv_net(&mut rng, Shape::new(1, 7, 7), 2);
        let obs = random_image(&mut rng, net.input_shape());
        let (_, pattern) = forward(&net, &obs).unwrap();
        // A small move that keeps the activation pattern.
        let dir = gaussian_noise(obs.shape(), 1.0, &mut rng).unwrap();
        let (syn, _) = crate::linearize::perturb_within_piece(&net, &obs, &dir, 0.05)
            .unwrap()
            .unwrap();
        let mut lhs = grad_params(&net, &obs).unwrap();
        lhs.add_scaled(-1.0, &grad_params(&net, &syn).unwrap());

        // ⟨I_obs − I_syn, ∂B/∂w⟩ by central differences of B with δ fixed.
        let diff = obs.sub(&syn).unwrap();
        let p0 = net.params_flat();
        let h = 1e-4;
        let lhs = lhs.flat();
        for j in 0..p0.len() {
            let basis = |d: f64| {
                let mut n = net.clone();
                let mut p = p0.clone();
                p[j] += d;
                n.set_params_flat(&p).unwrap();
                top_down(&n, &pattern).unwrap().basis
            };
            let db = basis(h).sub(&basis(-h)).unwrap().scaled(1.0 / (2.0 * h));
            let rhs = diff.inner_product(&db).unwrap();
            assert!((lhs[j] - rhs).abs() <= 1e-8 * (1.0 + rhs.abs()), "{j}: {} vs {rhs}", lhs[j]);
        }
    }

    #[test]
    fn reconstruct_examples() {
        let arch = ArchSpec {
            input: Shape::new(1, 5, 5),
            layers: vec![LayerShape::new(2, 3, 1)],
        };
        let zero = init_network(&arch, 0.0, &mut SeededRng::new(0)).unwrap();
        let img = gaussian_noise(arch.input, 1.0, &mut SeededRng::new(2)).unwrap();
        assert_eq!(reconstruct(&zero, &img).unwrap().max_abs(), 0.0);

        let m = crate::prototype::PrototypeModel::random(&mut SeededRng::new(3), Shape::new(1, 4, 4), 5, 1.0, 0.3)
            .unwrap();
        let net = m.to_network().unwrap();
        for _ in 0..5 {
            let img = gaussian_noise(m.patch_shape(), 1.0, &mut SeededRng::new(4)).unwrap();
            let r = reconstruct(&net, &img).unwrap();
            assert!(r.max_abs_diff(&m.reconstruct(&img).unwrap()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn zero_iterations_return_initial_network() {
        let (net, imgs) = tiny_setup(7);
        let cfg = TrainConfig {
            iterations: 0,
            num_chains: 2,
            ..TrainConfig::default()
        };
        let out = train(&net, &imgs, &cfg).unwrap();
        assert_eq!(out.net, net);
        assert!(out.history.is_empty());
    }

    #[test]
    fn zero_step_size_cd_gives_no_update() {
        // ε → 0 leaves I_syn = I_obs up to O(ε); with ε tiny the update vanishes.
        let (mut net, imgs) = tiny_setup(8);
        let before = net.clone();
        let cfg = TrainConfig {
            epsilon: 1e-300,
            langevin_steps: 1,
            mode: TrainMode::Cd,
            ..TrainConfig::default()
        };
        let mut rngs: Vec<_> = (0..imgs.len()).map(|i| SeededRng::new(i as u64)).collect();
        let (s, syn) = cd_step(&mut net, &imgs, &mut rngs, &cfg).unwrap();
        assert_eq!(syn, imgs);
        assert_eq!(s.grad_norm, 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn training_is_deterministic_and_grows() {
        let (net, imgs) = tiny_setup(9);
        let cfg = TrainConfig {
            num_chains: 3,
            langevin_steps: 2,
            iterations: 6,
            growth: Growth::equal_stages(2, 6),
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&net, &imgs, &cfg).unwrap();
        let b = train(&net, &imgs, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.synthesized, b.synthesized);
        assert_eq!(a.history.len(), 6);
        assert_eq!(a.history.iter().map(|h| h.stage).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
        assert_ne!(a.net.layers()[1], net.layers()[1]);
    }

    #[test]
    fn equal_stages_split() {
        let Growth::Sequential(s) = Growth::equal_stages(3, 200) else {
            unreachable!()
        };
        assert_eq!(s.iter().map(|s| s.iterations).sum::<usize>(), 200);
        assert_eq!(s.iter().map(|s| s.layers).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn divergence_is_reported() {
        let (net, imgs) = tiny_setup(10);
        let big: Vec<Tensor3> = imgs.iter().map(|i| i.scaled(1e200)).collect();
        let cfg = TrainConfig {
            num_chains: 2,
            langevin_steps: 1,
            iterations: 5,
            learning_rate: 1e100,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&net, &big, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate(3).is_ok());
        let bad = TrainConfig {
            growth: Growth::Sequential(vec![GrowthStage { layers: 4, iterations: 1 }]),
            ..TrainConfig::default()
        };
        assert!(bad.validate(3).is_err());
        let bad = TrainConfig {
            layer_lr_scale: Some(vec![1.0]),
            ..TrainConfig::default()
        };
        assert!(bad.validate(3).is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(3), Err(Error::Parameter { name: "learning_rate", .. })));
    }
}
