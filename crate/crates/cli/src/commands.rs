//! The five workflows behind the binary. Each returns its results so the
//! test suites can drive them without spawning processes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use genconv::fixtures::{category_model, grid_net, random_image};
use genconv::learner::{reconstruct as reconstruct_image, reconstruction_rmse, HistoryRecord};
use genconv::oracle::{self, CheckReport, DescentCheck, DiscreteImageSpace, Theorem1Probe};
use genconv::sampler::run_chains;
use genconv::{
    init_network, ArchSpec, ChainState, LangevinConfig, Network, SeededRng, Shape, Tensor3, TrainConfig, TrainMode,
    TrainOutcome,
};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, Preprocessing};
use crate::error::{CliError, Result};
use crate::pnm;

/// Stream used for weight initialisation; chain streams use small indices.
const INIT_STREAM: u64 = 1 << 48;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";

pub struct TrainRun {
    pub outcome: TrainOutcome,
    /// Training images after preprocessing (model units).
    pub images: Vec<Tensor3>,
    pub preprocessing: Preprocessing,
    pub checkpoint: Checkpoint,
    pub train_config: TrainConfig,
}

/// Layer positions `|D_l|` for `l = 0..=L`.
fn map_positions(arch: &ArchSpec) -> Result<Vec<usize>> {
    Ok(arch.map_shapes()?.iter().map(|s| s.height * s.width).collect())
}

pub fn initial_network(cfg: &RunConfig, arch: &ArchSpec) -> Result<Network> {
    let mut rng = SeededRng::substream(cfg.seed, INIT_STREAM);
    let net = init_network(arch, cfg.train.init_std, &mut rng)?;
    if cfg.sigma_sq == 1.0 {
        return Ok(net);
    }
    Ok(Network::new(
        net.input_shape(),
        net.layers().to_vec(),
        net.top_mode().clone(),
        cfg.sigma_sq,
    )?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_images(dir: &Path, prefix: &str, images: &[Tensor3], prep: &Preprocessing) -> Result<()> {
    for (i, im) in images.iter().enumerate() {
        pnm::save_image(&prep.restore(im), &dir.join(format!("{prefix}_{i:03}.pgm")))?;
    }
    Ok(())
}

pub fn history_csv(history: &[HistoryRecord]) -> String {
    let mut s = String::from(HistoryRecord::CSV_HEADER);
    s.push('\n');
    for h in history {
        s.push_str(&h.csv_line());
        s.push('\n');
    }
    s
}

/// Learns from every image in `data_dir`, then writes the checkpoint, the
/// history CSV, the synthesized images and (for contrastive divergence)
/// the reconstructions of the training images.
pub fn train(cfg: &RunConfig) -> Result<TrainRun> {
    let dir = cfg
        .data_dir
        .as_deref()
        .ok_or_else(|| CliError::config("data_dir", "train needs a data directory"))?;
    let files = data::image_files(dir)?;
    let (prep, images) = data::load_training_set(&files, &cfg.preprocess)?;
    let arch = cfg.arch(images[0].shape())?;
    let tcfg = cfg.train_config(&map_positions(&arch)?);
    tcfg.validate(arch.layers.len()).map_err(|e| CliError::config("train", e.to_string()))?;
    let net0 = initial_network(cfg, &arch)?;

    let outcome = genconv::train(&net0, &images, &tcfg)?;

    let out = &cfg.out_dir;
    create_dir(out)?;
    let mut ckpt = Checkpoint::new(&outcome.net, prep.clone(), outcome.history.len(), tcfg.epsilon, cfg.seed)?;
    ckpt.rng_streams = outcome.chains.iter().map(|c| c.rng().into()).collect();
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    let hist = out.join(HISTORY_FILE);
    std::fs::write(&hist, history_csv(&outcome.history)).map_err(|e| CliError::io(&hist, e))?;
    write_images(out, "synth", &outcome.synthesized, &prep)?;
    if tcfg.mode == TrainMode::Cd {
        let recon = images
            .iter()
            .map(|im| reconstruct_image(&outcome.net, im))
            .collect::<genconv::Result<Vec<_>>>()?;
        write_images(out, "recon", &recon, &prep)?;
    }
    Ok(TrainRun {
        outcome,
        images,
        preprocessing: prep,
        checkpoint: ckpt,
        train_config: tcfg,
    })
}

/// Fresh chains from zero images, `steps` Langevin steps each; chain `i`
/// uses stream `seed ^ i`.
pub fn sample(ckpt: &Checkpoint, chains: usize, steps: usize, seed: u64, out: &Path) -> Result<Vec<Tensor3>> {
    if chains == 0 {
        return Err(CliError::config("chains", "must be at least 1"));
    }
    if steps == 0 {
        return Err(CliError::config("steps", "must be at least 1"));
    }
    let net = ckpt.network()?;
    let mut states: Vec<ChainState> = (0..chains)
        .map(|i| ChainState::new(Tensor3::zeros(net.input_shape()), SeededRng::substream(seed, i as u64)))
        .collect();
    let lc = LangevinConfig {
        epsilon: ckpt.epsilon,
        steps,
    };
    run_chains(&net, &mut states, &lc)?;
    if let Some(i) = states.iter().position(|c| !c.image.is_finite()) {
        return Err(genconv::Error::Divergence {
            what: "sampling chain",
            iteration: i,
        }
        .into());
    }
    let images: Vec<Tensor3> = states.into_iter().map(|c| c.image).collect();
    create_dir(out)?;
    write_images(out, "sample", &images, &ckpt.preprocessing)?;
    Ok(images)
}

/// Writes `σ²B` for each input as `recon_<stem>.pgm`; returns the RMSE of
/// each reconstruction in model units.
pub fn reconstruct(ckpt: &Checkpoint, inputs: &[PathBuf], out: &Path) -> Result<Vec<f64>> {
    if inputs.is_empty() {
        return Err(CliError::config("images", "reconstruct needs at least one image"));
    }
    let net = ckpt.network()?;
    let prep = &ckpt.preprocessing;
    let images = inputs
        .iter()
        .map(|p| Ok(prep.apply(&prep.conform(&pnm::load_image(p)?))))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    let mut rmse = Vec::with_capacity(images.len());
    for (path, im) in inputs.iter().zip(&images) {
        let r = reconstruct_image(&net, im)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        pnm::save_image(&prep.restore(&r), &out.join(format!("recon_{stem}.pgm")))?;
        rmse.push(reconstruction_rmse(&net, im)?);
    }
    Ok(rmse)
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub checkpoint: Option<PathBuf>,
    /// Use an all-zero tiny network instead of a random one.
    pub zero: bool,
    pub seed: u64,
}

/// Tiny network on the 2×2 grid: the only size where the exact-partition
/// checks are feasible.
pub fn verify_net(opts: &VerifyOptions) -> Network {
    let mut net = grid_net(&mut SeededRng::new(opts.seed), 2);
    if opts.zero {
        let n = net.num_params();
        net.set_params_flat(&vec![0.0; n]).expect("zero parameters are valid");
    }
    net
}

/// Runs the oracle checks and returns every report. Grid-based checks need
/// the 2×2 tiny network and are skipped for checkpoints.
pub fn verify(opts: &VerifyOptions) -> Result<Vec<CheckReport>> {
    let mut rng = SeededRng::substream(opts.seed, INIT_STREAM + 1);
    let (net, tiny) = match &opts.checkpoint {
        Some(p) => (Checkpoint::load(p)?.network()?, false),
        None => (verify_net(opts), true),
    };
    let shape = net.input_shape();
    let images: Vec<Tensor3> = (0..if tiny { 20 } else { 3 }).map(|_| random_image(&mut rng, shape)).collect();
    let mut reports = oracle::check_linearization(&net, &images)?;
    let small = net.num_params() <= 500;
    if small {
        reports.push(oracle::check_param_grad_fd(&net, &images[..images.len().min(5)], 1e-5, 1e-5)?);
    }
    let probe = if tiny {
        Theorem1Probe::default()
    } else {
        Theorem1Probe {
            trials: 3,
            probes_per_trial: 5,
            directions: 2,
            radius: 0.5,
        }
    };
    reports.extend(oracle::check_theorem1(&net, probe, &mut rng)?);
    let starts = &images[..if tiny { 10 } else { 2 }];
    reports.push(oracle::check_prop3(&net, starts, DescentCheck::default())?);
    if small {
        reports.push(oracle::check_prop4(&net, &images[0], 2000, &mut rng)?);
    }
    if tiny {
        let grid = DiscreteImageSpace::default_grid();
        let observed: Vec<Tensor3> = [3, 200, 411].iter().map(|&n| grid.image(n)).collect();
        reports.push(oracle::check_loglik_fd(&net, &observed, &grid, 1e-5, 1e-6)?);
        let fine = DiscreteImageSpace::uniform(shape, 31, 4.5)?;
        let mc = TrainConfig {
            num_chains: 64,
            langevin_steps: 500,
            seed: opts.seed,
            ..TrainConfig::default()
        };
        reports.push(oracle::check_mle_vs_exact(&net, &observed, &fine, &mc)?);
        let three = DiscreteImageSpace::new(shape, vec![-1.0, 0.0, 1.0])?;
        reports.extend(oracle::check_prop1(&category_model(&mut rng, 2, true), &three)?);
    }
    Ok(reports)
}

/// Architecture summary: shapes, parameter counts and `σ²`.
pub fn info(net_arch: &ArchSpec, sigma_sq: f64) -> Result<String> {
    let shapes = net_arch.map_shapes()?;
    let mut s = String::new();
    let inp = net_arch.input;
    writeln!(s, "input {}x{}x{}", inp.channels, inp.height, inp.width).unwrap();
    writeln!(s, "sigma_sq {sigma_sq}").unwrap();
    let mut total = 0;
    for (l, layer) in net_arch.layers.iter().enumerate() {
        let o = shapes[l + 1];
        let params = layer.filters * (shapes[l].channels * layer.kernel_height * layer.kernel_width + 1);
        total += params;
        writeln!(
            s,
            "layer {}: {} filters {}x{} stride {} -> {}x{}x{}, {} params",
            l + 1,
            layer.filters,
            layer.kernel_height,
            layer.kernel_width,
            layer.stride,
            o.channels,
            o.height,
            o.width,
            params
        )
        .unwrap();
    }
    writeln!(s, "total params {total}").unwrap();
    Ok(s)
}

/// Input shape a configuration implies without reading any images.
pub fn configured_input(cfg: &RunConfig) -> Result<Shape> {
    let [h, w] = cfg
        .preprocess
        .size
        .ok_or_else(|| CliError::config("preprocess.size", "needed to describe the architecture"))?;
    Ok(Shape::new(cfg.channels(), h, w))
}
