//! Langevin sampling of `p(I; w) ∝ exp(f(I; w)) N(I; 0, σ²)` and the
//! noise-free attractor descent.
//!
//! One step is
//!
//! ```text
//! I ← I − (ε²/2) (I/σ² − B_{w,δ(I)}) + ε Z,   Z ~ N(0, 1)
//! ```
//!
//! where `B_{w,δ(I)}` comes from the top-down pass. The drift is the
//! auto-encoding reconstruction error. No Metropolis correction is applied.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearize::piece_at;
use crate::net::Network;
use crate::tensor::{SeededRng, Tensor3};

pub const DEFAULT_EPSILON: f64 = 0.3;
pub const DEFAULT_DESCENT_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub epsilon: f64,
    pub steps: usize,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            epsilon: DEFAULT_EPSILON,
            steps: 10,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if self.steps == 0 {
            return Err(Error::param("steps", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::param("epsilon", format!("must be positive, got {epsilon}")));
    }
    Ok(())
}

/// One persistent chain: current image, steps taken and a private stream.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub image: Tensor3,
    pub step_count: usize,
    rng: SeededRng,
}

impl ChainState {
    pub fn new(image: Tensor3, rng: SeededRng) -> Self {
        ChainState {
            image,
            step_count: 0,
            rng,
        }
    }

    pub fn rng(&self) -> &SeededRng {
        &self.rng
    }
}

/// `I/σ² − B_{w,δ(I)}`: gradient of the energy at `image`.
pub fn drift(net: &Network, image: &Tensor3) -> Result<Tensor3> {
    let (piece, _) = piece_at(net, image)?;
    let mut d = image.scaled(1.0 / net.sigma_sq());
    d.add_scaled(-1.0, &piece.basis)?;
    Ok(d)
}

/// Deterministic part of a Langevin step.
pub fn noise_free_step(net: &Network, image: &Tensor3, epsilon: f64) -> Result<Tensor3> {
    check_epsilon(epsilon)?;
    let mut next = image.clone();
    next.add_scaled(-0.5 * epsilon * epsilon, &drift(net, image)?)?;
    Ok(next)
}

pub fn langevin_step(net: &Network, image: &Tensor3, epsilon: f64, rng: &mut SeededRng) -> Result<Tensor3> {
    let mut next = noise_free_step(net, image, epsilon)?;
    for v in next.data_mut() {
        *v += epsilon * rng.standard_normal();
    }
    Ok(next)
}

/// Advances `chain` by `config.steps` Langevin steps.
pub fn langevin_run(net: &Network, chain: &mut ChainState, config: &LangevinConfig) -> Result<()> {
    check_epsilon(config.epsilon)?;
    for _ in 0..config.steps {
        let next = langevin_step(net, &chain.image, config.epsilon, &mut chain.rng)?;
        if !next.is_finite() {
            return Err(Error::Divergence {
                what: "Langevin chain",
                iteration: chain.step_count,
            });
        }
        chain.image = next;
        chain.step_count += 1;
    }
    Ok(())
}

/// Runs every chain independently; results do not depend on the schedule.
pub fn run_chains(net: &Network, chains: &mut [ChainState], config: &LangevinConfig) -> Result<()> {
    chains
        .par_iter_mut()
        .map(|c| langevin_run(net, c, config))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descent {
    pub image: Tensor3,
    pub converged: bool,
    pub steps: usize,
}

/// Iterates the noise-free update until the largest per-pixel change drops
/// below `tol` or `max_steps` is reached.
pub fn descend(net: &Network, image: &Tensor3, epsilon: f64, max_steps: usize, tol: f64) -> Result<Descent> {
    check_epsilon(epsilon)?;
    if !(tol > 0.0) {
        return Err(Error::param("tol", format!("must be positive, got {tol}")));
    }
    let mut cur = image.clone();
    for step in 1..=max_steps {
        let next = noise_free_step(net, &cur, epsilon)?;
        if !next.is_finite() {
            return Err(Error::Divergence {
                what: "descent",
                iteration: step,
            });
        }
        let change = next.max_abs_diff(&cur)?;
        cur = next;
        if change < tol {
            return Ok(Descent {
                image: cur,
                converged: true,
                steps: step,
            });
        }
    }
    Ok(Descent {
        image: cur,
        converged: false,
        steps: max_steps,
    })
}
