//! Single-layer, whole-patch model: `f(I) = Σ_k ReLU(⟨I, w_k⟩ + b_k)`.
//!
//! The `K` hyperplanes `⟨I, w_k⟩ + b_k = 0` cut patch space into at most
//! `2^K` pieces. On piece `δ` the density is `N(σ² Σ_k δ_k w_k, σ²)`
//! truncated to the piece, so for small `K` every piece can be listed and
//! each Gaussian mean tested for membership in its own piece.

use crate::error::{Error, Result};
use crate::net::{LayerShape, LayerSpec, Network, TopMode};
use crate::tensor::{gaussian_noise, inner_product, sq_norm, SeededRng, Shape, Tensor3};

pub const MAX_ENUMERATED_FILTERS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeModel {
    patch: Shape,
    filters: Vec<Tensor3>,
    biases: Vec<f64>,
    sigma_sq: f64,
}

/// One piece of patch space and its Gaussian mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Piece {
    pub delta: Vec<bool>,
    pub mean: Tensor3,
    /// Whether the mean's own activation pattern is `delta`, i.e. the mean
    /// is an exactly auto-encoding local mode.
    pub mean_in_piece: bool,
}

impl PrototypeModel {
    pub fn new(patch: Shape, filters: Vec<Tensor3>, biases: Vec<f64>, sigma_sq: f64) -> Result<Self> {
        if filters.len() != biases.len() {
            return Err(Error::dim("PrototypeModel biases", filters.len(), biases.len()));
        }
        if let Some(f) = filters.iter().find(|f| f.shape() != patch) {
            return Err(Error::dim("PrototypeModel filter", patch, f.shape()));
        }
        if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
            return Err(Error::param("sigma_sq", format!("must be positive, got {sigma_sq}")));
        }
        if filters.iter().any(|f| !f.is_finite()) || biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::param("filters", "parameters must be finite"));
        }
        Ok(PrototypeModel {
            patch,
            filters,
            biases,
            sigma_sq,
        })
    }

    /// `K` filters with `N(0, weight_std²)` pixels and `N(0, bias_std²)` biases.
    pub fn random(rng: &mut SeededRng, patch: Shape, k: usize, weight_std: f64, bias_std: f64) -> Result<Self> {
        let filters = (0..k)
            .map(|_| gaussian_noise(patch, weight_std, rng))
            .collect::<Result<Vec<_>>>()?;
        let biases = (0..k).map(|_| bias_std * rng.standard_normal()).collect();
        Self::new(patch, filters, biases, 1.0)
    }

    pub fn patch_shape(&self) -> Shape {
        self.patch
    }

    pub fn filters(&self) -> &[Tensor3] {
        &self.filters
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn num_filters(&self) -> usize {
        self.filters.len()
    }

    fn responses(&self, patch: &Tensor3) -> Result<Vec<f64>> {
        self.filters
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| Ok(inner_product(patch, w)? + b))
            .collect()
    }

    /// `δ_k = 1(⟨I, w_k⟩ + b_k > 0)`.
    pub fn activation(&self, patch: &Tensor3) -> Result<Vec<bool>> {
        Ok(self.responses(patch)?.into_iter().map(|r| r > 0.0).collect())
    }

    /// `Σ_k δ_k w_k`.
    pub fn mean_for(&self, delta: &[bool]) -> Result<Tensor3> {
        if delta.len() != self.filters.len() {
            return Err(Error::dim("prototype activation", self.filters.len(), delta.len()));
        }
        let mut m = Tensor3::zeros(self.patch);
        for (w, _) in self.filters.iter().zip(delta).filter(|(_, &d)| d) {
            m.add_scaled(1.0, w)?;
        }
        Ok(m)
    }

    pub fn score(&self, patch: &Tensor3) -> Result<f64> {
        Ok(self.responses(patch)?.into_iter().map(|r| r.max(0.0)).sum())
    }

    /// `||I||² / (2σ²) − score(I)`.
    pub fn energy(&self, patch: &Tensor3) -> Result<f64> {
        Ok(sq_norm(patch) / (2.0 * self.sigma_sq) - self.score(patch)?)
    }

    /// Encode then decode: `σ² Σ_k δ_k(I) w_k`.
    pub fn reconstruct(&self, patch: &Tensor3) -> Result<Tensor3> {
        Ok(self.mean_for(&self.activation(patch)?)?.scaled(self.sigma_sq))
    }

    /// Every `δ ∈ {0,1}^K` with its Gaussian mean `σ² Σ δ_k w_k`.
    pub fn enumerate_pieces(&self) -> Result<Vec<Piece>> {
        let k = self.filters.len();
        if k > MAX_ENUMERATED_FILTERS {
            return Err(Error::TooLarge {
                what: "prototype filter count",
                size: k,
                limit: MAX_ENUMERATED_FILTERS,
            });
        }
        (0..1usize << k)
            .map(|bits| {
                let delta: Vec<bool> = (0..k).map(|j| bits >> j & 1 == 1).collect();
                let mean = self.mean_for(&delta)?.scaled(self.sigma_sq);
                let mean_in_piece = self.activation(&mean)? == delta;
                Ok(Piece {
                    delta,
                    mean,
                    mean_in_piece,
                })
            })
            .collect()
    }

    /// The same model as a one-layer conv-sum network whose kernels cover
    /// the whole patch.
    pub fn to_network(&self) -> Result<Network> {
        if self.filters.is_empty() {
            return Err(Error::param("filters", "a network needs at least one filter"));
        }
        let p = self.patch;
        let shape = LayerShape {
            filters: self.filters.len(),
            kernel_height: p.height,
            kernel_width: p.width,
            stride: p.height.max(p.width),
        };
        // Patch layout (c, y, x) matches the kernel layout (i, ky, kx).
        let weights = self.filters.iter().flat_map(|f| f.data().to_vec()).collect();
        let layer = LayerSpec::new(shape, p.channels, weights, self.biases.clone())?;
        Network::new(p, vec![layer], TopMode::ConvSum, self.sigma_sq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearize::piece_at;
    use crate::net::{forward, score_conv};

    fn model(filters: Vec<Vec<f64>>, biases: Vec<f64>) -> PrototypeModel {
        let patch = Shape::new(1, 1, filters.first().map_or(2, |f| f.len()));
        let filters = filters
            .into_iter()
            .map(|f| Tensor3::from_vec(patch, f).unwrap())
            .collect();
        PrototypeModel::new(patch, filters, biases, 1.0).unwrap()
    }

    #[test]
    fn activation_examples() {
        let m = model(vec![vec![1.0, -2.0], vec![0.5, 0.5]], vec![0.0, 0.0]);
        let zero = Tensor3::zeros(m.patch_shape());
        assert_eq!(m.activation(&zero).unwrap(), vec![false, false]);
        assert!(m.activation(&m.filters()[0]).unwrap()[0]);

        let mut rng = SeededRng::new(3);
        let r = PrototypeModel::random(&mut rng, Shape::new(1, 4, 4), 5, 1.0, 1.0).unwrap();
        let img = gaussian_noise(r.patch_shape(), 1.0, &mut rng).unwrap();
        let act = r.activation(&img).unwrap();
        for (k, a) in act.iter().enumerate() {
            let direct: f64 = img.data().iter().zip(r.filters()[k].data()).map(|(x, w)| x * w).sum();
            assert_eq!(*a, direct + r.biases()[k] > 0.0);
        }
        assert!(r.activation(&Tensor3::zeros(Shape::new(1, 2, 2))).is_err());
    }

    #[test]
    fn mean_examples() {
        let m = model(vec![vec![1.0, 2.0], vec![-3.0, 0.5]], vec![0.0, 0.0]);
        assert_eq!(m.mean_for(&[false, false]).unwrap().max_abs(), 0.0);
        assert_eq!(m.mean_for(&[true, false]).unwrap(), m.filters()[0]);
        assert_eq!(m.mean_for(&[true, true]).unwrap().data(), &[-2.0, 2.5]);
        assert!(m.mean_for(&[true]).is_err());
    }

    #[test]
    fn score_and_energy_examples() {
        let zero_model = model(vec![vec![1.0, 1.0]], vec![0.0]);
        let zero = Tensor3::zeros(zero_model.patch_shape());
        assert_eq!(zero_model.score(&zero).unwrap(), 0.0);
        assert_eq!(zero_model.energy(&zero).unwrap(), 0.0);

        // ||w||² = 4.
        let m = model(vec![vec![2.0, 0.0, 0.0, 0.0]], vec![0.0]);
        let w = m.filters()[0].clone();
        assert_eq!(m.score(&w).unwrap(), 4.0);
        assert_eq!(m.energy(&w).unwrap(), -2.0);
    }

    #[test]
    fn in_piece_mean_is_a_local_minimum() {
        let mut rng = SeededRng::new(8);
        let mut checked = 0;
        for _ in 0..10 {
            let m = PrototypeModel::random(&mut rng, Shape::new(1, 3, 3), 4, 1.0, 0.5).unwrap();
            for piece in m.enumerate_pieces().unwrap().into_iter().filter(|p| p.mean_in_piece) {
                let e0 = m.energy(&piece.mean).unwrap();
                for _ in 0..20 {
                    let mut probe = piece.mean.clone();
                    probe.add_scaled(1e-3, &gaussian_noise(m.patch_shape(), 1.0, &mut rng).unwrap()).unwrap();
                    if m.activation(&probe).unwrap() == piece.delta {
                        assert!(m.energy(&probe).unwrap() >= e0);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn enumeration_single_filter() {
        let m = model(vec![vec![1.5, -0.5]], vec![0.0]);
        let pieces = m.enumerate_pieces().unwrap();
        assert_eq!(pieces.len(), 2);
        assert_eq!(pieces[0].delta, vec![false]);
        assert_eq!(pieces[0].mean.max_abs(), 0.0);
        assert!(pieces[0].mean_in_piece);
        assert_eq!(pieces[1].mean, m.filters()[0]);
        assert!(pieces[1].mean_in_piece);
    }

    #[test]
    fn enumeration_opposed_filters() {
        let m = model(vec![vec![1.0, 2.0], vec![-1.0, -2.0]], vec![0.0, 0.0]);
        let both = m
            .enumerate_pieces()
            .unwrap()
            .into_iter()
            .find(|p| p.delta == vec![true, true])
            .unwrap();
        assert_eq!(both.mean.max_abs(), 0.0);
        assert!(!both.mean_in_piece);
    }

    #[test]
    fn enumeration_degenerate_and_too_large() {
        let patch = Shape::new(1, 2, 2);
        let empty = PrototypeModel::new(patch, vec![], vec![], 1.0).unwrap();
        let pieces = empty.enumerate_pieces().unwrap();
        assert_eq!(pieces.len(), 1);
        assert_eq!(pieces[0].mean.max_abs(), 0.0);
        assert!(pieces[0].mean_in_piece);

        let big = PrototypeModel::random(&mut SeededRng::new(0), patch, 21, 1.0, 1.0).unwrap();
        assert!(matches!(big.enumerate_pieces(), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn in_piece_means_auto_encode_exactly() {
        let mut rng = SeededRng::new(12);
        for _ in 0..20 {
            let m = PrototypeModel::random(&mut rng, Shape::new(1, 4, 4), 6, 1.0, 1.0).unwrap();
            for p in m.enumerate_pieces().unwrap().iter().filter(|p| p.mean_in_piece) {
                assert_eq!(m.reconstruct(&p.mean).unwrap(), p.mean);
            }
        }
    }

    #[test]
    fn network_encoding_agrees() {
        let mut rng = SeededRng::new(21);
        for _ in 0..10 {
            let m = PrototypeModel::random(&mut rng, Shape::new(2, 5, 4), 5, 0.7, 0.5).unwrap();
            let net = m.to_network().unwrap();
            for _ in 0..10 {
                let img = gaussian_noise(m.patch_shape(), 1.0, &mut rng).unwrap();
                let s = score_conv(&net, &img).unwrap();
                assert!((s - m.score(&img).unwrap()).abs() <= 1e-10);
                let (_, pattern) = forward(&net, &img).unwrap();
                let delta: Vec<bool> = pattern.layers[0].data().iter().map(|&v| v > 0.0).collect();
                assert_eq!(delta, m.activation(&img).unwrap());
                let (piece, _) = piece_at(&net, &img).unwrap();
                let mean = m.mean_for(&delta).unwrap();
                assert!(piece.basis.max_abs_diff(&mean).unwrap() <= 1e-10);
            }
        }
    }
}
