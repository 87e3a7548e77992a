//! ReLU ConvNet architecture and the bottom-up pass.
//!
//! Layer `l` maps the `N_{l-1}`-channel feature stack to `N_l` channels by a
//! valid (unpadded) strided convolution followed by ReLU:
//!
//! ```text
//! pre[k, x]  = b_k + Σ_i Σ_y w[k, i, y] · F_{l-1}[i, stride·x + y]
//! F_l[k, x]  = δ[k, x] · pre[k, x],   δ[k, x] = 1(pre[k, x] > 0)
//! ```
//!
//! Output extent per axis is `(in - kernel) / stride + 1` (floor).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gaussian_noise, SeededRng, Shape, Tensor3};

/// Geometry of one convolutional layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub filters: usize,
    pub kernel_height: usize,
    pub kernel_width: usize,
    pub stride: usize,
}

impl LayerShape {
    pub const fn new(filters: usize, kernel: usize, stride: usize) -> Self {
        LayerShape {
            filters,
            kernel_height: kernel,
            kernel_width: kernel,
            stride,
        }
    }

    /// Output shape of this layer applied to `input`, or `None` when the
    /// kernel does not fit.
    pub fn output_shape(&self, input: Shape) -> Option<Shape> {
        if self.kernel_height > input.height || self.kernel_width > input.width {
            return None;
        }
        Some(Shape::new(
            self.filters,
            (input.height - self.kernel_height) / self.stride + 1,
            (input.width - self.kernel_width) / self.stride + 1,
        ))
    }
}

/// Input shape plus the ordered list of layer geometries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: Shape,
    pub layers: Vec<LayerShape>,
}

impl ArchSpec {
    /// Shapes of the feature maps of layers `0..=L` (entry 0 is the input).
    pub fn map_shapes(&self) -> Result<Vec<Shape>> {
        if self.input.is_empty() {
            return Err(Error::param("input", "all extents must be positive"));
        }
        let mut shapes = vec![self.input];
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.filters == 0
                || layer.kernel_height == 0
                || layer.kernel_width == 0
                || layer.stride == 0
            {
                return Err(Error::param(
                    "layers",
                    format!("layer {} has a zero filter count, kernel extent or stride", l + 1),
                ));
            }
            let prev = *shapes.last().unwrap();
            let out = layer.output_shape(prev).ok_or_else(|| {
                Error::param(
                    "layers",
                    format!(
                        "layer {} kernel {}x{} does not fit input {}x{}",
                        l + 1,
                        layer.kernel_height,
                        layer.kernel_width,
                        prev.height,
                        prev.width
                    ),
                )
            })?;
            shapes.push(out);
        }
        Ok(shapes)
    }
}

/// Parameters of one layer. Weights are indexed `(k, i, ky, kx)`, flat in
/// that order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    shape: LayerShape,
    in_channels: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl LayerSpec {
    pub fn new(shape: LayerShape, in_channels: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        let expected = shape.filters * in_channels * shape.kernel_height * shape.kernel_width;
        if weights.len() != expected {
            return Err(Error::dim("LayerSpec weights", expected, weights.len()));
        }
        if biases.len() != shape.filters {
            return Err(Error::dim("LayerSpec biases", shape.filters, biases.len()));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::param("weights", "parameters must be finite"));
        }
        Ok(LayerSpec {
            shape,
            in_channels,
            weights,
            biases,
        })
    }

    pub fn zeros(shape: LayerShape, in_channels: usize) -> Self {
        let n = shape.filters * in_channels * shape.kernel_height * shape.kernel_width;
        LayerSpec {
            shape,
            in_channels,
            weights: vec![0.0; n],
            biases: vec![0.0; shape.filters],
        }
    }

    pub fn shape(&self) -> LayerShape {
        self.shape
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    #[inline]
    pub fn weight_index(&self, k: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((k * self.in_channels + i) * self.shape.kernel_height + ky) * self.shape.kernel_width + kx
    }

    #[inline]
    pub fn weight(&self, k: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[self.weight_index(k, i, ky, kx)]
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// Pre-activations of this layer for the feature stack `input`.
    pub(crate) fn pre_activation(&self, input: &Tensor3, out_shape: Shape) -> Tensor3 {
        let s = self.shape.stride;
        let (kh, kw) = (self.shape.kernel_height, self.shape.kernel_width);
        let (oh, ow) = (out_shape.height, out_shape.width);
        let in_shape = input.shape();
        let mut out = Tensor3::zeros(out_shape);
        let plane = oh * ow;
        let out_data = out.data_mut();
        for k in 0..self.shape.filters {
            let dst = &mut out_data[k * plane..(k + 1) * plane];
            dst.fill(self.biases[k]);
            for i in 0..self.in_channels {
                let src = input.channel(i);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = self.weight(k, i, ky, kx);
                        for oy in 0..oh {
                            let row = &src[(oy * s + ky) * in_shape.width..];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d += w * row[ox * s + kx];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Per-category linear heads on 1×1 top-layer maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryHeads {
    /// `weights[c][k]` multiplies top-layer channel `k` for category `c`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl CategoryHeads {
    pub fn num_categories(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TopMode {
    /// Score is the sum of every top-layer response over the top domain.
    ConvSum,
    /// Score of category `c` is `Σ_k w[c][k] · F_L[k]` on 1×1 top maps.
    CategoryHeads(CategoryHeads),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input: Shape,
    layers: Vec<LayerSpec>,
    top_mode: TopMode,
    sigma_sq: f64,
}

impl Network {
    pub fn new(input: Shape, layers: Vec<LayerSpec>, top_mode: TopMode, sigma_sq: f64) -> Result<Self> {
        if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
            return Err(Error::param("sigma_sq", format!("must be positive, got {sigma_sq}")));
        }
        let net = Network {
            input,
            layers,
            top_mode,
            sigma_sq,
        };
        let shapes = net.arch().map_shapes()?;
        let mut prev = input.channels;
        for (l, layer) in net.layers.iter().enumerate() {
            if layer.in_channels != prev {
                return Err(Error::dim(
                    "layer input channels",
                    prev,
                    format!("{} (layer {})", layer.in_channels, l + 1),
                ));
            }
            prev = layer.shape.filters;
        }
        if let TopMode::CategoryHeads(heads) = &net.top_mode {
            let top = *shapes.last().unwrap();
            if heads.weights.is_empty() || heads.weights.len() != heads.biases.len() {
                return Err(Error::dim("category heads", heads.weights.len(), heads.biases.len()));
            }
            if let Some(w) = heads.weights.iter().find(|w| w.len() != top.channels) {
                return Err(Error::dim("category head weights", top.channels, w.len()));
            }
        }
        Ok(net)
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerSpec {
        &mut self.layers[l]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn top_mode(&self) -> &TopMode {
        &self.top_mode
    }

    pub fn top_mode_mut(&mut self) -> &mut TopMode {
        &mut self.top_mode
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            input: self.input,
            layers: self.layers.iter().map(|l| l.shape).collect(),
        }
    }

    /// Feature-map shapes for layers `0..=L`.
    pub fn map_shapes(&self) -> Vec<Shape> {
        self.arch()
            .map_shapes()
            .expect("network geometry validated at construction")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::num_params).sum()
    }

    /// All weights and biases, layer by layer (weights then biases).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.biases);
        }
        v
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dim("Network::set_params_flat", self.num_params(), params.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Conv-sum network made of the first `n` layers.
    pub fn prefix(&self, n: usize) -> Result<Network> {
        if n == 0 || n > self.layers.len() {
            return Err(Error::param("layers", format!("prefix length {n} out of range")));
        }
        Network::new(self.input, self.layers[..n].to_vec(), TopMode::ConvSum, self.sigma_sq)
    }

    /// Overwrites the leading layers with those of `other`.
    pub fn copy_prefix_from(&mut self, other: &Network) -> Result<()> {
        if other.layers.len() > self.layers.len() {
            return Err(Error::dim("Network::copy_prefix_from", self.layers.len(), other.layers.len()));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            if dst.shape != src.shape || dst.in_channels != src.in_channels {
                return Err(Error::dim("Network::copy_prefix_from", "matching layer", "different geometry"));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    fn check_input(&self, image: &Tensor3) -> Result<()> {
        if image.shape() != self.input {
            return Err(Error::dim("network input", self.input, image.shape()));
        }
        Ok(())
    }
}

/// Feature maps `F_0 = I, F_1, ..., F_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    pub maps: Vec<Tensor3>,
}

impl FeatureMaps {
    pub fn top(&self) -> &Tensor3 {
        self.maps.last().unwrap()
    }
}

/// Binary activation maps `δ_1, ..., δ_L` (entries exactly 0.0 or 1.0).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationPattern {
    pub layers: Vec<Tensor3>,
}

impl ActivationPattern {
    pub fn active_count(&self) -> usize {
        self.layers
            .iter()
            .map(|t| t.data().iter().filter(|&&v| v > 0.0).count())
            .sum()
    }

    /// Number of units whose state differs from `other`.
    pub fn hamming(&self, other: &ActivationPattern) -> usize {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count())
            .sum()
    }
}

/// Bottom-up pass: feature maps of every layer and the activation pattern.
pub fn forward(net: &Network, image: &Tensor3) -> Result<(FeatureMaps, ActivationPattern)> {
    net.check_input(image)?;
    let shapes = net.map_shapes();
    let mut maps = Vec::with_capacity(net.layers.len() + 1);
    let mut pattern = Vec::with_capacity(net.layers.len());
    maps.push(image.clone());
    for (l, layer) in net.layers.iter().enumerate() {
        let mut pre = layer.pre_activation(&maps[l], shapes[l + 1]);
        let mut delta = Tensor3::zeros(shapes[l + 1]);
        for (r, d) in pre.data_mut().iter_mut().zip(delta.data_mut()) {
            if *r > 0.0 {
                *d = 1.0;
            } else {
                *r = 0.0;
            }
        }
        maps.push(pre);
        pattern.push(delta);
    }
    Ok((FeatureMaps { maps }, ActivationPattern { layers: pattern }))
}

/// Sum of all top-layer responses. Requires [`TopMode::ConvSum`].
pub fn score_conv(net: &Network, image: &Tensor3) -> Result<f64> {
    if !matches!(net.top_mode, TopMode::ConvSum) {
        return Err(Error::TopMode { expected: "ConvSum" });
    }
    let (fm, _) = forward(net, image)?;
    Ok(fm.top().sum())
}

/// `f_c(I) = Σ_k w[c][k] · F_L[k]` on 1×1 top maps.
pub fn score_category(net: &Network, image: &Tensor3, c: usize) -> Result<f64> {
    let TopMode::CategoryHeads(heads) = &net.top_mode else {
        return Err(Error::TopMode {
            expected: "CategoryHeads",
        });
    };
    if c >= heads.num_categories() {
        return Err(Error::param("category", format!("{c} out of range")));
    }
    let (fm, _) = forward(net, image)?;
    let top = fm.top();
    if top.shape().height != 1 || top.shape().width != 1 {
        return Err(Error::dim(
            "score_category top maps",
            "1x1",
            format!("{}x{}", top.shape().height, top.shape().width),
        ));
    }
    Ok(heads.weights[c].iter().zip(top.data()).map(|(w, v)| w * v).sum())
}

/// Softmax of `scores[c] + biases[c]`, stabilized by max subtraction.
pub fn softmax_posterior(scores: &[f64], biases: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != biases.len() {
        return Err(Error::dim("softmax_posterior", scores.len(), biases.len()));
    }
    if scores.is_empty() {
        return Err(Error::param("scores", "need at least one category"));
    }
    let logits: Vec<f64> = scores.iter().zip(biases).map(|(f, b)| f + b).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Conv-sum network with `N(0, init_std²)` weights and zero biases, σ² = 1.
pub fn init_network(arch: &ArchSpec, init_std: f64, rng: &mut SeededRng) -> Result<Network> {
    if !(init_std >= 0.0) || !init_std.is_finite() {
        return Err(Error::param("init_std", format!("must be non-negative, got {init_std}")));
    }
    let shapes = arch.map_shapes()?;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (l, shape) in arch.layers.iter().enumerate() {
        let mut layer = LayerSpec::zeros(*shape, shapes[l].channels);
        if init_std > 0.0 {
            let n = layer.weights.len();
            let noise = gaussian_noise(Shape::new(1, 1, n), init_std, rng)?;
            layer.weights.copy_from_slice(noise.data());
        }
        layers.push(layer);
    }
    Network::new(arch.input, layers, TopMode::ConvSum, 1.0)
}
