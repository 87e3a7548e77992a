//! Per-piece affine form of the score, `f(I) = alpha + ⟨I, B⟩`.
//!
//! Two independent routes produce `B`:
//!
//! * [`top_down`] runs the deconvolution `B_{l-1} = Σ_{k,x} B_l[k,x] δ_l[k,x] w_{k,x}`
//!   from `B_L = 1`, scattering translated kernels gated by the stored pattern.
//! * [`grad_score`] is reverse-mode differentiation of the score, gathering
//!   contributions per input pixel and gating on the sign of the feature maps.
//!
//! Biases enter `alpha` through `alpha_{l-1} = alpha_l + Σ_{k,x} B_l[k,x] δ_l[k,x] b_k`
//! with `alpha_L = 0`.

use crate::error::{Error, Result};
use crate::learner::{LayerGrad, ParamGrad};
use crate::net::{forward, score_conv, ActivationPattern, FeatureMaps, LayerSpec, Network, TopMode};
use crate::tensor::{inner_product, sq_norm, Shape, Tensor3};

/// Affine form of the score on one activation piece.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPiece {
    pub alpha: f64,
    /// `B`: gradient of the score on the piece, and the mean of the piece's
    /// Gaussian when σ² = 1.
    pub basis: Tensor3,
}

impl LinearPiece {
    pub fn eval(&self, image: &Tensor3) -> Result<f64> {
        Ok(self.alpha + inner_product(image, &self.basis)?)
    }
}

fn require_conv_sum(net: &Network) -> Result<()> {
    match net.top_mode() {
        TopMode::ConvSum => Ok(()),
        TopMode::CategoryHeads(_) => Err(Error::TopMode { expected: "ConvSum" }),
    }
}

/// Top-down deconvolution of `pattern` through `net`.
pub fn top_down(net: &Network, pattern: &ActivationPattern) -> Result<LinearPiece> {
    require_conv_sum(net)?;
    let shapes = net.map_shapes();
    if pattern.layers.len() != net.depth() {
        return Err(Error::dim("top_down pattern depth", net.depth(), pattern.layers.len()));
    }
    for (l, d) in pattern.layers.iter().enumerate() {
        if d.shape() != shapes[l + 1] {
            return Err(Error::dim("top_down pattern", shapes[l + 1], d.shape()));
        }
    }

    let mut coeff = Tensor3::filled(*shapes.last().unwrap(), 1.0);
    let mut alpha = 0.0;
    for l in (0..net.depth()).rev() {
        let layer = &net.layers()[l];
        let mut gated = coeff;
        for (g, d) in gated.data_mut().iter_mut().zip(pattern.layers[l].data()) {
            *g *= d;
        }
        let plane = shapes[l + 1].plane();
        for (k, b) in layer.biases().iter().enumerate() {
            alpha += b * gated.data()[k * plane..(k + 1) * plane].iter().sum::<f64>();
        }
        coeff = scatter_kernels(layer, &gated, shapes[l]);
    }
    Ok(LinearPiece { alpha, basis: coeff })
}

/// `Σ_{k,x} coeff[k,x] · w_{k,x}` where `w_{k,x}` is kernel `k` translated to
/// the window of output position `x`.
fn scatter_kernels(layer: &LayerSpec, coeff: &Tensor3, below: Shape) -> Tensor3 {
    let shape = layer.shape();
    let s = shape.stride;
    let (oh, ow) = (coeff.shape().height, coeff.shape().width);
    let mut out = Tensor3::zeros(below);
    let bw = below.width;
    let bplane = below.plane();
    let out_data = out.data_mut();
    for k in 0..shape.filters {
        let src = coeff.channel(k);
        if src.iter().all(|&v| v == 0.0) {
            continue;
        }
        for i in 0..layer.in_channels() {
            let dst = &mut out_data[i * bplane..(i + 1) * bplane];
            for ky in 0..shape.kernel_height {
                for kx in 0..shape.kernel_width {
                    let w = layer.weight(k, i, ky, kx);
                    for oy in 0..oh {
                        let row = &mut dst[(oy * s + ky) * bw..];
                        for (ox, &c) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            row[ox * s + kx] += w * c;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of one layer computed per input entry: for every position of the
/// layer below, collect `w[k,i,ky,kx] · upstream[k, oy, ox]` over all output
/// windows that cover it.
fn gather_adjoint(layer: &LayerSpec, upstream: &Tensor3, below: Shape) -> Tensor3 {
    let shape = layer.shape();
    let s = shape.stride;
    let (oh, ow) = (upstream.shape().height, upstream.shape().width);
    let (kh, kw) = (shape.kernel_height, shape.kernel_width);
    Tensor3::from_fn(below, |i, y, x| {
        let mut acc = 0.0;
        let mut ky = y % s;
        while ky < kh && ky <= y {
            let oy = (y - ky) / s;
            if oy < oh {
                let mut kx = x % s;
                while kx < kw && kx <= x {
                    let ox = (x - kx) / s;
                    if ox < ow {
                        for k in 0..shape.filters {
                            acc += layer.weight(k, i, ky, kx) * upstream.get(k, oy, ox);
                        }
                    }
                    kx += s;
                }
            }
            ky += s;
        }
        acc
    })
}

/// Reverse-mode pass of the conv-sum score through the stored forward maps.
///
/// Returns `∂f/∂I` when `want_input` and `∂f/∂w` when `want_params`. ReLU
/// derivatives are `1(F > 0)`, i.e. zero at exactly zero.
pub(crate) fn reverse_pass(
    net: &Network,
    fm: &FeatureMaps,
    want_input: bool,
    want_params: bool,
) -> (Option<Tensor3>, Option<ParamGrad>) {
    let depth = net.depth();
    let mut upstream = fm.maps[depth].map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(if want_params { depth } else { 0 });
    let mut input_grad = None;
    for l in (0..depth).rev() {
        let layer = &net.layers()[l];
        let below = &fm.maps[l];
        if want_params {
            grads.push(layer_param_grad(layer, &upstream, below));
        }
        if l > 0 {
            let mut g = gather_adjoint(layer, &upstream, below.shape());
            for (gv, &fv) in g.data_mut().iter_mut().zip(below.data()) {
                if fv <= 0.0 {
                    *gv = 0.0;
                }
            }
            upstream = g;
        } else if want_input {
            input_grad = Some(gather_adjoint(layer, &upstream, below.shape()));
        }
    }
    let params = want_params.then(|| {
        grads.reverse();
        ParamGrad { layers: grads }
    });
    (input_grad, params)
}

fn layer_param_grad(layer: &LayerSpec, upstream: &Tensor3, below: &Tensor3) -> LayerGrad {
    let shape = layer.shape();
    let s = shape.stride;
    let (oh, ow) = (upstream.shape().height, upstream.shape().width);
    let bw = below.shape().width;
    let mut weights = vec![0.0; layer.weights().len()];
    let mut biases = vec![0.0; shape.filters];
    for k in 0..shape.filters {
        let g = upstream.channel(k);
        biases[k] = g.iter().sum();
        if biases[k] == 0.0 && g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for i in 0..layer.in_channels() {
            let src = below.channel(i);
            for ky in 0..shape.kernel_height {
                for kx in 0..shape.kernel_width {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let row = &src[(oy * s + ky) * bw..];
                        for (ox, &gv) in g[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            acc += gv * row[ox * s + kx];
                        }
                    }
                    weights[layer.weight_index(k, i, ky, kx)] = acc;
                }
            }
        }
    }
    LayerGrad { weights, biases }
}

/// `∂f(I; w)/∂I` by back-propagation.
pub fn grad_score(net: &Network, image: &Tensor3) -> Result<Tensor3> {
    require_conv_sum(net)?;
    let (fm, _) = forward(net, image)?;
    let (g, _) = reverse_pass(net, &fm, true, false);
    Ok(g.expect("input gradient requested"))
}

/// Bottom-up encoding followed by top-down decoding at `image`.
pub fn piece_at(net: &Network, image: &Tensor3) -> Result<(LinearPiece, ActivationPattern)> {
    require_conv_sum(net)?;
    let (_, pattern) = forward(net, image)?;
    let piece = top_down(net, &pattern)?;
    Ok((piece, pattern))
}

/// `U(I) = ||I||² / (2σ²) − f(I; w)`.
pub fn energy(net: &Network, image: &Tensor3) -> Result<f64> {
    Ok(sq_norm(image) / (2.0 * net.sigma_sq()) - score_conv(net, image)?)
}

/// Moves `image` along `direction` by the largest radius `radius · 0.5^j`
/// (`j < 40`) that keeps the activation pattern unchanged. `None` means the
/// image sits on a piece boundary in that direction.
pub fn perturb_within_piece(
    net: &Network,
    image: &Tensor3,
    direction: &Tensor3,
    radius: f64,
) -> Result<Option<(Tensor3, f64)>> {
    let (_, base) = forward(net, image)?;
    let mut r = radius;
    for _ in 0..40 {
        let mut probe = image.clone();
        probe.add_scaled(r, direction)?;
        let (_, p) = forward(net, &probe)?;
        if p == base {
            return Ok(Some((probe, r)));
        }
        r *= 0.5;
    }
    Ok(None)
}
