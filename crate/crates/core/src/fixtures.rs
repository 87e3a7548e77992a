//! Random networks and images used by the verification suite and tests.

use rand::Rng;

use crate::net::{ArchSpec, CategoryHeads, LayerShape, LayerSpec, Network, TopMode};
use crate::oracle::CategoryModel;
use crate::tensor::{gaussian_noise, SeededRng, Shape, Tensor3};

/// Random valid architecture of the given depth: 1–4 filters per layer,
/// kernels of 2–3 (clipped to the available extent), stride 1 or 2.
pub fn random_arch(rng: &mut SeededRng, input: Shape, depth: usize) -> ArchSpec {
    let mut layers = Vec::with_capacity(depth);
    let mut cur = input;
    for l in 0..depth {
        let remaining = depth - l - 1;
        let filters = rng.random_range(1..=4);
        let mut kernel = rng.random_range(2..=3usize).min(cur.height).min(cur.width);
        let mut stride = rng.random_range(1..=2usize);
        // Keep room for the layers still to come.
        let fits = |k: usize, s: usize| {
            LayerShape::new(filters, k, s)
                .output_shape(cur)
                .is_some_and(|o| o.height > remaining && o.width > remaining)
        };
        if !fits(kernel, stride) {
            stride = 1;
        }
        while kernel > 1 && !fits(kernel, stride) {
            kernel -= 1;
        }
        let shape = LayerShape::new(filters, kernel, stride);
        cur = shape.output_shape(cur).expect("kernel fits by construction");
        layers.push(shape);
    }
    ArchSpec { input, layers }
}

/// Conv-sum network over `arch` with He-scaled Gaussian weights and
/// `N(0, 0.1²)` biases.
pub fn random_net_for(rng: &mut SeededRng, arch: &ArchSpec) -> Network {
    let shapes = arch.map_shapes().expect("valid architecture");
    let layers = arch
        .layers
        .iter()
        .enumerate()
        .map(|(l, shape)| {
            let in_ch = shapes[l].channels;
            let fan_in = (in_ch * shape.kernel_height * shape.kernel_width) as f64;
            let std = (2.0 / fan_in).sqrt();
            let n = shape.filters * in_ch * shape.kernel_height * shape.kernel_width;
            let weights = (0..n).map(|_| std * rng.standard_normal()).collect();
            let biases = (0..shape.filters).map(|_| 0.1 * rng.standard_normal()).collect();
            LayerSpec::new(*shape, in_ch, weights, biases).expect("consistent layer")
        })
        .collect();
    Network::new(arch.input, layers, TopMode::ConvSum, 1.0).expect("consistent network")
}

pub fn random_conv_net(rng: &mut SeededRng, input: Shape, depth: usize) -> Network {
    let arch = random_arch(rng, input, depth);
    random_net_for(rng, &arch)
}

/// Image with i.i.d. standard normal pixels.
pub fn random_image(rng: &mut SeededRng, shape: Shape) -> Tensor3 {
    gaussian_noise(shape, 1.0, rng).expect("positive sigma")
}

/// Two-layer conv-sum net on 2×2 inputs (`filters` vertical 2×1 filters,
/// one horizontal 1×2 top filter), small enough for exhaustive grids.
pub fn grid_net(rng: &mut SeededRng, filters: usize) -> Network {
    let l1 = LayerSpec::new(
        LayerShape {
            filters,
            kernel_height: 2,
            kernel_width: 1,
            stride: 1,
        },
        1,
        (0..filters * 2).map(|_| rng.standard_normal()).collect(),
        (0..filters).map(|_| 0.3 * rng.standard_normal()).collect(),
    )
    .unwrap();
    let l2 = LayerSpec::new(
        LayerShape {
            filters: 1,
            kernel_height: 1,
            kernel_width: 2,
            stride: 1,
        },
        filters,
        (0..filters * 2).map(|_| rng.standard_normal()).collect(),
        vec![0.1],
    )
    .unwrap();
    Network::new(Shape::new(1, 2, 2), vec![l1, l2], TopMode::ConvSum, 1.0).unwrap()
}

/// Single-layer trunk on 2×2 inputs with `categories` linear heads. With
/// `base_reference`, category 0 has zero head weights and bias.
pub fn category_model(rng: &mut SeededRng, categories: usize, base_reference: bool) -> CategoryModel {
    let filters = 3;
    let l = LayerSpec::new(
        LayerShape::new(filters, 2, 1),
        1,
        (0..filters * 4).map(|_| rng.standard_normal()).collect(),
        (0..filters).map(|_| 0.2 * rng.standard_normal()).collect(),
    )
    .unwrap();
    let mut weights: Vec<Vec<f64>> = (0..categories)
        .map(|_| (0..filters).map(|_| rng.standard_normal()).collect())
        .collect();
    let mut biases: Vec<f64> = (0..categories).map(|_| rng.standard_normal()).collect();
    if base_reference {
        weights[0] = vec![0.0; filters];
        biases[0] = 0.0;
    }
    let net = Network::new(
        Shape::new(1, 2, 2),
        vec![l],
        TopMode::CategoryHeads(CategoryHeads { weights, biases }),
        1.0,
    )
    .unwrap();
    let raw: Vec<f64> = (0..categories).map(|_| 0.2 + rng.uniform()).collect();
    let s: f64 = raw.iter().sum();
    CategoryModel::new(net, raw.iter().map(|r| r / s).collect()).unwrap()
}
