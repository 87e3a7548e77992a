//! Training-set ingestion and the invertible intensity mapping between
//! file values and model values.

use std::path::{Path, PathBuf};

use genconv::{Shape, Tensor3};
use serde::{Deserialize, Serialize};

use crate::config::{ColorMode, MeanMode, Preprocess};
use crate::error::{CliError, Result};
use crate::pnm;

/// `model = (file − mean) · scale`, and back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub color: ColorMode,
    pub mean_mode: MeanMode,
    pub shape: Shape,
    /// Channel-major, `shape.len()` entries; zeros when `mean_mode` is none.
    pub mean_image: Vec<f64>,
    pub scale: f64,
}

impl Preprocessing {
    /// Identity mapping (no mean, unit scale) for `shape`.
    pub fn identity(shape: Shape, color: ColorMode) -> Self {
        Preprocessing {
            color,
            mean_mode: MeanMode::None,
            shape,
            mean_image: vec![0.0; shape.len()],
            scale: 1.0,
        }
    }

    /// Fits the mean and scale on file-range images already brought to
    /// the common shape and colour.
    pub fn fit(images: &[Tensor3], color: ColorMode, mean_mode: MeanMode, standardize: bool) -> Self {
        let shape = images[0].shape();
        let m = images.len() as f64;
        let mut mean = vec![0.0; shape.len()];
        match mean_mode {
            MeanMode::None => {}
            MeanMode::Pixel => {
                for im in images {
                    for (a, v) in mean.iter_mut().zip(im.data()) {
                        *a += v / m;
                    }
                }
            }
            MeanMode::Channel => {
                let plane = shape.plane();
                for c in 0..shape.channels {
                    let mu = images.iter().map(|im| im.channel(c).iter().sum::<f64>()).sum::<f64>()
                        / (m * plane as f64);
                    mean[c * plane..(c + 1) * plane].fill(mu);
                }
            }
        }
        let mut prep = Preprocessing {
            color,
            mean_mode,
            shape,
            mean_image: mean,
            scale: 1.0,
        };
        if standardize {
            let n = m * shape.len() as f64;
            let centered: Vec<Tensor3> = images.iter().map(|im| prep.apply(im)).collect();
            let mu = centered.iter().map(Tensor3::sum).sum::<f64>() / n;
            let var = centered
                .iter()
                .flat_map(|t| t.data().iter().map(|v| (v - mu).powi(2)))
                .sum::<f64>()
                / n;
            if var > 0.0 {
                prep.scale = 1.0 / var.sqrt();
            }
        }
        prep
    }

    pub fn mean_tensor(&self) -> Tensor3 {
        Tensor3::from_vec(self.shape, self.mean_image.clone()).expect("mean image matches shape")
    }

    pub fn apply(&self, image: &Tensor3) -> Tensor3 {
        image.sub(&self.mean_tensor()).expect("image matches preprocessing shape").scaled(self.scale)
    }

    pub fn restore(&self, image: &Tensor3) -> Tensor3 {
        image.scaled(1.0 / self.scale).add(&self.mean_tensor()).expect("image matches preprocessing shape")
    }

    /// Brings a file image to this mapping's colour and size.
    pub fn conform(&self, raw: &Tensor3) -> Tensor3 {
        conform(raw, self.color, Some([self.shape.height, self.shape.width]))
    }
}

pub fn conform(raw: &Tensor3, color: ColorMode, size: Option<[usize; 2]>) -> Tensor3 {
    let c = match color {
        ColorMode::Gray => pnm::to_gray(raw),
        ColorMode::Rgb => pnm::to_rgb(raw),
    };
    match size {
        Some([h, w]) => pnm::resize_nearest(&c, h, w),
        None => c,
    }
}

/// `.pgm`/`.ppm`/`.pnm` files directly inside `dir`, sorted by file name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::config("data_dir", format!("no PGM/PPM images in {}", dir.display())));
    }
    Ok(files)
}

/// Loads, conforms and preprocesses a training set.
pub fn load_training_set(files: &[PathBuf], prep: &Preprocess) -> Result<(Preprocessing, Vec<Tensor3>)> {
    let mut images = Vec::with_capacity(files.len());
    for f in files {
        images.push(conform(&pnm::load_image(f)?, prep.color, prep.size));
    }
    let shape = images[0].shape();
    if let Some((f, im)) = files.iter().zip(&images).find(|(_, im)| im.shape() != shape) {
        return Err(CliError::config(
            "preprocess.size",
            format!(
                "{} is {}x{} but {} is {}x{}; set a common size",
                f.display(),
                im.shape().height,
                im.shape().width,
                files[0].display(),
                shape.height,
                shape.width
            ),
        ));
    }
    let p = Preprocessing::fit(&images, prep.color, prep.mean, prep.standardize);
    let model = images.iter().map(|im| p.apply(im)).collect();
    Ok((p, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64) -> Tensor3 {
        Tensor3::filled(Shape::new(1, 2, 2), v)
    }

    #[test]
    fn pixel_mean_of_two_images() {
        let p = Preprocessing::fit(&[flat(0.0), flat(100.0)], ColorMode::Gray, MeanMode::Pixel, false);
        assert!(p.mean_image.iter().all(|&m| m == 50.0));
        assert_eq!(p.apply(&flat(0.0)), flat(-50.0));
        assert_eq!(p.apply(&flat(100.0)), flat(50.0));
        assert_eq!(p.restore(&flat(-50.0)), flat(0.0));
    }

    #[test]
    fn channel_mean_keeps_single_image_structure() {
        let im = Tensor3::from_vec(Shape::new(1, 1, 4), vec![0.0, 10.0, 20.0, 30.0]).unwrap();
        let pixel = Preprocessing::fit(std::slice::from_ref(&im), ColorMode::Gray, MeanMode::Pixel, false);
        assert_eq!(pixel.apply(&im).max_abs(), 0.0);
        let chan = Preprocessing::fit(std::slice::from_ref(&im), ColorMode::Gray, MeanMode::Channel, true);
        let z = chan.apply(&im);
        assert!(z.mean().abs() < 1e-12);
        assert!((z.std() - 1.0).abs() < 1e-12);
        assert!(chan.restore(&z).max_abs_diff(&im).unwrap() < 1e-12);
    }

    #[test]
    fn constant_data_keeps_unit_scale() {
        let p = Preprocessing::fit(&[flat(7.0)], ColorMode::Gray, MeanMode::Channel, true);
        assert_eq!(p.scale, 1.0);
    }
}
