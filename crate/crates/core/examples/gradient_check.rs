//! Backpropagated gradients against central finite differences.

use std::error::Error;

use fda_core::datagen::{gen_blobs, BlobSpec};
use fda_core::linalg::ParamVector;
use fda_core::model::{gradient, loss, Arch, Dataset, Model, Targets};
use fda_core::rng;
use rand::Rng;

fn max_rel_error(model: &Model, data: &Dataset, h: f64) -> Result<f64, Box<dyn Error>> {
    let analytic = gradient(model, data)?.to_flat();
    let theta = model.params().to_flat();
    let layout = model.params().layout();
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let mut shifted = theta.clone();
        shifted[k] = theta[k] + h;
        let up = loss(
            &model.with_params(ParamVector::from_flat_with_layout(&layout, &shifted)?)?,
            data,
        )?;
        shifted[k] = theta[k] - h;
        let down = loss(
            &model.with_params(ParamVector::from_flat_with_layout(&layout, &shifted)?)?,
            data,
        )?;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    Ok(worst)
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let mut r = rng::stream(8, "example-data", &[]);
    let x: Vec<f64> = (0..6 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..6 * 2).map(|_| r.random_range(-1.0..1.0)).collect();
    let regression = Dataset::new("regression", 3, 2, x, Targets::Regression(y))?;
    let model = Model::init(Arch::MlpRegression, 3, 5, 2, &mut rng::stream(8, "example-init", &[]))?;
    println!(
        "regression     max rel error {:.2e}",
        max_rel_error(&model, &regression, 1e-5)?
    );

    let blobs = gen_blobs(
        &BlobSpec {
            input_dim: 4,
            n_classes: 3,
            ..BlobSpec::new(9, 8)
        },
        0,
    )?;
    let model = Model::init(Arch::MlpClassifier, 4, 5, 3, &mut rng::stream(8, "example-init", &[1]))?;
    println!(
        "classification max rel error {:.2e}",
        max_rel_error(&model, &blobs, 1e-5)?
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
