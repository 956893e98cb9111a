//! Builds OWPSNet and the plain U-Net baseline and runs a forward pass.

use owpsnet::network::{build_model, predict, ModelConfig};
use owpsnet::{Init, Tensor};

fn main() -> owpsnet::Result<()> {
    for (name, cfg) in [
        ("OWPSNet", ModelConfig::default()),
        ("OWPSNet without refine", ModelConfig { refine_enabled: false, ..ModelConfig::default() }),
        ("U-Net", ModelConfig::unet_baseline()),
    ] {
        let model = build_model(&cfg, 0)?;
        println!("{name:>24}: {} parameters in {} tensors", model.num_parameters(), model.params().len());
    }

    // A fresh model has no running statistics, so predict with a model
    // whose normalization is batch-independent.
    let cfg =
        ModelConfig { norm: owpsnet::norm::NormConfig::new(owpsnet::norm::NormVariant::In), ..ModelConfig::default() };
    let mut model = build_model(&cfg, 0)?;
    let image: Tensor<f32> = Tensor::create(&[1, 3, 64, 64], Init::Uniform { seed: 2, lo: 0.0, hi: 1.0 })?;
    let (region, edge) = predict(&mut model, &image)?;
    println!("region map {:?}, edge map {:?}", region.shape(), edge.map(|e| e.shape().to_vec()));
    Ok(())
}
