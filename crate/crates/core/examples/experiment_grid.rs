//! A miniature loss-comparison grid written as a results CSV.

use owpsnet::data::{generate_dataset, SyntheticSceneConfig};
use owpsnet::loss::{LossConfig, LossKind};
use owpsnet::network::ModelConfig;
use owpsnet::postprocess::PostprocessConfig;
use owpsnet::trainer::{run_grid, GridBase, GridSpec, ModelVariant, TrainConfig};

fn main() -> owpsnet::Result<()> {
    let scenes = SyntheticSceneConfig { height: 32, width: 32, axis_min: 4.0, axis_max: 7.0, ..Default::default() };
    let train_set = generate_dataset(&scenes, 1, 16)?;
    let test_set = generate_dataset(&scenes, 2, 8)?;
    let spec = GridSpec {
        models: vec![ModelVariant::InBn, ModelVariant::UNet],
        losses: vec![(LossKind::Ce, LossKind::Ce), (LossKind::SquareDice, LossKind::SquareDice)],
        batches: vec![2],
    };
    let base = GridBase {
        model: ModelConfig { depth: 3, base_channels: 8, ..Default::default() },
        loss: LossConfig::default(),
        train: TrainConfig { epochs: 5, ..Default::default() },
        postprocess: PostprocessConfig::default(),
    };
    let out = std::env::temp_dir().join("owps_grid");
    run_grid(&spec, &base, &train_set, &test_set, &out, |i, row| {
        println!("cell {i}: {:?} {:?}", row.cell.model, row.result.as_ref().map(|r| r.particle_dice));
    })?;
    print!("{}", std::fs::read_to_string(out.join("results.csv")).unwrap());
    Ok(())
}
