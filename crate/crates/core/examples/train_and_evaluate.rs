//! Trains a small OWPSNet on synthetic scenes, evaluates it, and round-trips
//! the checkpoint. Takes about a minute on one core.

use owpsnet::data::{generate_dataset, SyntheticSceneConfig};
use owpsnet::loss::LossConfig;
use owpsnet::network::ModelConfig;
use owpsnet::postprocess::PostprocessConfig;
use owpsnet::trainer::{evaluate, load_checkpoint, save_checkpoint, train, EvalSet, TrainConfig};

fn main() -> owpsnet::Result<()> {
    let scenes = SyntheticSceneConfig { height: 32, width: 32, axis_min: 4.0, axis_max: 7.0, ..Default::default() };
    let train_set = generate_dataset(&scenes, 1, 32)?;
    let test_set = generate_dataset(&scenes, 2, 8)?;
    let model = ModelConfig { depth: 3, base_channels: 8, ..Default::default() };
    let cfg = TrainConfig { epochs: 20, eval_every: 5, ..Default::default() };
    let pp = PostprocessConfig::default();
    let eval = EvalSet { samples: &test_set, postprocess: pp };
    let outcome = train(&model, &LossConfig::default(), &cfg, &train_set, Some(eval), |row| {
        println!("{}", row.csv_row());
        Ok(())
    })?;

    let path = std::env::temp_dir().join("owps_example.owps");
    save_checkpoint(&outcome.params, &path)?;
    let mut loaded = load_checkpoint(&path)?;
    let report = evaluate(&mut loaded, &test_set, &pp)?;
    println!(
        "reloaded model: boundary dice {:.3}, particle dice {:.3}, count accuracy {:.2}",
        report.boundary_dice.unwrap_or(f64::NAN),
        report.particle_dice,
        report.count_accuracy
    );
    Ok(())
}
