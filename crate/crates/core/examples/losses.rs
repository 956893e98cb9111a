//! Segmentation losses on a small imbalanced target: values, closed-form
//! gradients and the single-pixel curves.

use owpsnet::loss::{analytic_grad, emit_loss_curves, evaluate, GradFormula, LossConfig, LossKind};

fn main() -> owpsnet::Result<()> {
    let cfg = LossConfig::default();
    // Two foreground pixels out of ten, predicted with varying confidence.
    let t = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let p = [0.7, 0.4, 0.1, 0.2, 0.05, 0.1, 0.3, 0.1, 0.05, 0.1];
    for kind in LossKind::ALL {
        println!("{:>16}: {:.4}", kind.as_str(), evaluate(&cfg, kind, &p, &t)?);
    }

    let dice = analytic_grad(GradFormula::Dice, &p, &t)?;
    let square = analytic_grad(GradFormula::SquareDice, &p, &t)?;
    println!("dL/dp on the foreground pixels: dice {:.3?}, square dice {:.3?}", &dice[..2], &square[..2]);

    let out = std::env::temp_dir().join("owps_loss_curves.csv");
    emit_loss_curves(&out, &cfg)?;
    println!("curves written to {}", out.display());
    Ok(())
}
