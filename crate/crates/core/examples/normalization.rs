//! The five normalization variants on one feature map, and batch-norm
//! running statistics switching between train and eval mode.

use owpsnet::norm::{composite_norm, Mode, NormConfig, NormVariant, RunningStats};
use owpsnet::{Init, Tape, Tensor};

fn plane_mean_var(d: &[f32]) -> (f32, f32) {
    let m = d.iter().sum::<f32>() / d.len() as f32;
    (m, d.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / d.len() as f32)
}

fn main() -> owpsnet::Result<()> {
    let (n, c, h, w) = (2, 3, 8, 8);
    let x: Tensor<f32> = Tensor::create(&[n, c, h, w], Init::Uniform { seed: 1, lo: -2.0, hi: 6.0 })?;

    for variant in NormVariant::ALL {
        let cfg = NormConfig::new(variant);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut stats = RunningStats::new(c);
        let y = composite_norm(&mut tape, xv, &cfg, Mode::Train, Some(&mut stats), None)?;
        let (m, v) = plane_mean_var(&tape.value(y).data()[..h * w]);
        println!("{variant:>6}: first plane mean {m:+.4} var {v:.4}");
    }

    // Running statistics accumulate in train mode and are used in eval mode.
    let cfg = NormConfig::new(NormVariant::Bn);
    let mut stats = RunningStats::new(c);
    for _ in 0..20 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        composite_norm(&mut tape, xv, &cfg, Mode::Train, Some(&mut stats), None)?;
    }
    println!("running mean after 20 updates: {:?}", stats.mean);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = composite_norm(&mut tape, xv, &cfg, Mode::Eval, Some(&mut stats), None)?;
    let (m, _) = plane_mean_var(&tape.value(y).data()[..h * w]);
    println!("eval-mode first plane mean {m:+.4}");
    Ok(())
}
