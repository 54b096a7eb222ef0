//! The Noam schedule, global-norm clipping and Adam on a small quadratic.

use advtts::trainopt::{adam_step, clip_gradients, global_norm, noam_lr, AdamConfig, AdamState};

fn main() -> advtts::Result<()> {
    let cfg = AdamConfig::default();
    println!("step      lr");
    for step in [1, 100, 250, 500, 1000, 2000, 3000] {
        println!("{step:>4}  {:.7}", noam_lr(step, &cfg)?);
    }

    let mut g = vec![3.0, 4.0];
    let pre = clip_gradients(&mut g, cfg.clip_norm)?;
    println!("clip: norm {pre} -> {:.3} {:?}", global_norm(&g), g);

    // Minimize sum((p - target)^2).
    let target = [1.0, -2.0, 0.5];
    let mut p = vec![0.0; 3];
    let mut state = AdamState::new(3);
    let fast = AdamConfig {
        lr_peak: 0.05,
        warmup_steps: 50,
        ..cfg
    };
    for _ in 0..2000 {
        let mut grad: Vec<f64> = p.iter().zip(target).map(|(x, t)| 2.0 * (x - t)).collect();
        clip_gradients(&mut grad, 1.0)?;
        adam_step(&mut p, &grad, &mut state, &fast)?;
    }
    println!("adam after {} steps: {:.4?} (target {target:?})", state.step, p);
    Ok(())
}
