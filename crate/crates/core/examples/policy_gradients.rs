//! Gaussian MLP policy: exact loss gradients and Hessian-vector products,
//! compared against central differences.

use datamil::dataset::StateActionPair;
use datamil::policy::{forward, grad_loss, hvp_loss, sample_loss, LossKind, PolicyConfig, PolicyParams, WeightedSample};

fn loss(p: &PolicyParams, pairs: &[StateActionPair]) -> f64 {
    pairs.iter().map(|x| sample_loss(p, &x.state, &x.action, LossKind::Nll).unwrap()).sum::<f64>() / pairs.len() as f64
}

fn main() -> datamil::Result<()> {
    let cfg = PolicyConfig::new(4, 2, vec![16, 16]);
    let params = PolicyParams::init(&cfg, 7)?;
    let pairs: Vec<StateActionPair> = (0..5)
        .map(|i| {
            let x = i as f64 / 5.0;
            StateActionPair { state: vec![x, -x, 0.3, 0.1], action: vec![0.5 - x, x], task_id: 0, traj_id: 0, step_idx: i }
        })
        .collect();
    let batch: Vec<WeightedSample> = pairs.iter().map(|p| WeightedSample::new(p, 1.0)).collect();

    let (mean, log_std) = forward(&params, &pairs[0].state)?;
    println!("{} parameters; π(s₀) mean {mean:.3?}, log-std {log_std:.3?}", params.len());

    let g = grad_loss(&params, &batch, LossKind::Nll)?;
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in (0..params.len()).step_by(37) {
        let mut up = params.values.clone();
        let mut down = params.values.clone();
        up[i] += eps;
        down[i] -= eps;
        let fd = (loss(&params.with_values(up)?, &pairs) - loss(&params.with_values(down)?, &pairs)) / (2.0 * eps);
        worst = worst.max((fd - g[i]).abs());
    }
    println!("gradient vs finite differences: max abs gap {worst:.1e}");

    let v: Vec<f64> = (0..params.len()).map(|i| ((i * 31 % 17) as f64 - 8.0) / 8.0).collect();
    let hv = hvp_loss(&params, &batch, LossKind::Nll, &v)?;
    let h = 1e-5;
    let shift = |s: f64| params.with_values(params.values.iter().zip(&v).map(|(p, d)| p + s * d).collect());
    let gp = grad_loss(&shift(h)?, &batch, LossKind::Nll)?;
    let gm = grad_loss(&shift(-h)?, &batch, LossKind::Nll)?;
    let gap = hv.iter().zip(gp.iter().zip(&gm)).map(|(a, (p, m))| (a - (p - m) / (2.0 * h)).abs()).fold(0.0, f64::max);
    println!("Hessian-vector product vs gradient differences: max abs gap {gap:.1e}");
    Ok(())
}
