#![allow(dead_code)]

use xrf_mae::network::{Model, ModelConfig, ModelParameters};
use xrf_mae::patch_mask::patchify;
use xrf_mae::tensor::Matrix;

pub const FD_STEP: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn tiny_config(d: usize, depth: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        n_channels: 128,
        patch_size: 16,
        embed_dim: d,
        encoder_depth: depth,
        encoder_heads: heads,
        decoder_dim: d,
        decoder_depth: 1,
        decoder_heads: heads,
        mlp_ratio: 4.0,
    }
}

pub fn wavy_patches(cfg: &ModelConfig, salt: f64) -> Matrix {
    let x: Vec<f64> = (0..cfg.n_channels)
        .map(|i| (i as f64 * 0.13 + salt).sin() + 0.3 * (i as f64 * 0.041 - salt).cos())
        .collect();
    patchify(&x, &cfg.grid()).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Worst relative error between analytic gradients and central differences,
/// per named tensor, over every entry.
pub fn fd_check_params(model: &Model, analytic: &ModelParameters, loss: impl Fn(&Model) -> f64) -> Vec<(String, f64)> {
    let names: Vec<String> = model.params().named().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Matrix> = analytic.tensors().into_iter().cloned().collect();
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (t, (name, grad)) in names.into_iter().zip(grads).enumerate() {
        let mut worst = 0.0f64;
        for i in 0..grad.len() {
            let orig = probe.params().tensors()[t].as_slice()[i];
            probe.params_mut().tensors_mut()[t].as_mut_slice()[i] = orig + FD_STEP;
            let up = loss(&probe);
            probe.params_mut().tensors_mut()[t].as_mut_slice()[i] = orig - FD_STEP;
            let down = loss(&probe);
            probe.params_mut().tensors_mut()[t].as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.as_slice()[i], numeric));
        }
        out.push((name, worst));
    }
    out
}

pub fn fd_check_input(grad: &Matrix, patches: &Matrix, loss: impl Fn(&Matrix) -> f64) -> f64 {
    let mut probe = patches.clone();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + FD_STEP;
        let up = loss(&probe);
        probe.as_mut_slice()[i] = orig - FD_STEP;
        let down = loss(&probe);
        probe.as_mut_slice()[i] = orig;
        worst = worst.max(rel_err(grad.as_slice()[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}
