#![allow(dead_code)]

use beamtrack::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with an absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares tape gradients of `build` against central finite differences.
///
/// `build` records a scalar on a fresh tape from the given leaves. Returns
/// the worst relative error over all leaf entries.
pub fn check_grads<F>(inputs: &[Tensor<f64>], build: F, floor: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[which]).expect("leaf gradient").to_vec();
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[which] = perturb(input, i, h);
            minus[which] = perturb(input, i, -h);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i], numeric, floor));
        }
    }
    worst
}

fn perturb(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[i] += delta;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so gradients are not
/// trivially zero for normalizing ops.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let mut r = rng(seed);
    let w = uniform(&mut r, &shape);
    let w = tape.leaf(w);
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

/// Short 16x16 stream with a 4-antenna array and 4 DFT beams, L = 2, J = 1.
pub fn small_dataset(frames: usize, seed: u64) -> beamtrack::scene::Dataset {
    use beamtrack::channel::{dft_codebook, MultipathConfig, UlaConfig};
    use beamtrack::scene::{build_dataset, SceneConfig};
    let scene = SceneConfig {
        height: 16,
        width: 16,
        ue_size: 3.0,
        frames_total: frames,
        max_step: 3f64.to_radians(),
        ..SceneConfig::default()
    };
    let ula = UlaConfig::new(4, 0.5).unwrap();
    let codebook = dft_codebook(&ula, 4).unwrap();
    build_dataset(&scene, &ula, &codebook, &MultipathConfig::default(), 2, 1, 0.8, seed).unwrap()
}

/// The tiny network resized to the frames of [`small_dataset`].
pub fn small_config() -> beamtrack::model::ModelConfig {
    beamtrack::model::ModelConfig {
        frame_height: 16,
        frame_width: 16,
        ..beamtrack::model::ModelConfig::tiny()
    }
}

/// One train-mode pass folded into the running statistics, so eval mode is usable.
pub fn primed<S: beamtrack::Scalar>(
    mut p: beamtrack::model::ModelParams<S>,
    frames: Tensor<S>,
) -> beamtrack::model::ModelParams<S> {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let x = tape.leaf(frames);
    let pass = p.forward(&mut tape, &bound, x, beamtrack::tensor::BatchNormMode::Train).unwrap();
    p.update_bn(&pass.bn_stats).unwrap();
    p
}
