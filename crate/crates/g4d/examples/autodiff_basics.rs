//! Tour of the tensor engine: recorded ops, reverse-mode gradients,
//! a finite-difference spot check, and a few AdamW steps on a quadratic.
//!
//! Run with: cargo run --release --example autodiff_basics

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use g4d::oracle::{finite_diff, max_rel_err, silu64, to_f64};
use g4d::tensor::{OptimizerState, Tape, Tensor};

fn main() -> g4d::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // forward pass on a recording tape
    let tape = Tape::new();
    let x = Tensor::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng).with_requires_grad();
    let w = Tensor::rand_uniform(vec![3, 2], -1.0, 1.0, &mut rng).with_requires_grad();
    let h = tape.silu(&tape.matmul(&x, &w)?)?;
    let loss = tape.mean_all(&tape.square(&h)?)?;
    println!("loss = {:.6}", loss.item());

    // reverse pass populates gradients on every tracked tensor
    tape.backward(&loss)?;
    println!(
        "grad norms: |dx| = {:.4}, |dw| = {:.4}",
        norm(&x.grad().unwrap()),
        norm(&w.grad().unwrap())
    );

    // spot-check dw against central finite differences of an f64 reference
    let x64 = to_f64(&x);
    let fd = finite_diff(
        |wv: &[f64]| {
            let mut acc = 0.0;
            for i in 0..4 {
                for j in 0..2 {
                    let pre: f64 = (0..3).map(|k| x64[i * 3 + k] * wv[k * 2 + j]).sum();
                    acc += silu64(pre).powi(2);
                }
            }
            acc / 8.0
        },
        &to_f64(&w),
        1e-3,
    );
    let err = max_rel_err(&w.grad().unwrap(), &fd);
    println!("finite-difference rel err on dw: {err:.2e}");
    assert!(err < 1e-4);

    // AdamW walks a 2-parameter quadratic to its minimum
    let mut p = Tensor::from_vec(vec![2], vec![2.0, -1.5])?.with_requires_grad();
    let mut opt = OptimizerState::new(0.05);
    opt.weight_decay = 0.0;
    for step in 0..300 {
        let tape = Tape::new();
        let target = Tensor::from_vec(vec![2], vec![0.5, -0.25])?;
        let d = tape.sub(&p, &target)?;
        let loss = tape.mean_all(&tape.square(&d)?)?;
        p.zero_grad();
        tape.backward(&loss)?;
        opt.step(&mut [("p".into(), &mut p)])?;
        if step % 100 == 99 {
            println!("step {step:3}: p = {:?}", p.data());
        }
    }
    assert!((p.data()[0] - 0.5).abs() < 1e-2);
    println!("converged to the quadratic minimum");
    Ok(())
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}
