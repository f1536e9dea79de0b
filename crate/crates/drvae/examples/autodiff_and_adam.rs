//! Reverse-mode autodiff on a dynamic graph, verified against central
//! differences, then used to drive Adam on the Rosenbrock function.

use drvae::tensor::adam::{Adam, AdamConfig};
use drvae::tensor::gradcheck::GradCheck;
use drvae::tensor::nn::ParamSet;
use drvae::tensor::Tensor;
use drvae::Result;

fn main() -> Result<()> {
    // f(x, y) = (1 - x)^2 + 100 (y - x^2)^2, minimized at (1, 1).
    let x = Tensor::param(vec![-1.2], &[1])?;
    let y = Tensor::param(vec![1.0], &[1])?;
    let rosenbrock = |x: &Tensor, y: &Tensor| -> Result<Tensor> {
        let a = x.neg()?.add_scalar(1.0)?.square()?;
        let b = y.sub(&x.square()?)?.square()?.mul_scalar(100.0)?;
        a.add(&b)?.sum()
    };

    // Backpropagated gradients must match central differences elementwise.
    let check = GradCheck::with_tolerance(1e-5, 1e-6, 1e-10);
    let report = check.run(&[x.clone(), y.clone()], || rosenbrock(&x, &y))?;
    println!(
        "gradient check: {} elements, max abs err {:.3e}, max rel err {:.3e}",
        report.checked, report.max_abs_err, report.max_rel_err
    );
    assert!(report.pass);

    let mut params = ParamSet::new();
    params.push("x", &x);
    params.push("y", &y);
    let mut adam = Adam::new(AdamConfig { lr: 2e-2, ..AdamConfig::default() }, &params);

    for step in 1..=4000 {
        params.zero_grad();
        let loss = rosenbrock(&x, &y)?;
        loss.backward()?;
        adam.step(&params)?;
        if step % 800 == 0 {
            println!(
                "step {step:4}: f = {:.6e} at ({:+.4}, {:+.4})",
                loss.item(),
                x.item(),
                y.item()
            );
        }
    }
    let final_loss = rosenbrock(&x, &y)?.item();
    println!("final: f = {:.3e} at ({:.4}, {:.4})", final_loss, x.item(), y.item());
    assert!(final_loss < 1e-4);
    Ok(())
}
