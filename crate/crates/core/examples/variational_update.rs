//! One observation, one component: run the inner variational loop and watch
//! the evidence lower bound climb towards the log marginal likelihood.
//!
//! ```bash
//! cargo run --example variational_update
//! ```

use blockmpln::linalg::SymMatrix;
use blockmpln::model;
use blockmpln::vem;

fn main() -> anyhow::Result<()> {
    let y = [12u64, 3, 0];
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let mu = [1.0, 1.0, 0.5];
    let sigma = SymMatrix::from_rows(&[vec![1.0, 0.6, 0.0], vec![0.6, 1.0, 0.0], vec![0.0, 0.0, 0.8]])?;
    let log_c = 0.0;

    let mut m = mu.to_vec();
    let mut s = SymMatrix::from_diag(&[0.1; 3]);
    println!("start       F = {:.6}", model::elbo_observation(&y, log_c, &m, &s, &mu, &sigma)?);
    for sweep in 1..=6 {
        let (m2, s2) = vem::update_variational(&yf, log_c, &m, &s, &mu, &sigma, 1, 1e-12)?;
        m = m2;
        s = s2;
        println!("sweep {sweep}     F = {:.6}", model::elbo_observation(&y, log_c, &m, &s, &mu, &sigma)?);
    }
    println!("\nm = {:.4?}", m);
    println!("diag S = {:.4?}", s.diag());
    // the zero pattern of Σ carries over to S
    println!("S[0][2] = {}", s.get(0, 2));

    let sigma_inv = blockmpln::linalg::cholesky(&sigma)?.inverse();
    let grad = model::elbo_grad_m(&yf, log_c, &m, &s, &mu, &sigma_inv);
    let max = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    println!("largest gradient entry at the end: {max:.2e}");
    Ok(())
}
