//! Let each component choose its own number of column groups by the average
//! silhouette, then choose G by BIC.
//!
//! ```bash
//! cargo run --release --example fit_varying_k
//! ```

use blockmpln::select;
use blockmpln::simulate::{self, SimSpec};
use blockmpln::vem::FitConfig;

fn main() -> anyhow::Result<()> {
    // study 11 has two blocks in one component and three in the other
    let spec = SimSpec { n: 300, seed: 5, ..simulate::preset(11)? };
    let (counts, truth) = simulate::sample_dataset(&spec)?;

    let config = FitConfig { seed: 5, ..FitConfig::default() };
    let (best, grid) = select::fit_varying_k(&counts, &spec.offset_vector(), 3, 5, &config)?;

    for cell in &grid.cells {
        println!("G = {}: K = {:?}, BIC = {:.2}", cell.g, cell.k_selected, cell.bic.unwrap_or(f64::NAN));
    }
    println!("\ntrue K per component: {:?}", truth.model.k_per_component());
    println!("fitted K per component: {:?}", best.k_per_component());
    if let Some(scores) = &best.silhouettes {
        for (g, s) in scores.iter().enumerate() {
            let line: Vec<String> = s.iter().map(|(k, v)| format!("K={k}: {v:.3}")).collect();
            println!("component {} silhouettes  {}", g + 1, line.join("  "));
        }
    }
    Ok(())
}
