//! Fit the (G, K) grid with the same number of column groups in every
//! component and let BIC pick the model.
//!
//! ```bash
//! cargo run --release --example fit_equal_k
//! ```

use blockmpln::evaluate;
use blockmpln::select;
use blockmpln::simulate::{self, SimSpec};
use blockmpln::vem::FitConfig;

fn main() -> anyhow::Result<()> {
    // a smaller version of study 1: two components, two blocks each
    let spec = SimSpec { n: 200, seed: 3, ..simulate::preset(1)? };
    let (counts, truth) = simulate::sample_dataset(&spec)?;
    let offsets = spec.offset_vector();

    let config = FitConfig { seed: 1, ..FitConfig::default() };
    let (best, grid) = select::grid_search_equal_k(&counts, &offsets, 2, 3, &config)?;

    print!("{}", grid.to_csv(false));
    println!("\nselected G = {}, K = {:?}", best.g(), best.k_per_component());
    println!("row ARI against the truth: {:.3}", evaluate::ari(&truth.row_labels, &best.row_labels)?);
    for (g, part) in best.model.grouping.iter().enumerate() {
        println!("component {} blocks {:?}, pi = {:.3}", g + 1, part.blocks(), best.model.pi[g]);
    }
    Ok(())
}
