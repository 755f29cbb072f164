//! The full route for a real count table: load it, compute library-size
//! offsets, keep the most variable genes, and fit with per-component K.
//! The bundled pseudo-TCGA spec stands in for the data here.
//!
//! ```bash
//! cargo run --release --example rna_seq_pipeline
//! ```

use blockmpln::data::{self, Format, OffsetMethod};
use blockmpln::select;
use blockmpln::simulate::{self, SimSpec};
use blockmpln::vem::FitConfig;

fn main() -> anyhow::Result<()> {
    let text = include_str!("../data/pseudo_tcga_spec.json");
    let spec: SimSpec = serde_json::from_str(text)?;
    let (raw, truth) = simulate::sample_dataset(&spec)?;

    // round-trip through CSV as a real table would arrive
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("counts.csv");
    data::save_counts(&raw, &path, Format::Csv)?;
    let counts = data::load_counts(&path, Format::Csv)?;

    let offsets = data::compute_offsets(&counts, OffsetMethod::LibSize)?;
    let filtered = data::filter_top_variable(&counts, 24)?;
    println!("{} samples, {} of {} genes kept", filtered.n(), filtered.d(), counts.d());
    println!("offset range {:.3} .. {:.3}", offsets.values().iter().copied().fold(f64::INFINITY, f64::min), offsets.values().iter().copied().fold(0.0, f64::max));

    let config = FitConfig { seed: 1, ..FitConfig::default() };
    let (best, grid) = select::fit_varying_k(&filtered, &offsets, 3, 5, &config)?;
    print!("{}", grid.to_csv(false));
    println!("\nselected G = {}, K = {:?} (simulated with G = 2, K = [3, 4])", best.g(), best.k_per_component());
    println!("row ARI: {:.3}", blockmpln::evaluate::ari(&truth.row_labels, &best.row_labels)?);
    Ok(())
}
