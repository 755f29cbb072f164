//! Simulate a few replicates, fit each one, and score the fits against the
//! truth: row ARI, column misclassification, parameter error and the
//! covariance support heatmap.
//!
//! ```bash
//! cargo run --release --example evaluate_recovery
//! ```

use blockmpln::evaluate;
use blockmpln::select;
use blockmpln::simulate::{self, SimSpec};
use blockmpln::vem::FitConfig;

fn main() -> anyhow::Result<()> {
    let mut runs = Vec::new();
    for seed in 1..=3 {
        let spec = SimSpec { n: 200, seed, ..simulate::preset(1)? };
        let (counts, truth) = simulate::sample_dataset(&spec)?;
        let config = FitConfig { seed, ..FitConfig::default() };
        let (best, _) = select::grid_search_equal_k(&counts, &spec.offset_vector(), 2, 2, &config)?;
        runs.push((format!("rep{seed}"), truth, best.to_doc(counts.sample_ids())));
    }
    let report = evaluate::evaluate_replicates("study 1, n = 200", &runs)?;
    for r in &report.replicates {
        println!(
            "{}: G = {}, K = {:?}, ARI = {:.3}, column misclassification = {:?}",
            r.name, r.selected_g, r.selected_k, r.row_ari, r.col_misclass
        );
    }
    let (text, _) = evaluate::report_table(std::slice::from_ref(&report))?;
    println!("\n{text}");
    println!("support counts, component 1:");
    print!("{}", evaluate::counts_csv(&report.support_counts[0]));
    Ok(())
}
