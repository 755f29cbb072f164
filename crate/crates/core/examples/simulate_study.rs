//! Draw one replicate of a simulation study and look at what was generated.
//!
//! ```bash
//! cargo run --example simulate_study -- 11
//! ```

use blockmpln::linalg;
use blockmpln::simulate::{self, SimSpec};

fn main() -> anyhow::Result<()> {
    let study: u32 = std::env::args().nth(1).map_or(Ok(1), |s| s.parse())?;
    let spec = SimSpec { seed: 42, ..simulate::preset(study)? };
    let (counts, truth) = simulate::sample_dataset(&spec)?;

    println!("{}: n = {}, d = {}, pi = {:?}", spec.name.as_deref().unwrap_or("custom"), counts.n(), counts.d(), spec.pi);
    for (g, part) in truth.column_partitions.iter().enumerate() {
        let members = truth.row_labels.iter().filter(|&&l| l == g).count();
        println!("component {}: {members} observations, blocks {:?}", g + 1, part.blocks());
    }

    // correlations of the first component, block structure visible as zeros
    let r = linalg::corr_from_cov(&truth.model.sigma[0])?;
    println!("\ncorrelation matrix of component 1:");
    for row in r.to_rows() {
        println!("  {}", row.iter().map(|v| format!("{v:5.2}")).collect::<Vec<_>>().join(" "));
    }

    let zeros = counts.values().iter().filter(|&&v| v == 0).count();
    println!("\nzero counts: {zeros} of {}", counts.values().len());
    println!("first rows:");
    for i in 0..3 {
        println!("  {} {:?}", counts.sample_ids()[i], counts.row(i));
    }
    Ok(())
}
