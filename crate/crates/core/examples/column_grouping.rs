//! Column grouping on its own: turn a covariance into correlation distances,
//! build the average-linkage tree, and cut it where the silhouette peaks.
//!
//! ```bash
//! cargo run --example column_grouping
//! ```

use blockmpln::colgroup::{self, GroupCount, Linkage};
use blockmpln::simulate;

fn main() -> anyhow::Result<()> {
    // three blocks of sizes 3, 3 and 2
    let w = simulate::sample_block_covariance(&[3, 3, 2], (0.5, 0.9), (0.5, 1.0), 9)?;
    let dist = colgroup::distance_matrix(&w)?;
    let tree = colgroup::agglomerate(&dist, Linkage::Average);
    print!("{}", tree.to_csv());

    let (k, scores) = colgroup::select_k_silhouette(&dist, &tree, 5);
    for (k, s) in &scores {
        println!("K = {k}: silhouette {s:.3}");
    }
    let part = colgroup::cut(&tree, k)?;
    println!("\nchosen K = {k}, groups {:?}", part.blocks());

    // the same in one call, and the block-diagonal projection it implies
    let again = colgroup::group_columns(&w, Linkage::Average, GroupCount::Silhouette { k_max: 5 })?;
    assert_eq!(again, part);
    let projected = colgroup::block_project(&w, &part);
    let kept = (0..w.dim()).flat_map(|i| (0..w.dim()).map(move |j| (i, j))).filter(|&(i, j)| projected.get(i, j) != 0.0).count();
    println!("nonzero entries after projection: {kept} of {}", w.dim() * w.dim());
    Ok(())
}
