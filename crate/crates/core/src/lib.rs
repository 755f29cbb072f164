//! Biclustering of count data with mixtures of multivariate Poisson-lognormal
//! distributions whose latent covariances are block diagonal.
//!
//! Rows (observations) are clustered by the mixture; within each component
//! the variables are split into independent groups. Fitting uses a
//! variational Gaussian approximation inside an EM loop, column groups come
//! from hierarchical clustering of the latent correlations, and the numbers
//! of components and groups are chosen by BIC or the silhouette.
//!
//! ```no_run
//! use blockmpln::{data, select, vem::FitConfig};
//!
//! let counts = data::load_counts("counts.csv", data::Format::Csv).unwrap();
//! let offsets = data::compute_offsets(&counts, data::OffsetMethod::LibSize).unwrap();
//! let (best, grid) = select::grid_search_equal_k(&counts, &offsets, 3, 3, &FitConfig::default()).unwrap();
//! println!("G = {}, K = {:?}", best.g(), best.k_per_component());
//! print!("{}", grid.to_csv(false));
//! ```

pub mod cli;
pub mod colgroup;
pub mod data;
pub mod evaluate;
pub mod linalg;
pub mod model;
pub mod select;
pub mod simulate;
pub mod vem;

pub use data::{CountMatrix, OffsetVector};
pub use linalg::SymMatrix;
pub use model::{ColumnPartition, MixtureModel, VariationalState};
pub use vem::{FitConfig, FitResult, KSpec};
