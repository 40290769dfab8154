//! Post-selection and ensemble statistics.

pub mod postselect;
pub mod stats;
pub mod timing;

pub use postselect::{postselect, PostSelection, SelectionMode, SubEnsemble};
pub use stats::{
    empirical_mlp, histogram, histogram_set, median_path, weak_function, Coordinate, Histogram2D, Normalization,
    PathEstimate, WeakFunction, DEFAULT_PERCENTILE, HISTOGRAM_BINS,
};
pub use timing::{mlt_density, most_likely_time};
