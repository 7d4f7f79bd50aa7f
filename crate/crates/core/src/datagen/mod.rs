//! Training data: plant excitation, windowing, reference trajectories and
//! the model's feasible set-points.

mod dataset;
mod equilibrium;
mod feasible;
mod mprs;
mod reference;
mod slices;

pub use dataset::{
    gen_io_dataset, gen_reference_dataset, read_dataset_dir, read_ndjson, run_plant_experiment, screened_set_point,
    write_dataset_dir, write_ndjson, IoDataConfig, RefDataConfig, ReferenceSequence, SequenceKind, SequenceRecord,
    Splits, SPLIT_NAMES,
};
pub use equilibrium::{
    input_grid, model_equilibrium, settle_model, solve_equilibrium, solve_equilibrium_from, solve_from_samples,
    Equilibrium, EquilibriumConfig,
};
pub use feasible::{convex_hull, feasible_output_map, FeasibleMap, SteadyPoint};
pub use mprs::{gen_mprs, MprsConfig};
pub use reference::{filter_reference, FirstOrderFilter, ReferenceModel};
pub use slices::{experiment_length, tbptt_slices};
