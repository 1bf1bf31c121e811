//! Concrete models: quasi-geostrophic flow, its POD reduced model,
//! Lorenz-96, point observations and file containers.

pub mod io;
pub mod lorenz96;
pub mod observe;
pub mod pod;
pub mod qg;

pub use lorenz96::{lorenz96_rhs, Lorenz96};
pub use observe::{lattice_indices, observation_indices, observe_gridpoints, Selection};
pub use pod::{build_pod, pod_modes, pod_rhs, PodBasis, PodModes, PodRom, SnapshotSet};
pub use qg::{qg_rhs, qg_step, Qg, QgConfig, DAY};
