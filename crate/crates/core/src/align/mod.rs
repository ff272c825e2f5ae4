//! Class-centered optimal-transport alignment of target features to frozen
//! source class centers.

mod centers;
mod loss;
mod sinkhorn;

pub use centers::{compute_class_centers, transport_cost, ClassCenters};
pub use loss::{confident_rows, ot_loss, AlignMode, CenterMass, OtOptions, OtOutcome};
pub use sinkhorn::{solve_transport, TransportPlan};
