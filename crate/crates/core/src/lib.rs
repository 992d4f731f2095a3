//! HeteroSAg: secure aggregation for federated learning where user groups
//! quantize with different precisions.
//!
//! Each model update is split into segments. A segment-selection matrix
//! decides, per segment, which groups mask and aggregate it together and
//! with which quantizer. The server decodes only coalition sums, tolerates
//! dropouts through secret-shared seeds, and can run a coordinate median
//! over coalition aggregates to resist Byzantine users.

pub mod analysis;
pub mod byzantine;
pub mod crypto;
pub mod plan;
pub mod protocol;
pub mod quantize;
pub mod sim;
