//! Block routing, warm-start freezing of second moments, and trainability
//! switches.

pub mod freeze;
pub mod routing;

pub use freeze::{set_trainable, warmstart_freeze, FreezePolicy};
pub use routing::{route, LrSource, Router, RoutingRule};
