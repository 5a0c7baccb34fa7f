//! placeholder
pub struct Scenario;
