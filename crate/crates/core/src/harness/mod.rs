//! Network, workload and measurement models around the datapath.

pub mod kv;
pub mod link;
pub mod microbench;
pub mod transfer;
pub mod metrics;
