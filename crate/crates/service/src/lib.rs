//! Model endpoint client, HTTP service and command line for the grasp
//! toolkit.

pub mod cli;
pub mod endpoint;
pub mod server;
