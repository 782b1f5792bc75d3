pub mod error;
pub mod excite;
pub mod exec;
pub mod inner;
pub mod linsys;
pub mod mpc;
pub mod outer;
pub mod policy;
pub mod qp;

pub use error::{Error, Result};
pub use exec::Execution;
