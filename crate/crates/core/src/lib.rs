pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod par;
pub mod search;
pub mod supprompt;
pub mod train;

pub use error::{DplError, Result};
