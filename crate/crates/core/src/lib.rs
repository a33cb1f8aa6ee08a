pub mod checks;
pub mod costmodel;
pub mod error;
pub mod experiment;
pub mod field2d;
pub mod flow;
pub mod guide;
pub mod net;
pub mod optimize;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod secant;
