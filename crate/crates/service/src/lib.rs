//! HTTP and server-sent-event facade over the xpflow engine, and the `xp`
//! command line.

pub mod api;
pub mod app;
pub mod cli;

pub use api::router;
pub use app::{App, AppConfig};
