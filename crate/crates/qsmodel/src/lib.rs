//! Config files, table renderers, CLI and HTTP service around
//! [`qsmodel_core`].

pub mod cli;
pub mod config;
pub mod eval;
pub mod render;
pub mod schema;
pub mod service;
