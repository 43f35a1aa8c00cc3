//! Dataset IO, training, evaluation, probing and the `bas` command line tool.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod gen_data;
pub mod plot;
pub mod train;
pub mod probe;
pub mod sweep;
pub mod visualize;
