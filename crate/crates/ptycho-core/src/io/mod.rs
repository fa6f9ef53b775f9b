//! Bit-exact container format, configuration schema, dataset and image
//! export. This module is the external interface of the library.

pub mod config;
pub mod container;
pub mod dataset;
pub mod pngout;

pub use config::RunConfig;
pub use container::{Container, Section};
pub use dataset::{read_dataset, write_dataset};

use std::path::Path;

use crate::error::Result;

/// Loss-history CSV: `iteration,seconds,train_loss,val_loss` with an
/// empty validation column when no split exists.
pub fn write_loss_csv(
    path: &Path,
    rows: &[(usize, f64, f64, Option<f64>)],
) -> Result<()> {
    let mut out = String::from("iteration,seconds,train_loss,val_loss\n");
    for &(it, secs, train, val) in rows {
        match val {
            Some(v) => out.push_str(&format!("{it},{secs:.6},{train:.10e},{v:.10e}\n")),
            None => out.push_str(&format!("{it},{secs:.6},{train:.10e},\n")),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
