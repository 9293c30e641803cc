//! Experiment pipeline behind the `fluxct` command-line tool.

pub mod commands;
pub mod config;
pub mod simulate;
pub mod store;

pub use commands::Run;
pub use config::ExperimentConfig;

/// Run `f` on a dedicated pool of `threads` workers (0 = available parallelism).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> anyhow::Result<R> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    Ok(pool.install(f))
}
