//! Path-parallel ensemble execution.

use mflq_core::costs::EnsembleRunner;
use mflq_core::simulator::{Ensemble, PathSimulator, SimError};
use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuildError, ThreadPoolBuilder};

/// Runs paths on a rayon pool. Paths own their random streams, so the ensemble
/// is identical to a sequential run for any thread count; on failure the error
/// of the lowest failing path is returned.
pub struct RayonRunner {
    pool: ThreadPool,
}

impl RayonRunner {
    /// `threads == 0` lets rayon choose.
    pub fn new(threads: usize) -> Result<Self, ThreadPoolBuildError> {
        Ok(RayonRunner { pool: ThreadPoolBuilder::new().num_threads(threads).build()? })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl EnsembleRunner for RayonRunner {
    fn run(&self, sim: &dyn PathSimulator) -> Result<Ensemble, SimError> {
        let results: Vec<Result<_, SimError>> =
            self.pool.install(|| (0..sim.config().paths).into_par_iter().map(|p| sim.run_path(p)).collect());
        let paths = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(sim.assemble(paths))
    }
}
