//! Trial-level execution: rayon when the `parallel` feature is on, a plain
//! loop otherwise. Results never depend on the choice, since every trial
//! draws from its own random sub-stream.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
    #[default]
    Parallel,
}

impl Execution {
    pub fn effective(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }
}

/// Folds `step` over indices `0..n`, with one scratch value per worker and
/// accumulators combined by `merge`. `merge` must be associative and
/// commutative for the result to be schedule independent.
pub fn fold_indexed<S, A, I, Z, F, M>(
    execution: Execution,
    n: u64,
    init: I,
    zero: Z,
    step: F,
    merge: M,
) -> Result<A>
where
    S: Send,
    A: Send,
    I: Fn() -> S + Sync + Send,
    Z: Fn() -> A + Sync + Send,
    F: Fn(&mut S, &mut A, u64) -> Result<()> + Sync + Send,
    M: Fn(A, A) -> A + Sync + Send,
{
    match execution.effective() {
        Execution::Sequential => {
            let _ = &merge;
            let mut scratch = init();
            let mut acc = zero();
            for i in 0..n {
                step(&mut scratch, &mut acc, i)?;
            }
            Ok(acc)
        }
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n)
                .into_par_iter()
                .try_fold(
                    || (init(), zero()),
                    |(mut scratch, mut acc), i| {
                        step(&mut scratch, &mut acc, i)?;
                        Ok((scratch, acc))
                    },
                )
                .map(|r: Result<(S, A)>| r.map(|(_, acc)| acc))
                .try_reduce(&zero, |a, b| Ok(merge(a, b)))
        }
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel => unreachable!("effective() never yields Parallel"),
    }
}

/// Maps `f` over `0..n`, keeping index order.
pub fn map_indexed<T, F>(execution: Execution, n: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    match execution.effective() {
        Execution::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel => unreachable!("effective() never yields Parallel"),
    }
}
