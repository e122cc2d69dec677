//! Data-parallel helpers with a sequential fallback.
//!
//! Every parallel loop in the crate goes through these functions. With the
//! `parallel` feature enabled they dispatch to rayon; without it they run on
//! the calling thread. Results are always returned in input order, so
//! reductions done by the caller are deterministic either way.

/// Execution strategy for a data-parallel loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `Parallel` when the feature is compiled in, else `Sequential`.
    pub fn available() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_with(Execution::available(), items, f)
}

pub fn map_with<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Apply `f(row_index, row)` to each `width`-sized chunk of `out`.
pub fn for_each_row<F>(out: &mut [f64], width: usize, parallel: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = parallel;
    out.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u32> = (0..1000).collect();
        let seq = map_with(Execution::Sequential, &xs, |x| x * 3);
        let par = map_with(Execution::Parallel, &xs, |x| x * 3);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 2997);
    }

    #[test]
    fn rows_visit_every_chunk() {
        let mut buf = vec![0.0; 12];
        for_each_row(&mut buf, 3, true, |i, row| row.fill(i as f64));
        assert_eq!(buf, vec![0., 0., 0., 1., 1., 1., 2., 2., 2., 3., 3., 3.]);
    }
}
