//! Data-parallel execution with a sequential fallback.
//!
//! Every parallel map here collects results in input order, so callers that
//! reduce the returned vector sequentially get bit-identical results in both
//! modes. Building without the `parallel` feature turns [`Exec::Parallel`]
//! into a plain sequential loop.

/// How batch-shaped work (essays, folds, gradient probes) is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            Exec::Parallel => par_map(items, f),
        }
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            Exec::Parallel => par_map_range(n, f),
        }
    }

    /// Runs `f` over disjoint mutable row chunks of `out` (each `row_len` long).
    pub fn for_each_row<F>(self, out: &mut [f64], row_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if row_len == 0 {
            return;
        }
        match self {
            Exec::Sequential => out
                .chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row)),
            Exec::Parallel => par_rows(out, row_len, f),
        }
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
fn par_rows<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    out.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
fn par_rows<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_in_order() {
        let items: Vec<u64> = (0..257).collect();
        let seq = Exec::Sequential.map(&items, |x| x * x + 1);
        let par = Exec::Parallel.map(&items, |x| x * x + 1);
        assert_eq!(seq, par);
        assert_eq!(
            Exec::Sequential.map_range(33, |i| i as f64 / 3.0),
            Exec::Parallel.map_range(33, |i| i as f64 / 3.0)
        );
    }

    #[test]
    fn rows_are_disjoint() {
        let mut a = vec![0.0; 12];
        let mut b = vec![0.0; 12];
        Exec::Sequential.for_each_row(&mut a, 4, |i, r| r.iter_mut().for_each(|x| *x = i as f64));
        Exec::Parallel.for_each_row(&mut b, 4, |i, r| r.iter_mut().for_each(|x| *x = i as f64));
        assert_eq!(a, b);
        assert_eq!(&a[8..], &[2.0; 4]);
    }
}
