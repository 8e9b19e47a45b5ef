//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it,
//! or when [`Exec::Sequential`] is requested, they run on the calling thread.
//! Both paths visit items in the same logical order for any reduction the
//! callers perform afterwards, so results do not depend on the thread count.

use std::cell::Cell;

/// Execution strategy for batch-level loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

thread_local! {
    static AMBIENT: Cell<Option<Exec>> = const { Cell::new(None) };
}

struct Restore(Option<Exec>);

impl Drop for Restore {
    fn drop(&mut self) {
        AMBIENT.with(|c| c.set(self.0));
    }
}

impl Exec {
    /// Strategy used by tensor kernels on this thread: the innermost
    /// [`Exec::scoped`] value, else the default.
    pub fn ambient() -> Exec {
        AMBIENT.with(|c| c.get()).unwrap_or_default()
    }

    /// Run `f` with `self` as the ambient strategy of this thread.
    pub fn scoped<R>(self, f: impl FnOnce() -> R) -> R {
        let _restore = Restore(AMBIENT.with(|c| c.replace(Some(self))));
        f()
    }

    /// `true` when this strategy actually fans out to a thread pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Map `f` over `0..n`, collecting results in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Run `f` on each mutable chunk of `data` (chunk index, chunk).
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Run `f` on each mutable chunk of `data` paired with the matching
    /// element of `side` (which must have one entry per chunk).
    pub fn for_each_chunk_zip_mut<T, S, F>(self, data: &mut [T], chunk: usize, side: &mut [S], f: F)
    where
        T: Send,
        S: Send,
        F: Fn(usize, &mut [T], &mut S) + Sync + Send,
    {
        let chunk = chunk.max(1);
        assert_eq!(data.len().div_ceil(chunk), side.len(), "one side entry per chunk");
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .zip(side.par_iter_mut())
                .enumerate()
                .for_each(|(i, (c, s))| f(i, c, s));
            return;
        }
        data.chunks_mut(chunk)
            .zip(side.iter_mut())
            .enumerate()
            .for_each(|(i, (c, s))| f(i, c, s));
    }

    /// Like [`Exec::for_each_chunk_zip_mut`], but each worker also gets a
    /// scratch value built by `init` and reused across the chunks it runs.
    pub fn for_each_chunk_zip_scratch<T, S, W, I, F>(
        self,
        data: &mut [T],
        chunk: usize,
        side: &mut [S],
        init: I,
        f: F,
    ) where
        T: Send,
        S: Send,
        I: Fn() -> W + Sync + Send,
        F: Fn(&mut W, usize, &mut [T], &mut S) + Sync + Send,
    {
        let chunk = chunk.max(1);
        assert_eq!(data.len().div_ceil(chunk), side.len(), "one side entry per chunk");
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .zip(side.par_iter_mut())
                .enumerate()
                .for_each_init(&init, |w, (i, (c, s))| f(w, i, c, s));
            return;
        }
        let mut w = init();
        data.chunks_mut(chunk)
            .zip(side.iter_mut())
            .enumerate()
            .for_each(|(i, (c, s))| f(&mut w, i, c, s));
    }
}
