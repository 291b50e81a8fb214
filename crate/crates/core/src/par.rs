//! Switch between rayon and sequential iteration.
//!
//! With the `parallel` feature enabled (the default) these helpers hand out
//! rayon iterators; without it they fall back to the std equivalents. Every
//! call site only does per-item work whose result does not depend on
//! scheduling, so both builds produce bit-identical output.

#[cfg(feature = "parallel")]
pub(crate) fn range(n: usize) -> rayon::range::Iter<usize> {
    use rayon::prelude::*;
    (0..n).into_par_iter()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn range(n: usize) -> std::ops::Range<usize> {
    0..n
}

/// Whether this build was compiled with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

pub(crate) mod prelude {
    #[cfg(feature = "parallel")]
    #[allow(unused_imports)]
    pub(crate) use rayon::prelude::*;
}
