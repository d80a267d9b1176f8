//! Raw forward/backward kernels over row-major slices. Shape validation
//! happens in [`Graph`](crate::Graph) before these are called.

pub(crate) mod conv;
pub(crate) mod norm;
pub(crate) mod pool;
