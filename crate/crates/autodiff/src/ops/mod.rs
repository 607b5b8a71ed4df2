//! Differentiable primitives, each recorded as one tape node (attention is a
//! composition of them).

pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod pool;
pub mod reduce;
pub mod shape;
pub mod softmax;
