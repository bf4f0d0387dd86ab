pub mod grad_ops;
pub mod masking;
