pub mod dyadic;
pub mod graph;
pub mod instrument;
pub mod kernels;
pub mod mpq;
pub mod quantizer;
pub mod tensor;
pub mod zoo;
