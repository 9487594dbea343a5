pub mod harness;
pub mod optim;
pub mod suite;
