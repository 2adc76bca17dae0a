pub mod cli;
pub mod flow;
pub mod fock_oracle;
pub mod kernels;
pub mod params;
pub mod rgmap;
pub mod seminorms;
pub mod wick;

mod dd;
