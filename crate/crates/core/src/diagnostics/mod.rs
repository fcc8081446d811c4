pub mod gradcheck;
pub mod mmd;
pub mod registry;
