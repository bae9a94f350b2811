pub mod benchmark;
pub mod evaluate;
pub mod gradcheck;
pub mod predict;
pub mod train;
