pub mod analyze;
pub mod gen;
pub mod sweep;
pub mod train;
pub mod verify;
