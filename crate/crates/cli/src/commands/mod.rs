pub mod bench;
pub mod gradcheck;
pub mod run;
pub mod variance;
