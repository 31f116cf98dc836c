pub mod dp;
pub mod misc;
pub mod run;
pub mod transfer;
