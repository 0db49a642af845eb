pub mod ckpt;
pub mod data;
pub mod graph;
pub mod losses;
pub mod model;
pub mod prefs;
pub mod quantizer;
pub mod report;
pub mod tape;
pub mod train;
