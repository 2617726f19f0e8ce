pub mod domains;
pub mod engine;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod trainer;
