pub mod dataset;
pub mod deepfeatures;
pub mod evaluation;
pub mod experiments;
pub mod modelzoo;
pub mod phantom;
pub mod preprocess;
pub mod trainers;
pub mod util;
