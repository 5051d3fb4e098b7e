pub mod analysis;
pub mod control;
pub mod expert;
pub mod geom;
pub mod metrics;
pub mod policy;
pub mod roadnet;
pub mod routegen;
pub mod sensors;
pub mod series;
pub mod simcore;
