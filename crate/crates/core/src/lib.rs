pub mod basis;
pub mod changepoint;
pub mod ensemble;
pub mod io;
pub mod model;
pub mod rolling;
pub mod series;
pub mod spa;
pub mod stats;
pub mod synth;
pub mod wateruse;
