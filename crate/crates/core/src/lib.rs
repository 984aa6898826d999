pub mod analysis;
pub mod experiments;
pub mod fpquant;
pub mod landscape;
pub mod models;
pub mod tensorcore;
