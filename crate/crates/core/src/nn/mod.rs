pub mod layers;
pub mod params;
pub mod recurrent;
