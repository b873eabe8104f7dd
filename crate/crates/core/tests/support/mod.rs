pub mod oracles;
pub mod reference;
pub mod scenarios;
