pub mod golden;
pub mod oracles;
