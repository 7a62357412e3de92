//! Data-free adversarial training of two style-based generators against a
//! shared discriminator, using only relational batch objectives.

pub mod cli;
pub mod losses;
pub mod networks;
pub mod oracle;
pub mod render;
pub mod training;
pub mod tensor;
