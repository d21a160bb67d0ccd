pub mod eval;
pub mod fit;
pub mod heldout;
pub mod scree;
pub mod simulate;
