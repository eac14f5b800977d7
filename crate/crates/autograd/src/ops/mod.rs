pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod resize;
pub mod shape;
pub mod sparse;
