pub mod analysis;
pub mod design;
pub mod matrix;
pub mod paillier;
pub mod protocol;
pub mod sdp;
pub mod sim;
