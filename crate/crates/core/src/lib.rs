pub mod attribution;
pub mod bench;
pub mod diagnosis;
pub mod groundtruth;
pub mod io;
pub mod net;
pub mod relation;
pub mod rng;
pub mod tensor;
