pub mod harness;
pub mod identify;
pub mod network;
pub mod numkernels;
pub mod objective;
pub mod splitter;
pub mod tensor;
