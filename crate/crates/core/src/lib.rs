pub mod tensor;
pub mod nn;
pub mod lora;
pub mod seed;
pub mod tasks;
pub mod meta;
pub mod experiment;
pub mod gradcheck;
pub mod harness;
