pub mod autograd;
pub mod cga;
pub mod dmrq;
pub mod error;
pub mod hmat;
pub mod ingest;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod serve;
pub mod seqstream;
pub mod tensor;
pub mod train_eval;

pub use error::{Error, Result};
