//! Small reverse-mode automatic differentiation engine with the layers,
//! optimizer and training loop used by the neural survival models.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{AutodiffError, Result};
pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Graph, Var};
pub use layers::{
    Activation, AdditiveAttention, Dense, Embedding, GruCell, Layer, LayerNorm, LayerSpec, LstmCell, Mlp,
    MultiHeadSelfAttention, Rnn, RnnKind,
};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
pub use train::{evaluate, train_loop, History, TrainConfig, Trainable};
