//! Small randomly initialized stand-ins for the upstream encoders: token
//! embeddings, a convolutional patch encoder, a transformer encoder and a
//! bidirectional LSTM.

mod embedding;
mod lstm;
mod patch;
mod transformer;

pub use embedding::{LengthPolicy, TokenEmbedding};
pub use lstm::BiLstm;
pub use patch::{PatchEncoder, GRID_CELLS};
pub use transformer::{MultiHeadAttention, TransformerEncoder};
