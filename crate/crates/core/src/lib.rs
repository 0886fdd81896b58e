pub mod fpround;
pub mod game;
pub mod merkle;
pub mod protocol;
pub mod roundlog;
pub mod run;
pub mod simnet;

pub use fpround::{Grid, GridValue, RoundingDirection, RoundingParams};
pub use merkle::{Digest, MerklePath, MerkleTree};
pub use protocol::{TauPolicy, TrainConfig};
pub use roundlog::{LogHeader, LogReader, LogWriter};
pub use run::{RunConfigFile, RunReport};
pub use simnet::{DeviceProfile, LayerSpec, ModelSpec, ModelWeights};
