//! Koopman-lifted state estimation with Persidskii-type observers.

pub mod edmd;
pub mod error;
pub mod experiment;
pub mod lifting;
pub mod linalg;
pub mod observers;
pub mod persidskii;
pub mod sdp;
pub mod synthesis;
pub mod systems;

pub use edmd::{fit_edmd, KoopmanModel, ResidualCharacterization, TrajectoryDataset};
pub use error::{Error, Result};
pub use lifting::{build_dictionary, BasisEntry, DictionarySpec, ObservableDictionary};
pub use systems::{Plant, Trace};
