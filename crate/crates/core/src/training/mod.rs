pub mod adam;
pub mod config;
pub mod engine;
pub mod loss;

pub use adam::{adam_step, AdamState};
pub use config::TrainConfig;
pub use engine::{
    backward, synthesize, train_recording, train_window, train_window_with_state, window_samples, RecordingRun,
    TrainFailure, TrainReport, TrainSample, WarmStart,
};
pub use loss::{huber_loss, Loss};
