//! The bitrate agent: state assembly, actor and critic networks, the
//! asynchronous advantage actor-critic trainer, and the bandwidth probe.

mod a3c;
mod central;
mod estimator;
mod net;
mod state;
mod trainer;

pub use a3c::{
    advantage, batch_targets, choose_action, n_step_targets, policy_gradients, policy_update, select_action, value_gradients, value_update,
    worker_rollout, Experience, PolicyReport, SelectMode, ValueReport,
};
pub use central::{central_apply, snapshot_checksum, CentralStore, GradientMessage, Snapshot};
pub use estimator::{
    persistence_probe_smape, probe_samples, train_bandwidth_estimator, BandwidthEstimator, EstimatorConfig, EstimatorReport, ProbeSample,
};
pub use net::{Backbone, NetConfig, PolicyNet, ValueNet};
pub use state::{build_state, ActionSpace, AgentState, History, SlotObservation, DEFAULT_HISTORY, RATE_SCALE_MBPS};
pub use trainer::{evaluate, write_train_log, Episode, LogRow, QarcAgent, Trainer, TrainerConfig, TRAIN_LOG_HEADER};
