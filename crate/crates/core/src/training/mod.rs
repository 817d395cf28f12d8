//! Offline pretraining, online fine-tuning and evaluation.

mod config;
mod learner;
pub mod losses;
mod rollout;
mod run;

pub use config::{Ablation, LearningRates, RunConfig, Schedule};
pub use learner::{Learner, StepLosses};
pub use rollout::{
    evaluate, policy_action, run_episode, ActMode, Episode, EpisodeSummary, EvalReport, PolicyAction, StepRecord,
    SwitchStats,
};
pub use run::{
    collect_demos, init_learner, learner_from_bundle, load_checkpoint, pretrain, read_metrics, save_checkpoint,
    train_online, train_seed, EpisodeMetrics, MetricsRecord, NullObserver, Observer, OnlineOutcome, Phase, RunDir,
    DEMO_SEED_BASE, EVAL_SEED_BASE, TRAIN_SEED_BASE,
};
