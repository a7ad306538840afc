pub mod analytics;
pub mod env;
pub mod game;
pub mod log;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod rollout;
pub mod scalar;
pub mod seed;

pub use scalar::{Rational, Real, Scalar};

pub type Game64 = game::CooperativeGame<f64>;
pub type Game32 = game::CooperativeGame<f32>;
pub type ExactGame = game::CooperativeGame<Rational>;
pub type Shapley64 = game::ShapleyVector<f64>;
pub type ExactShapley = game::ShapleyVector<Rational>;
pub type Policy64 = policy::PolicyParams<f64>;
pub type Policy32 = policy::PolicyParams<f32>;
pub type Batch64 = rollout::GroupBatch<f64>;
pub type Batch32 = rollout::GroupBatch<f32>;
pub type Rewards64 = reward::RewardBundle<f64>;
