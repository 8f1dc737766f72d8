pub mod agents;
pub mod automaton;
pub mod gateway;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod prompter;
pub mod seed;
pub mod trajectory;
