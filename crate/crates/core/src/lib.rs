pub mod agents;
pub mod evalkit;
pub mod numkit;
pub mod seeding;
pub mod simworld;
pub mod trainers;
pub mod xctl;
