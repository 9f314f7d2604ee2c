//! Curation and evaluation toolkit for text-guided surgical video generation
//! corpora: manifest management, shot-dynamics filtering, caption refinement
//! through a chat-completion service, frame-level privacy screening, a
//! desk-scale latent-diffusion reference engine, Fréchet/CLIP-score metrics
//! and rater-feedback aggregation.

pub mod chat;
pub mod corpus;
pub mod diffusion;
pub mod dynamics;
pub mod feedback;
pub mod frames;
pub mod metrics;
pub mod pipeline;
pub mod privacy;
pub mod refiner;
