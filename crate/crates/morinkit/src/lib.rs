//! Numerical toolkit for detecting and classifying the simplest stable
//! singularities of smooth maps: folds, cusps, swallow's tails, and
//! butterflies, together with the model map family they unfold into.

pub mod classify;
pub mod lienard;
pub mod opcore;
pub mod realroots;
pub mod whitney;
