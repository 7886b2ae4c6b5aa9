//! Compiles and runs the code blocks of the guide as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/belief-maps.md")]
pub mod belief_maps {}
#[doc = include_str!("../../../book/src/sensing.md")]
pub mod sensing {}
#[doc = include_str!("../../../book/src/primitives.md")]
pub mod primitives {}
#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}
#[doc = include_str!("../../../book/src/episodes.md")]
pub mod episodes {}
#[doc = include_str!("../../../book/src/planners.md")]
pub mod planners {}
#[doc = include_str!("../../../book/src/learning.md")]
pub mod learning {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
#[doc = include_str!("../../../book/src/file-formats.md")]
pub mod file_formats {}
