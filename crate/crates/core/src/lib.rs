pub mod skill_package;
pub mod structure_edits;
pub mod evaluation;
pub mod advisor;
pub mod inner_refine;
pub mod outer_search;
pub mod pipeline;
