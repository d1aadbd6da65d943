//! Semi-supervised panoptic segmentation on procedurally generated scenes.
//!
//! The crate provides the full training stack: synthetic scene and taxonomy
//! generation, weak/strong augmentation, a frozen vision-language embedder,
//! a trainable mask-transformer decoder with a language-based classification
//! head, bipartite matching losses, zero-shot mask classification with
//! posterior ensembling, panoptic inference and quality metrics, and the
//! mean-teacher training loops (supervised, class-agnostic warm-up, and
//! semi-supervised with ensembled pseudo-labels).

pub mod augment;
pub mod embedder;
pub mod ensemble;
pub mod error;
pub mod image;
pub mod inference;
pub mod loss_graph;
pub mod matching;
pub mod mathutil;
pub mod metrics;
pub mod overseg;
pub mod panoptic;
pub mod partition;
pub mod rng;
pub mod scene;
pub mod decoder;
pub mod tape;
pub mod taxonomy;

pub use error::{Error, Result};
pub use image::Image;
pub use panoptic::{remap_stuff_to_background, ClassAgnosticMap, PanopticMap, SegmentInfo, VOID_ID};
pub use partition::{labeled_count, partition, Fraction, Partition};
pub use scene::{generate_scene, ClassPrototypes, ClassWeights, SceneConfig, ShapeSet};
pub use taxonomy::Taxonomy;
