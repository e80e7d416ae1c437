pub mod anchors;
pub mod augment;
pub mod bbox;
pub mod datasetio;
pub mod dilation;
pub mod error;
pub mod evalkit;
pub mod graph;
pub mod matching;
pub mod pyramid;
pub mod scalar;
pub mod tensor;

pub use bbox::{iou, BBox};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ConvGeometry, ConvSpec, Grid, Shape};

pub type Grid64 = Grid<f64>;
pub type Grid32 = Grid<f32>;
pub type BBox64 = BBox<f64>;
pub type BBox32 = BBox<f32>;
