pub mod aperture;
pub mod comprender;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod lfrender;
pub mod lightfield;
pub mod metrics;
pub mod optim;
pub mod sample;
pub mod scenesim;
pub mod smooth;

pub use aperture::{make_aperture, ApertureMask, View};
pub use error::{Error, Result};
pub use image::{DepthMap, DepthRange, Image, ScalarField};
pub use lightfield::{LightField, ViewDepthStack};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/basics.md")]
    mod basics {}
    #[doc = include_str!("../../../book/src/lightfield.md")]
    mod lightfield {}
    #[doc = include_str!("../../../book/src/compositional.md")]
    mod compositional {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    mod optimization {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
