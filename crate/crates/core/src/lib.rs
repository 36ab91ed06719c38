pub mod codec;
pub mod consistency;
pub mod corruption;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod image;
pub mod schedule;
pub mod seed;
pub mod tta;
pub mod unet;
pub mod workbench;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corruptions.md")]
    mod corruptions {}
    #[doc = include_str!("../../../book/src/latents.md")]
    mod latents {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/consistency.md")]
    mod consistency {}
    #[doc = include_str!("../../../book/src/tta.md")]
    mod tta {}
    #[doc = include_str!("../../../book/src/workbench.md")]
    mod workbench {}
}
