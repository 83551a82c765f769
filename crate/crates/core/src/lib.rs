//! Monte Carlo dropout uncertainty for deep-learning diffusion tensor
//! parameter mapping: synthetic phantoms, tensor fitting, a small 3D U-Net
//! engine with decoder dropout, training, MC inference and evaluation.

pub mod cli;
pub mod dti;
pub mod dunet;
pub mod eval;
pub mod mcdropout;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod train;
pub mod volume;
