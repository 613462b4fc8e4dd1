//! Published cost targets the analyzer is calibrated against, at 224×224.

/// Full model (hybrid stages and snake convolution enabled).
pub const PARAMS_M: f64 = 2.1;
pub const GMACS: f64 = 2.538;

/// Same model with the snake-convolution block replaced by an IRLB.
pub const NO_DSC_PARAMS_M: f64 = 1.933;
pub const NO_DSC_GMACS: f64 = 0.603;

/// Allowed relative deviation from the targets.
pub const TOLERANCE: f64 = 0.10;

/// Input side the targets refer to.
pub const INPUT_SIZE: usize = 224;
