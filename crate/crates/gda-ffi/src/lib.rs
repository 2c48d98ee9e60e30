// C ABI surface; implemented after the core crate.
