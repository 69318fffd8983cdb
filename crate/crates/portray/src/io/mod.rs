//! File formats: portable pixmaps, structured-text records, WAV audio.

pub mod ppm;
pub mod records;
pub mod wav;
