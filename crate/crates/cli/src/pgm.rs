//! Binary greyscale (P5) mask output.

use eddyseg_core::loss::{ANTICYCLONIC, BACKGROUND, CYCLONIC};
use serde::Serialize;

pub const CYCLONIC_GRAY: u8 = 0;
pub const BACKGROUND_GRAY: u8 = 128;
pub const ANTICYCLONIC_GRAY: u8 = 255;

pub fn gray_of_class(class: u8) -> u8 {
    match class {
        CYCLONIC => CYCLONIC_GRAY,
        ANTICYCLONIC => ANTICYCLONIC_GRAY,
        _ => BACKGROUND_GRAY,
    }
}

/// `P5` header followed by one byte per pixel, row-major.
pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count does not match {width}x{height}");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

#[derive(Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub background: usize,
    pub anticyclonic: usize,
    pub cyclonic: usize,
}

impl ClassCounts {
    pub fn of(classes: &[u8]) -> Self {
        let mut c = Self::default();
        for &k in classes {
            match k {
                BACKGROUND => c.background += 1,
                ANTICYCLONIC => c.anticyclonic += 1,
                _ => c.cyclonic += 1,
            }
        }
        c
    }
}

#[derive(Debug, Serialize)]
pub struct MaskInfo {
    pub width: usize,
    pub height: usize,
    pub counts: ClassCounts,
    /// Grey level used for each class in the PGM.
    pub levels: ClassLevels,
}

#[derive(Debug, Serialize)]
pub struct ClassLevels {
    pub background: u8,
    pub anticyclonic: u8,
    pub cyclonic: u8,
}

impl MaskInfo {
    pub fn new(width: usize, height: usize, classes: &[u8]) -> Self {
        Self {
            width,
            height,
            counts: ClassCounts::of(classes),
            levels: ClassLevels {
                background: BACKGROUND_GRAY,
                anticyclonic: ANTICYCLONIC_GRAY,
                cyclonic: CYCLONIC_GRAY,
            },
        }
    }
}
