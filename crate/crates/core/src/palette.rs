//! Cityscapes colours for visualising label rasters. IDs past the palette
//! are grey, ignore is black.

use crate::taxonomy::{ClassId, IGNORE_ID};

pub const PALETTE: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

pub fn color(id: ClassId) -> [u8; 3] {
    match id {
        IGNORE_ID => [0, 0, 0],
        i if (i as usize) < PALETTE.len() => PALETTE[i as usize],
        _ => [128, 128, 128],
    }
}
