//! Binary PPM rendering of label rasters.

use csi_core::palette::color;
use csi_core::LabelRaster;

pub fn to_ppm(raster: &LabelRaster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width(), raster.height()).into_bytes();
    out.reserve(raster.len() * 3);
    for &v in raster.data() {
        out.extend_from_slice(&color(v));
    }
    out
}
