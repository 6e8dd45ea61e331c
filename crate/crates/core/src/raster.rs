//! Label and confidence rasters, boxes, file I/O and connected components.
//!
//! File layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic, `CSIL` (labels) or `CSIF` (conf) |
//! | 4      | 1    | version, `0x01`                         |
//! | 5      | 4    | width, u32                              |
//! | 9      | 4    | height, u32                             |
//! | 13     | …    | row-major payload: u8 or f32 per pixel  |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{ClassId, IGNORE_ID};

pub const LABEL_MAGIC: &[u8; 4] = b"CSIL";
pub const CONFIDENCE_MAGIC: &[u8; 4] = b"CSIF";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("raster dimensions must be at least 1x1, got {0}x{1}")]
    EmptyDimensions(u32, u32),
    #[error("data length {got} does not match {width}x{height}")]
    LengthMismatch { width: u32, height: u32, got: usize },
    #[error("confidence value {0} at index {1} is outside [0, 1]")]
    ConfidenceOutOfRange(f32, usize),
    #[error("invalid box ({0}, {1}, {2}, {3})")]
    InvalidBox(u32, u32, u32, u32),
    #[error("box {bbox:?} exceeds {width}x{height} raster")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated file: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

/// Axis-aligned pixel box, top-left origin, exclusive maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, RasterError> {
        if x_min < x_max && y_min < y_max {
            Ok(BBox { x_min, y_min, x_max, y_max })
        } else {
            Err(RasterError::InvalidBox(x_min, y_min, x_max, y_max))
        }
    }

    /// Box covering a whole `width`×`height` raster.
    pub fn full(width: u32, height: u32) -> Self {
        BBox { x_min: 0, y_min: 0, x_max: width, y_max: height }
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    /// Intersection with the raster extent, `None` when empty.
    pub fn clip(&self, width: u32, height: u32) -> Option<BBox> {
        BBox::new(
            self.x_min,
            self.y_min,
            self.x_max.min(width),
            self.y_max.min(height),
        )
        .ok()
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
        .ok()
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

fn check_dims(width: u32, height: u32, len: usize) -> Result<(), RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::EmptyDimensions(width, height));
    }
    if width as usize * height as usize != len {
        return Err(RasterError::LengthMismatch { width, height, got: len });
    }
    Ok(())
}

/// Row-major 8-bit class IDs; [`IGNORE_ID`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelRaster {
    width: u32,
    height: u32,
    data: Vec<ClassId>,
}

impl LabelRaster {
    pub fn new(width: u32, height: u32, data: Vec<ClassId>) -> Result<Self, RasterError> {
        check_dims(width, height, data.len())?;
        Ok(LabelRaster { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: ClassId) -> Self {
        assert!(width > 0 && height > 0, "raster must be non-empty");
        LabelRaster {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[ClassId] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [ClassId] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<ClassId> {
        self.data
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> ClassId {
        self.data[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: ClassId) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn same_shape<T>(&self, other: &T) -> bool
    where
        T: Shaped,
    {
        self.width == other.shape().0 && self.height == other.shape().1
    }

    pub fn map_ids(&self, lut: &[ClassId; 256]) -> LabelRaster {
        LabelRaster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| lut[v as usize]).collect(),
        }
    }

    pub fn crop(&self, bbox: &BBox) -> Result<LabelRaster, RasterError> {
        crop(self, bbox)
    }

    /// Non-ignore pixel counts per class.
    pub fn histogram(&self) -> BTreeMap<ClassId, u64> {
        class_histogram(self)
    }

    /// Pixel counts per value, ignore included.
    pub fn histogram_with_ignore(&self) -> BTreeMap<ClassId, u64> {
        let mut counts = [0u64; 256];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(id, &n)| (id as ClassId, n))
            .collect()
    }
}

/// Anything with a pixel grid shape.
pub trait Shaped {
    fn shape(&self) -> (u32, u32);
}

impl Shaped for LabelRaster {
    fn shape(&self) -> (u32, u32) {
        (self.width, self.height)
    }
}

impl Shaped for ConfidenceRaster {
    fn shape(&self) -> (u32, u32) {
        (self.width, self.height)
    }
}

/// Row-major per-pixel confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRaster {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl ConfidenceRaster {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self, RasterError> {
        check_dims(width, height, data.len())?;
        if let Some((i, &v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(RasterError::ConfidenceOutOfRange(v, i));
        }
        Ok(ConfidenceRaster { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        assert!(width > 0 && height > 0, "raster must be non-empty");
        assert!((0.0..=1.0).contains(&value), "confidence must be in [0, 1]");
        ConfidenceRaster {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Sets one pixel; values are clamped into `[0, 1]`.
    pub fn set_index(&mut self, index: usize, value: f32) {
        self.data[index] = value.clamp(0.0, 1.0);
    }

    /// Bitwise comparison, so that `NaN`-free rasters compare exactly.
    pub fn bitwise_eq(&self, other: &ConfidenceRaster) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], width: u32, height: u32) {
    out.extend_from_slice(magic);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
}

fn read_header<'a>(bytes: &'a [u8], magic: &[u8; 4], bytes_per_pixel: usize) -> Result<(u32, u32, &'a [u8]), RasterError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != magic {
            return Err(RasterError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(RasterError::Truncated { expected: HEADER_LEN, got: bytes.len() });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if &found != magic {
        return Err(RasterError::BadMagic(found));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(RasterError::UnsupportedVersion(bytes[4]));
    }
    let width = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
    if width == 0 || height == 0 {
        return Err(RasterError::EmptyDimensions(width, height));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = width as usize * height as usize * bytes_per_pixel;
    if payload.len() < expected {
        return Err(RasterError::Truncated {
            expected: HEADER_LEN + expected,
            got: bytes.len(),
        });
    }
    if payload.len() > expected {
        return Err(RasterError::TrailingBytes(payload.len() - expected));
    }
    Ok((width, height, payload))
}

pub fn write_raster(raster: &LabelRaster) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + raster.data.len());
    write_header(&mut out, LABEL_MAGIC, raster.width, raster.height);
    out.extend_from_slice(&raster.data);
    out
}

pub fn read_raster(bytes: &[u8]) -> Result<LabelRaster, RasterError> {
    let (width, height, payload) = read_header(bytes, LABEL_MAGIC, 1)?;
    LabelRaster::new(width, height, payload.to_vec())
}

pub fn write_confidence(raster: &ConfidenceRaster) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + raster.data.len() * 4);
    write_header(&mut out, CONFIDENCE_MAGIC, raster.width, raster.height);
    for v in &raster.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_confidence(bytes: &[u8]) -> Result<ConfidenceRaster, RasterError> {
    let (width, height, payload) = read_header(bytes, CONFIDENCE_MAGIC, 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ConfidenceRaster::new(width, height, data)
}

pub fn crop(raster: &LabelRaster, bbox: &BBox) -> Result<LabelRaster, RasterError> {
    if !bbox.fits(raster.width, raster.height) {
        return Err(RasterError::OutOfBounds {
            bbox: *bbox,
            width: raster.width,
            height: raster.height,
        });
    }
    let mut data = Vec::with_capacity(bbox.area() as usize);
    for y in bbox.y_min..bbox.y_max {
        let start = raster.index(bbox.x_min, y);
        data.extend_from_slice(&raster.data[start..start + bbox.width() as usize]);
    }
    LabelRaster::new(bbox.width(), bbox.height(), data)
}

/// Writes `src` into `dst` with its top-left corner at `origin`.
pub fn paste_into(dst: &mut LabelRaster, src: &LabelRaster, origin: (u32, u32)) -> Result<(), RasterError> {
    let (x, y) = origin;
    let region = BBox {
        x_min: x,
        y_min: y,
        x_max: x.saturating_add(src.width),
        y_max: y.saturating_add(src.height),
    };
    if !region.fits(dst.width, dst.height) {
        return Err(RasterError::OutOfBounds {
            bbox: region,
            width: dst.width,
            height: dst.height,
        });
    }
    let w = src.width as usize;
    for row in 0..src.height {
        let d = dst.index(x, y + row);
        let s = row as usize * w;
        dst.data[d..d + w].copy_from_slice(&src.data[s..s + w]);
    }
    Ok(())
}

pub fn paste(dst: &LabelRaster, src: &LabelRaster, origin: (u32, u32)) -> Result<LabelRaster, RasterError> {
    let mut out = dst.clone();
    paste_into(&mut out, src, origin)?;
    Ok(out)
}

/// Non-ignore pixel counts per class.
pub fn class_histogram(raster: &LabelRaster) -> BTreeMap<ClassId, u64> {
    let mut all = raster.histogram_with_ignore();
    all.remove(&IGNORE_ID);
    all
}

/// Tight boxes of the 4-connected components of `class_id`, ordered by each
/// component's first pixel in scanline order.
///
/// Two-pass labeling with a union-find over provisional labels.
pub fn connected_components(raster: &LabelRaster, class_id: ClassId) -> Vec<BBox> {
    let (w, h) = (raster.width as usize, raster.height as usize);
    let mut labels = vec![0u32; w * h];
    // parent[0] is the background sentinel.
    let mut parent: Vec<u32> = vec![0];

    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if raster.data[i] != class_id {
                continue;
            }
            let left = if x > 0 { labels[i - 1] } else { 0 };
            let up = if y > 0 { labels[i - w] } else { 0 };
            labels[i] = match (left, up) {
                (0, 0) => {
                    let l = parent.len() as u32;
                    parent.push(l);
                    l
                }
                (l, 0) | (0, l) => l,
                (a, b) => {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        let (lo, hi) = (ra.min(rb), ra.max(rb));
                        parent[hi as usize] = lo;
                    }
                    a.min(b)
                }
            };
        }
    }

    let mut slot: Vec<Option<usize>> = vec![None; parent.len()];
    let mut boxes: Vec<BBox> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == 0 {
                continue;
            }
            let root = find(&mut parent, l) as usize;
            let (x, y) = (x as u32, y as u32);
            match slot[root] {
                Some(k) => {
                    let b = &mut boxes[k];
                    b.x_min = b.x_min.min(x);
                    b.y_min = b.y_min.min(y);
                    b.x_max = b.x_max.max(x + 1);
                    b.y_max = b.y_max.max(y + 1);
                }
                None => {
                    slot[root] = Some(boxes.len());
                    boxes.push(BBox { x_min: x, y_min: y, x_max: x + 1, y_max: y + 1 });
                }
            }
        }
    }
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota4() -> LabelRaster {
        LabelRaster::new(4, 4, (0..16).collect()).unwrap()
    }

    #[test]
    fn smallest_file() {
        let bytes = write_raster(&LabelRaster::new(1, 1, vec![7]).unwrap());
        assert_eq!(bytes, b"CSIL\x01\x01\x00\x00\x00\x01\x00\x00\x00\x07");
        assert_eq!(bytes.len(), 14);
        assert_eq!(read_raster(&bytes).unwrap().data(), [7]);
    }

    #[test]
    fn read_errors() {
        let mut bytes = write_raster(&iota4());
        assert_eq!(read_raster(&bytes[..20]), Err(RasterError::Truncated { expected: 29, got: 20 }));
        bytes.push(0);
        assert_eq!(read_raster(&bytes), Err(RasterError::TrailingBytes(1)));
        bytes.pop();
        bytes[4] = 2;
        assert_eq!(read_raster(&bytes), Err(RasterError::UnsupportedVersion(2)));
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(read_raster(&bytes), Err(RasterError::BadMagic(*b"XXXX")));
        // a label file is not a confidence file
        assert!(matches!(
            read_confidence(&write_raster(&iota4())),
            Err(RasterError::BadMagic(_))
        ));
    }

    #[test]
    fn confidence_file_layout() {
        let r = ConfidenceRaster::new(2, 1, vec![0.5, 1.0]).unwrap();
        let bytes = write_confidence(&r);
        assert_eq!(&bytes[..5], b"CSIF\x01");
        assert_eq!(&bytes[13..17], &0.5f32.to_le_bytes());
        assert!(read_confidence(&bytes).unwrap().bitwise_eq(&r));
        assert!(matches!(
            ConfidenceRaster::new(1, 1, vec![1.5]),
            Err(RasterError::ConfidenceOutOfRange(..))
        ));
    }

    #[test]
    fn crop_by_hand() {
        let r = iota4();
        assert_eq!(crop(&r, &BBox::full(4, 4)).unwrap(), r);
        assert_eq!(crop(&r, &BBox::new(1, 1, 3, 3).unwrap()).unwrap().data(), [5, 6, 9, 10]);
        assert!(matches!(
            crop(&r, &BBox::new(2, 0, 5, 1).unwrap()),
            Err(RasterError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn paste_cases() {
        let r = iota4();
        let b = BBox::new(1, 2, 4, 4).unwrap();
        assert_eq!(paste(&r, &crop(&r, &b).unwrap(), (1, 2)).unwrap(), r);

        let (car, truck) = (13, 14);
        let out = paste(&LabelRaster::filled(2, 2, car), &LabelRaster::filled(1, 1, truck), (0, 0)).unwrap();
        assert_eq!(out.data(), [truck, car, car, car]);

        assert!(paste(&r, &LabelRaster::filled(3, 3, 0), (2, 2)).is_err());
    }

    #[test]
    fn histogram_cases() {
        assert!(class_histogram(&LabelRaster::filled(3, 3, IGNORE_ID)).is_empty());
        let r = LabelRaster::new(2, 2, vec![13, 13, 15, IGNORE_ID]).unwrap();
        assert_eq!(class_histogram(&r), BTreeMap::from([(13, 2), (15, 1)]));
    }

    #[test]
    fn components_two_blocks() {
        let mut r = LabelRaster::filled(8, 8, 0);
        for (x0, y0) in [(0, 0), (4, 4)] {
            for y in y0..y0 + 2 {
                for x in x0..x0 + 2 {
                    r.set(x, y, 5);
                }
            }
        }
        assert_eq!(
            connected_components(&r, 5),
            vec![BBox::new(0, 0, 2, 2).unwrap(), BBox::new(4, 4, 6, 6).unwrap()]
        );
        assert!(connected_components(&r, 9).is_empty());
        assert_eq!(connected_components(&LabelRaster::filled(5, 3, 1), 1), vec![BBox::full(5, 3)]);
    }

    #[test]
    fn components_merge_u_shape() {
        // Two arms meet only at the bottom row; union-find must merge them.
        #[rustfmt::skip]
        let r = LabelRaster::new(3, 3, vec![
            1, 0, 1,
            1, 0, 1,
            1, 1, 1,
        ]).unwrap();
        assert_eq!(connected_components(&r, 1), vec![BBox::full(3, 3)]);
        // diagonal neighbours are separate under 4-connectivity
        let d = LabelRaster::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(connected_components(&d, 1).len(), 2);
    }

    #[test]
    fn bbox_clip() {
        let b = BBox::new(2, 1, 6, 3).unwrap();
        assert_eq!(b.clip(4, 4), Some(BBox::new(2, 1, 4, 3).unwrap()));
        assert_eq!(BBox::new(5, 0, 7, 1).unwrap().clip(4, 4), None);
        assert!(BBox::new(3, 0, 3, 1).is_err());
    }
}
