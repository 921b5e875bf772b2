//! Dense 2-D class-id maps.
//!
//! Class id `0` is the ignore label everywhere in this crate; real classes
//! are `1..=num_classes`. Network channel `c` therefore corresponds to class
//! id `c + 1`.

use std::fmt;

/// Class id reserved for "no annotation / ignore".
pub const IGNORE: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub enum LabelError {
    DataLength { expected: usize, got: usize },
    ZeroSize,
}

impl fmt::Display for LabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelError::DataLength { expected, got } => {
                write!(f, "label payload holds {got} entries, expected {expected}")
            }
            LabelError::ZeroSize => write!(f, "label maps need at least one pixel"),
        }
    }
}

impl std::error::Error for LabelError {}

/// Row-major `height x width` grid of class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, LabelError> {
        if height == 0 || width == 0 {
            return Err(LabelError::ZeroSize);
        }
        if data.len() != height * width {
            return Err(LabelError::DataLength {
                expected: height * width,
                got: data.len(),
            });
        }
        Ok(LabelMap { height, width, data })
    }

    /// All-ignore map.
    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    /// Largest class id present (0 for an all-ignore map).
    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Pixel count per class id in `0..=classes`.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; classes + 1];
        for &c in &self.data {
            if (c as usize) <= classes {
                counts[c as usize] += 1;
            }
        }
        counts
    }

    /// Nearest-neighbour resize with the integer mapping
    /// `src = dst * src_extent / dst_extent`, which is exact and keeps the
    /// result independent of floating-point rounding.
    pub fn nearest_resize(&self, out_h: usize, out_w: usize) -> LabelMap {
        assert!(out_h > 0 && out_w > 0, "resize target must be non-empty");
        let mut data = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let sy = oy * self.height / out_h;
            for ox in 0..out_w {
                let sx = ox * self.width / out_w;
                data.push(self.data[sy * self.width + sx]);
            }
        }
        LabelMap {
            height: out_h,
            width: out_w,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_checks_payload() {
        assert!(LabelMap::new(2, 2, vec![0, 1, 2]).is_err());
        assert!(LabelMap::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn downsample_by_two_picks_top_left_of_each_block() {
        let m = LabelMap::new(2, 4, vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let r = m.nearest_resize(1, 2);
        assert_eq!(r.data(), &[1, 3]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let m = LabelMap::new(1, 2, vec![7, 9]).unwrap();
        let r = m.nearest_resize(2, 4);
        assert_eq!(r.data(), &[7, 7, 9, 9, 7, 7, 9, 9]);
    }

    #[test]
    fn resize_round_trip_identity_when_sizes_match() {
        let m = LabelMap::new(3, 3, (0..9).collect()).unwrap();
        assert_eq!(m.nearest_resize(3, 3), m);
    }

    #[test]
    fn histogram_counts_ignore_separately() {
        let m = LabelMap::new(1, 4, vec![0, 2, 2, 1]).unwrap();
        assert_eq!(m.histogram(2), vec![1, 1, 2]);
    }
}
