use crate::error::{Error, Result};

/// 8-bit RGBA raster with straight (non-premultiplied) alpha, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct AlphaRaster {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for AlphaRaster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AlphaRaster")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl AlphaRaster {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster(format!(
                "dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 4;
        if data.len() != expected {
            return Err(Error::InvalidRaster(format!(
                "buffer holds {} bytes, {width}x{height} RGBA needs {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Fully transparent raster.
    pub fn transparent(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, vec![0; width as usize * height as usize * 4])
    }

    pub fn filled(width: u32, height: u32, rgba: [u8; 4]) -> Result<Self> {
        let n = width as usize * height as usize;
        Self::new(width, height, rgba.repeat(n))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        [
            self.data[i],
            self.data[i + 1],
            self.data[i + 2],
            self.data[i + 3],
        ]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, px: [u8; 4]) {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        self.data[i..i + 4].copy_from_slice(&px);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 4]> + '_ {
        self.data.chunks_exact(4).map(|p| [p[0], p[1], p[2], p[3]])
    }

    /// Fraction of pixels with non-zero alpha.
    pub fn coverage(&self) -> f64 {
        let covered = self.data.chunks_exact(4).filter(|p| p[3] > 0).count();
        covered as f64 / self.pixel_count() as f64
    }

    /// Mean alpha in [0, 1].
    pub fn alpha_mass(&self) -> f64 {
        let sum: u64 = self.data.chunks_exact(4).map(|p| p[3] as u64).sum();
        sum as f64 / (255.0 * self.pixel_count() as f64)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Copy of the rectangle `[x0, x0+w) x [y0, y0+h)`, which must lie inside the raster.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidRaster(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(w as usize * h as usize * 4);
        for y in y0..y0 + h {
            let start = (y as usize * self.width as usize + x0 as usize) * 4;
            out.extend_from_slice(&self.data[start..start + w as usize * 4]);
        }
        Self::new(w, h, out)
    }

    /// Composite over an opaque backdrop colour.
    pub fn flatten(&self, backdrop: [u8; 3]) -> RgbRaster {
        let mut out = Vec::with_capacity(self.pixel_count() * 3);
        for p in self.data.chunks_exact(4) {
            let a = p[3] as f32 / 255.0;
            for c in 0..3 {
                let v = p[c] as f32 * a + backdrop[c] as f32 * (1.0 - a);
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        RgbRaster {
            width: self.width,
            height: self.height,
            data: out,
        }
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbRaster {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for RgbRaster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RgbRaster")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RgbRaster {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster(format!(
                "dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::InvalidRaster(format!(
                "buffer holds {} bytes, {width}x{height} RGB needs {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width as usize * height as usize))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, px: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Attach a matte as the alpha channel.
    pub fn with_matte(&self, matte: &Matte) -> Result<AlphaRaster> {
        if matte.dims() != self.dims() {
            return Err(Error::DimensionMismatch(format!(
                "matte {:?} vs image {:?}",
                matte.dims(),
                self.dims()
            )));
        }
        let mut out = Vec::with_capacity(self.data.len() / 3 * 4);
        for (p, &a) in self.data.chunks_exact(3).zip(matte.values()) {
            out.extend_from_slice(p);
            out.push((a.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        AlphaRaster::new(self.width, self.height, out)
    }

    pub fn opaque(&self) -> AlphaRaster {
        let mut out = Vec::with_capacity(self.data.len() / 3 * 4);
        for p in self.data.chunks_exact(3) {
            out.extend_from_slice(p);
            out.push(255);
        }
        AlphaRaster {
            width: self.width,
            height: self.height,
            data: out,
        }
    }
}

/// Single-channel matte with values in [0, 1].
#[derive(Clone, PartialEq)]
pub struct Matte {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl std::fmt::Debug for Matte {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Matte")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Matte {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::InvalidRaster(format!(
                "matte buffer holds {} values, {width}x{height} needs {}",
                data.len(),
                width as usize * height as usize
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidRaster(format!("matte value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Fraction of pixels with a non-zero matte value.
    pub fn coverage(&self) -> f64 {
        self.data.iter().filter(|&&v| v > 0.0).count() as f64 / self.data.len() as f64
    }

    /// Tight bounding box `(x, y, w, h)` of non-zero values, if any.
    pub fn support_bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(x, y) > 0.0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != u32::MAX).then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(AlphaRaster::new(0, 4, vec![]).is_err());
        assert!(AlphaRaster::new(2, 2, vec![0; 15]).is_err());
        assert!(RgbRaster::new(2, 2, vec![0; 11]).is_err());
        assert!(Matte::new(1, 1, vec![1.5]).is_err());
    }

    #[test]
    fn flatten_blends_over_backdrop() {
        let r = AlphaRaster::filled(1, 1, [255, 0, 0, 128]).unwrap();
        let flat = r.flatten([0, 0, 255]);
        assert_eq!(flat.pixel(0, 0), [128, 0, 127]);
    }

    #[test]
    fn matte_support_bbox() {
        let mut v = vec![0.0; 16];
        v[5] = 0.5;
        v[10] = 1.0;
        let m = Matte::new(4, 4, v).unwrap();
        assert_eq!(m.support_bbox(), Some((1, 1, 2, 2)));
        assert_eq!(Matte::new(2, 2, vec![0.0; 4]).unwrap().support_bbox(), None);
    }
}
