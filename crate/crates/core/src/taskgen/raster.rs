//! Aliasing-free rasterization and binary PPM (P6) encoding.

use super::scene::SceneObject;
use super::TaskGenError;

/// Square canvas side in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Resolution(usize);

impl Resolution {
    pub const ALLOWED: [usize; 3] = [32, 64, 128];

    pub fn new(px: usize) -> Result<Self, TaskGenError> {
        if Self::ALLOWED.contains(&px) {
            Ok(Self(px))
        } else {
            Err(TaskGenError::Resolution(px))
        }
    }

    pub fn px(self) -> usize {
        self.0
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Self(64)
    }
}

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height * 3).then_some(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixels with any non-zero channel.
    pub fn nonzero_pixels(&self) -> usize {
        self.data.chunks_exact(3).filter(|p| p.iter().any(|&c| c != 0)).count()
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses binary PPM with maxval 255. Comments are accepted on read.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err("not a binary PPM (P6)".into());
        }
        let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad PPM number {s:?}"));
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let start = pos + 1;
        let need = width * height * 3;
        if bytes.len() < start + need {
            return Err("truncated PPM raster".into());
        }
        if bytes.len() > start + need {
            return Err("trailing bytes after PPM raster".into());
        }
        Ok(Self {
            width,
            height,
            data: bytes[start..].to_vec(),
        })
    }
}

/// Pixel-center sampling; later objects overdraw earlier ones.
pub fn rasterize(objects: &[SceneObject], res: Resolution) -> Result<RgbImage, TaskGenError> {
    let n = res.px();
    let margin = 1.0 / n as f64;
    for (i, o) in objects.iter().enumerate() {
        let r = o.radius();
        let fits = o.center[0] - r >= margin
            && o.center[0] + r <= 1.0 - margin
            && o.center[1] - r >= margin
            && o.center[1] + r <= 1.0 - margin;
        if !fits {
            return Err(TaskGenError::OutOfCanvas { index: i });
        }
        if o.size * n as f64 <= 2.0 {
            return Err(TaskGenError::TooSmall { index: i });
        }
    }
    let mut img = RgbImage::black(n, n);
    for o in objects {
        let r = o.radius();
        let lo_x = ((o.center[0] - r) * n as f64).floor().max(0.0) as usize;
        let hi_x = (((o.center[0] + r) * n as f64).ceil() as usize).min(n);
        let lo_y = ((o.center[1] - r) * n as f64).floor().max(0.0) as usize;
        let hi_y = (((o.center[1] + r) * n as f64).ceil() as usize).min(n);
        for py in lo_y..hi_y {
            for px in lo_x..hi_x {
                let p = [(px as f64 + 0.5) / n as f64, (py as f64 + 0.5) / n as f64];
                if o.contains(p) {
                    img.set_pixel(px, py, o.color);
                }
            }
        }
    }
    Ok(img)
}
