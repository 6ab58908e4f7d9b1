//! Binary PPM (`P6`) / PGM (`P5`) reading and writing, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit image, channel-planar (`[C, H, W]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub planes: Vec<u8>,
}

impl Image8 {
    pub fn new(channels: usize, width: usize, height: usize) -> Self {
        Self {
            channels,
            width,
            height,
            planes: vec![0; channels * width * height],
        }
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> u8 {
        self.planes[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: u8) {
        self.planes[(c * self.height + y) * self.width + x] = v;
    }

    /// Netpbm bytes: `P5` for one channel, `P6` (interleaved) for three.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::Data(format!("cannot encode {c}-channel image as netpbm"))),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.width * self.height;
        out.reserve(plane * self.channels);
        for i in 0..plane {
            for c in 0..self.channels {
                out.push(self.planes[c * plane + i]);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("netpbm: {m}"));
        let mut pos = 0;
        let mut token = || -> Result<String> {
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
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(bad(&format!("unsupported magic `{other}`"))),
        };
        let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval != 255 || width == 0 || height == 0 {
            return Err(bad("only non-empty 8-bit images are supported"));
        }
        // exactly one whitespace byte separates header and raster
        let raster = &bytes[pos + 1..];
        let plane = width * height;
        if raster.len() != plane * channels {
            return Err(bad("raster size does not match header"));
        }
        let mut img = Self::new(channels, width, height);
        for i in 0..plane {
            for c in 0..channels {
                img.planes[c * plane + i] = raster[i * channels + c];
            }
        }
        Ok(img)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::decode(&bytes)
    }
}

/// Min-max normalizes a real-valued map to a grayscale image. Constant maps
/// become all zeros.
pub fn normalized_gray(values: &[f32], width: usize, height: usize) -> Image8 {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let mut img = Image8::new(1, width, height);
    for (dst, &v) in img.planes.iter_mut().zip(values) {
        *dst = if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
    }
    img
}
