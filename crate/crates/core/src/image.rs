//! Planar RGB images and their PNG / PFM encodings.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{with_path, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RGB image stored as three planes (`[3, H, W]`), nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Image { width, height, data }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::contract(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::contract(format!("image tensor must be [3, H, W], got {s:?}")));
        }
        Ok(Image {
            width: s[2],
            height: s[1],
            data: t.data().iter().map(|v| v.f64()).collect(),
        })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![3, self.height, self.width],
            self.data.iter().map(|&v| T::of(v)).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        std::array::from_fn(|c| self.get(c, y, x))
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Channel mean per pixel, row-major.
    pub fn grayscale(&self) -> Vec<f64> {
        let n = self.width * self.height;
        (0..n)
            .map(|i| (self.data[i] + self.data[n + i] + self.data[2 * n + i]) / 3.0)
            .collect()
    }

    pub fn same_size(&self, other: &Image) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::contract(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
    pub fn write_png(&self, out: impl Write) -> Result<()> {
        let mut enc = png::Encoder::new(out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_error)?;
        let mut bytes = Vec::with_capacity(3 * self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    bytes.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        writer.write_image_data(&bytes).map_err(png_error)?;
        writer.finish().map_err(png_error)?;
        Ok(())
    }

    pub fn read_png(mut input: impl Read) -> Result<Self> {
        let mut encoded = Vec::new();
        input.read_to_end(&mut encoded)?;
        let mut decoder = png::Decoder::new(std::io::Cursor::new(encoded));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(png_error)?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format("PNG too large"))?];
        let info = reader.next_frame(&mut buf).map_err(png_error)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let px = &buf[y * info.line_size + x * channels..][..channels];
                let rgb = match channels {
                    1 | 2 => [px[0]; 3],
                    _ => [px[0], px[1], px[2]],
                };
                img.set_pixel(y, x, rgb.map(|v| v as f64 / 255.0));
            }
        }
        Ok(img)
    }

    /// Little-endian RGB PFM (`PF`, scale `-1.0`, rows bottom to top).
    pub fn write_pfm(&self, mut out: impl Write) -> Result<()> {
        let mut bytes = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in 0..3 {
                    bytes.extend_from_slice(&(self.get(c, y, x) as f32).to_le_bytes());
                }
            }
        }
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_pfm(input: impl Read) -> Result<Self> {
        let mut r = BufReader::new(input);
        let mut tokens = Vec::new();
        let mut line = String::new();
        while tokens.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::format("truncated PFM header"));
            }
            tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "PF" {
            return Err(Error::format(format!("unsupported PFM type {:?}", tokens[0])));
        }
        let parse = |t: &str| t.parse::<usize>().map_err(|_| Error::format(format!("bad PFM size {t:?}")));
        let (w, h) = (parse(&tokens[1])?, parse(&tokens[2])?);
        let scale: f64 = tokens[3]
            .parse()
            .map_err(|_| Error::format(format!("bad PFM scale {:?}", tokens[3])))?;
        let mut payload = vec![0u8; 12 * w * h];
        r.read_exact(&mut payload)
            .map_err(|_| Error::format("truncated PFM payload"))?;
        let value = |b: &[u8]| {
            let b: [u8; 4] = b.try_into().unwrap();
            if scale < 0.0 {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        };
        let mut img = Image::new(w, h);
        for (row, chunk) in payload.chunks_exact(12 * w).enumerate() {
            let y = h - 1 - row;
            for x in 0..w {
                for c in 0..3 {
                    img.set(c, y, x, value(&chunk[12 * x + 4 * c..12 * x + 4 * c + 4]) as f64);
                }
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = with_path(path, File::create(path))?;
        self.write_png(BufWriter::new(file))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Image::read_png(with_path(path, File::open(path))?)
    }

    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let file = with_path(path, File::create(path))?;
        self.write_pfm(BufWriter::new(file))
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        Image::read_pfm(with_path(path, File::open(path))?)
    }

    /// Loads by extension: `.pfm` or `.png`.
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pfm") => Image::load_pfm(path),
            _ => Image::load_png(path),
        }
    }
}

fn png_error(e: impl std::fmt::Display) -> Error {
    Error::format(format!("png: {e}"))
}
