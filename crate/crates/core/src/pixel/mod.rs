//! Tokenizer-free image path: every RGB pixel becomes one token by
//! quantizing each channel to `q` bins and packing the three bin indices.

mod netpbm;

pub use netpbm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm, GrayImage};

use crate::error::{Error, Result};
use crate::token::{Token, TokenGrid, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    /// Row-major interleaved RGB.
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "expected {} bytes for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(height, width, rgb.repeat(height * width))
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

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Bins per channel; the codebook has `q^3` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizerConfig {
    q: u32,
}

impl QuantizerConfig {
    /// `q` must divide 256.
    pub fn new(q: u32) -> Result<Self> {
        if !(2..=256).contains(&q) || 256 % q != 0 {
            return Err(Error::invalid(format!("q = {q} must be a divisor of 256 in [2, 256]")));
        }
        Ok(Self { q })
    }

    pub fn q(&self) -> u32 {
        self.q
    }

    pub fn bin_width(&self) -> u32 {
        256 / self.q
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.q * self.q * self.q).expect("q >= 2")
    }
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self { q: 16 }
    }
}

pub fn quantize_pixel(r: u8, g: u8, b: u8, q: QuantizerConfig) -> Token {
    let bw = q.bin_width();
    let (r, g, b) = (r as u32 / bw, g as u32 / bw, b as u32 / bw);
    r + g * q.q + b * q.q * q.q
}

/// Bin centers of the token's three channel bins.
pub fn dequantize_token(token: Token, q: QuantizerConfig) -> Result<[u8; 3]> {
    let qq = q.q;
    if token >= qq * qq * qq {
        return Err(Error::invalid(format!("token {token} outside [0, {})", qq * qq * qq)));
    }
    let bw = q.bin_width();
    let center = |bin: u32| (bin * bw + bw / 2) as u8;
    Ok([center(token % qq), center(token / qq % qq), center(token / (qq * qq))])
}

pub fn encode_image(image: &RgbImage, q: QuantizerConfig) -> TokenGrid {
    let cells = image
        .data
        .chunks_exact(3)
        .map(|p| quantize_pixel(p[0], p[1], p[2], q))
        .collect();
    TokenGrid::from_cells(image.height, image.width, q.vocab(), cells).expect("tokens fit the codebook")
}

pub fn decode_grid(grid: &TokenGrid, q: QuantizerConfig) -> Result<RgbImage> {
    if grid.vocab() != q.vocab() {
        return Err(Error::invalid(format!(
            "grid codebook {} does not match q^3 = {}",
            grid.vocab().size(),
            q.vocab().size()
        )));
    }
    let mut data = Vec::with_capacity(grid.len() * 3);
    for p in 0..grid.len() {
        if grid.is_masked(p) {
            return Err(Error::invalid(format!("cannot decode masked cell {p}")));
        }
        data.extend(dequantize_token(grid.get(p), q)?);
    }
    RgbImage::new(grid.height(), grid.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q16() -> QuantizerConfig {
        QuantizerConfig::default()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_pixel(0, 0, 0, q16()), 0);
        assert_eq!(quantize_pixel(255, 255, 255, q16()), 4095);
        assert_eq!(quantize_pixel(16, 0, 0, q16()), 1);
        assert_eq!(quantize_pixel(15, 0, 0, q16()), 0);
        assert_eq!(quantize_pixel(0, 16, 0, q16()), 16);
        assert_eq!(quantize_pixel(0, 0, 16, q16()), 256);
        assert_eq!(q16().vocab().size(), 4096);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize_token(0, q16()).unwrap(), [8, 8, 8]);
        assert_eq!(dequantize_token(4095, q16()).unwrap(), [248, 248, 248]);
        assert!(dequantize_token(4096, q16()).is_err());
    }

    #[test]
    fn bin_centers_round_trip_for_every_token() {
        for q in [2, 4, 8, 16, 32] {
            let cfg = QuantizerConfig::new(q).unwrap();
            for t in 0..q * q * q {
                let [r, g, b] = dequantize_token(t, cfg).unwrap();
                assert_eq!(quantize_pixel(r, g, b, cfg), t);
            }
        }
    }

    #[test]
    fn quantizer_rejects_non_divisors() {
        assert!(QuantizerConfig::new(10).is_err());
        assert!(QuantizerConfig::new(1).is_err());
        assert!(QuantizerConfig::new(256).is_ok());
    }

    #[test]
    fn decode_rejects_masks_and_wrong_codebook() {
        let mut g = TokenGrid::from_cells(1, 2, q16().vocab(), vec![3, 4]).unwrap();
        assert!(decode_grid(&g, QuantizerConfig::new(8).unwrap()).is_err());
        g.mask_positions(&[1]).unwrap();
        assert!(decode_grid(&g, q16()).is_err());
    }

    #[test]
    fn constant_image_gives_constant_grid() {
        let img = RgbImage::filled(3, 5, [200, 17, 90]).unwrap();
        let g = encode_image(&img, q16());
        assert!(g.cells().iter().all(|&c| c == g.get(0)));
    }

    fn image() -> impl Strategy<Value = RgbImage> {
        (1usize..64, 1usize..64).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<u8>(), h * w * 3)
                .prop_map(move |d| RgbImage::new(h, w, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn reconstruction_error_is_at_most_half_a_bin(img in image()) {
            let g = encode_image(&img, q16());
            prop_assert_eq!((g.height(), g.width()), (img.height(), img.width()));
            let back = decode_grid(&g, q16()).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((*a as i32 - *b as i32).abs() <= 8);
            }
            prop_assert_eq!(encode_image(&back, q16()), g);
        }

        #[test]
        fn monotone_per_channel(r in any::<u8>(), r2 in any::<u8>(), g in any::<u8>(), b in any::<u8>()) {
            let (lo, hi) = (r.min(r2), r.max(r2));
            prop_assert!(quantize_pixel(lo, g, b, q16()) <= quantize_pixel(hi, g, b, q16()));
        }
    }

    #[test]
    fn quantizer_is_surjective() {
        let mut seen = vec![false; 4096];
        for r in (0..=255u8).step_by(16) {
            for g in (0..=255u8).step_by(16) {
                for b in (0..=255u8).step_by(16) {
                    seen[quantize_pixel(r, g, b, q16()) as usize] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}
