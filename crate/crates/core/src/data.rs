//! Datasets: image folders on disk, plain-text token grids, and small
//! synthetic corpora with known structure.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pixel::{encode_image, read_ppm, QuantizerConfig, RgbImage};
use crate::token::{Token, TokenGrid, Vocabulary};
use crate::training::LabeledGrid;

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    pub path: PathBuf,
    pub label: usize,
    pub image: RgbImage,
}

/// Reads `dir/index.csv` (`file,label` with a header row) and the PPM files it
/// names. Without an index every `*.ppm` in the folder is loaded, sorted by
/// name, with label 0.
pub fn load_image_dir(dir: &Path) -> Result<Vec<ImageEntry>> {
    let index = dir.join(INDEX_FILE);
    let listing: Vec<(PathBuf, usize)> = if index.exists() {
        let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if i == 0 || line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Config { line: i + 1, message };
            let (file, label) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("expected `file,label`, got `{line}`")))?;
            let label = label
                .trim()
                .parse()
                .map_err(|_| bad(format!("label `{}` is not a class index", label.trim())))?;
            rows.push((dir.join(file.trim()), label));
        }
        rows
    } else {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        files.sort();
        files.into_iter().map(|p| (p, 0)).collect()
    };
    if listing.is_empty() {
        return Err(Error::invalid(format!("no images in {}", dir.display())));
    }
    listing
        .into_iter()
        .map(|(path, label)| {
            let image = read_ppm(&path)?;
            Ok(ImageEntry { path, label, image })
        })
        .collect()
}

/// Encodes every image; all must share one size.
pub fn encode_dataset(entries: &[ImageEntry], q: QuantizerConfig) -> Result<Vec<LabeledGrid>> {
    let first = entries
        .first()
        .ok_or_else(|| Error::invalid("empty dataset"))?;
    let (h, w) = (first.image.height(), first.image.width());
    entries
        .iter()
        .map(|e| {
            if (e.image.height(), e.image.width()) != (h, w) {
                return Err(Error::invalid(format!(
                    "{} is {}x{}, expected {h}x{w}",
                    e.path.display(),
                    e.image.height(),
                    e.image.width()
                )));
            }
            Ok((encode_image(&e.image, q), e.label))
        })
        .collect()
}

/// One row of space-separated integers per grid row; masked cells print as
/// the mask id.
pub fn grid_to_text(grid: &TokenGrid) -> String {
    let mut out = String::new();
    for row in grid.cells().chunks(grid.width()) {
        let line: Vec<String> = row.iter().map(Token::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn grid_from_text(text: &str, vocab: Vocabulary) -> Result<TokenGrid> {
    let mut cells = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<Token> = line
            .split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| Error::Config {
                    line: i + 1,
                    message: format!("`{t}` is not a token"),
                })
            })
            .collect::<Result<_>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::Config {
                line: i + 1,
                message: "ragged grid row".into(),
            });
        }
        cells.extend(row);
        height += 1;
    }
    TokenGrid::from_cells(height, width.unwrap_or(0), vocab, cells)
}

/// Grids of one-cell-wide stripes. Class 0 stripes run horizontally (each row
/// constant), class 1 vertically. Stripe `j` has token `(offset + j * step) mod
/// V` for a random offset and a random odd step, so colors never repeat within
/// 16 stripes when V is a power of two.
pub fn stripes(count: usize, h: usize, w: usize, vocab: Vocabulary, seed: u64) -> Vec<LabeledGrid> {
    let v = vocab.size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let label = rng.gen_range(0..2usize);
            let offset = rng.gen_range(0..v);
            let step = 2 * rng.gen_range(0..v / 2) + 1;
            let cells = (0..h * w)
                .map(|p| {
                    let j = if label == 0 { p / w } else { p % w } as u32;
                    (offset + j * step) % v
                })
                .collect();
            let grid = TokenGrid::from_cells(h, w, vocab, cells).expect("tokens below V");
            (grid, label)
        })
        .collect()
}

/// Smooth two-color gradient images, a stand-in for a tiny photo set.
pub fn gradient_images(count: usize, h: usize, w: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a: [u8; 3] = rng.gen();
            let b: [u8; 3] = rng.gen();
            let vertical = rng.gen_bool(0.5);
            let mut img = RgbImage::filled(h, w, a).expect("positive size");
            for r in 0..h {
                for c in 0..w {
                    let t = if vertical { r as f64 / h as f64 } else { c as f64 / w as f64 };
                    let mix = |x: u8, y: u8| (x as f64 * (1.0 - t) + y as f64 * t).round() as u8;
                    img.set_pixel(r, c, [mix(a[0], b[0]), mix(a[1], b[1]), mix(a[2], b[2])]);
                }
            }
            img
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pixel::write_ppm;

    #[test]
    fn stripes_have_the_promised_structure() {
        let v = Vocabulary::new(16).unwrap();
        for (g, label) in stripes(50, 8, 8, v, 3) {
            for r in 0..8 {
                for c in 0..8 {
                    let p = r * 8 + c;
                    let same = if label == 0 { r * 8 } else { c };
                    assert_eq!(g.get(p), g.get(same));
                }
            }
            let lines: Vec<Token> = (0..8).map(|j| if label == 0 { g.get(j * 8) } else { g.get(j) }).collect();
            let mut uniq = lines.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 8);
        }
        assert_eq!(stripes(5, 4, 4, v, 1), stripes(5, 4, 4, v, 1));
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::new(10).unwrap();
        let mut g = TokenGrid::from_cells(2, 3, v, vec![1, 2, 3, 9, 0, 4]).unwrap();
        g.mask_positions(&[4]).unwrap();
        let text = grid_to_text(&g);
        assert_eq!(text, "1 2 3\n9 10 4\n");
        assert_eq!(grid_from_text(&text, v).unwrap(), g);
        assert!(grid_from_text("1 2\n3\n", v).is_err());
        assert!(grid_from_text("1 x\n", v).is_err());
        assert!(grid_from_text("1 11\n", v).is_err());
    }

    #[test]
    fn image_dir_with_and_without_index() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = gradient_images(3, 4, 5, 0);
        for (i, img) in imgs.iter().enumerate() {
            write_ppm(img, &dir.path().join(format!("{i}.ppm"))).unwrap();
        }
        let plain = load_image_dir(dir.path()).unwrap();
        assert_eq!(plain.len(), 3);
        assert!(plain.iter().all(|e| e.label == 0));
        assert_eq!(plain[2].image, imgs[2]);

        fs::write(dir.path().join(INDEX_FILE), "file,label\n2.ppm,1\n0.ppm,0\n").unwrap();
        let indexed = load_image_dir(dir.path()).unwrap();
        assert_eq!(indexed.len(), 2);
        assert_eq!((indexed[0].label, &indexed[0].image), (1, &imgs[2]));
        let grids = encode_dataset(&indexed, QuantizerConfig::default()).unwrap();
        assert_eq!(grids[0].0.len(), 20);

        fs::write(dir.path().join(INDEX_FILE), "file,label\n2.ppm,one\n").unwrap();
        assert!(matches!(load_image_dir(dir.path()), Err(Error::Config { line: 2, .. })));
        assert!(load_image_dir(&dir.path().join("missing")).is_err());
    }
}
