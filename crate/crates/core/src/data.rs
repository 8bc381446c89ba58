//! Glyph datasets: manifests, per-font splits, unpaired epoch ordering and a
//! synthetic two-font generator.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imgcore::{read_png, resize, write_png, ColorSpace, RasterImage};

pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub font: String,
    pub split: Split,
}

/// Dataset listing stored as `path<TAB>font<TAB>split` lines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, font, split] = fields[..] else {
                return Err(Error::InvalidConfig(format!(
                    "manifest line {}: expected 3 tab-separated fields",
                    lineno + 1
                )));
            };
            if !seen.insert(path.to_string()) {
                return Err(Error::InvalidConfig(format!(
                    "manifest line {}: duplicate path {path}",
                    lineno + 1
                )));
            }
            entries.push(ManifestEntry {
                path: path.to_string(),
                font: font.to_string(),
                split: split.parse()?,
            });
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.path, e.font, e.split))
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    /// Entries of one font and split, in manifest order.
    pub fn select(&self, font: &str, split: Split) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.font == font && e.split == split)
            .collect()
    }

    /// Distinct font labels in first-appearance order.
    pub fn fonts(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.font) {
                out.push(e.font.clone());
            }
        }
        out
    }
}

/// Test-set size for `n` samples: `floor(n·(1 - ratio))`, at least 1.
pub fn test_count(n: usize, ratio: f64) -> usize {
    (((n as f64) * (1.0 - ratio) + 1e-9).floor() as usize).max(1).min(n)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} outside (0, 1)")));
    }
    Ok(())
}

/// Lists every `*.png` under `root/<font>` for each font, shuffles each font
/// with a seeded RNG and assigns the first `test_count` files to the test split.
/// An empty `fonts` means every subdirectory of `root`.
pub fn build_manifest(root: &Path, fonts: &[String], ratio: f64, seed: u64) -> Result<Manifest> {
    check_ratio(ratio)?;
    let fonts = if fonts.is_empty() {
        let mut dirs = Vec::new();
        for entry in fs::read_dir(root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                dirs.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        dirs.sort();
        dirs
    } else {
        fonts.to_vec()
    };
    if fonts.is_empty() {
        return Err(Error::DataEmpty(format!("no font directories in {}", root.display())));
    }
    let mut entries = Vec::new();
    for (i, font) in fonts.iter().enumerate() {
        let dir = root.join(font);
        let mut files: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::UnreadableFile {
                path: dir.clone(),
                reason: e.to_string(),
            })?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|name| name.to_ascii_lowercase().ends_with(".png"))
            .collect();
        if files.is_empty() {
            return Err(Error::EmptyFont(dir));
        }
        files.sort();
        for name in &files {
            read_png(&dir.join(name))?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        files.shuffle(&mut rng);
        let n_test = test_count(files.len(), ratio);
        for (k, name) in files.into_iter().enumerate() {
            entries.push(ManifestEntry {
                path: format!("{font}/{name}"),
                font: font.clone(),
                split: if k < n_test { Split::Test } else { Split::Train },
            });
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest { entries })
}

/// Reads one image as RGB and resizes it to `size×size`.
pub fn load_image(path: &Path, size: usize) -> Result<RasterImage> {
    resize(&read_png(path)?, size, size)
}

/// All images of one font and split, in manifest order.
pub fn load_font(root: &Path, manifest: &Manifest, font: &str, split: Split, size: usize) -> Result<Vec<RasterImage>> {
    let images = manifest
        .select(font, split)
        .iter()
        .map(|e| load_image(&root.join(&e.path), size))
        .collect::<Result<Vec<_>>>()?;
    if images.is_empty() {
        return Err(Error::DataEmpty(format!("font '{font}' has no {split} images")));
    }
    Ok(images)
}

/// Per-domain visiting orders for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochOrder {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

impl EpochOrder {
    /// Independent shuffles of `0..nx` and `0..ny` drawn from `rng`.
    pub fn draw(nx: usize, ny: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut x: Vec<usize> = (0..nx).collect();
        let mut y: Vec<usize> = (0..ny).collect();
        x.shuffle(rng);
        y.shuffle(rng);
        Self { x, y }
    }

    /// Seeded order for epoch `epoch`, independent of earlier epochs.
    pub fn for_epoch(nx: usize, ny: usize, seed: u64, epoch: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        Self::draw(nx, ny, &mut rng)
    }

    /// Domain indices of batch `step` within the epoch.
    pub fn batch(&self, step: usize, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let range = step * batch..(step + 1) * batch;
        (self.x[range.clone()].to_vec(), self.y[range].to_vec())
    }
}

/// Full batches per epoch: both domains advance together, so the smaller one
/// bounds the count.
pub fn steps_per_epoch(nx: usize, ny: usize, batch: usize) -> usize {
    nx.min(ny) / batch.max(1)
}

/// Unpaired source and target images, equal in number.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedBatch {
    pub x: Vec<RasterImage>,
    pub y: Vec<RasterImage>,
}

/// Reads batch `positions` of the training split under the seeded epoch order.
#[allow(clippy::too_many_arguments)]
pub fn load_batch(
    root: &Path,
    manifest: &Manifest,
    font_x: &str,
    font_y: &str,
    positions: &[usize],
    size: usize,
    seed: u64,
    epoch: u64,
) -> Result<UnpairedBatch> {
    let xs = manifest.select(font_x, Split::Train);
    let ys = manifest.select(font_y, Split::Train);
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::DataEmpty(format!("no training images for '{font_x}' or '{font_y}'")));
    }
    let order = EpochOrder::for_epoch(xs.len(), ys.len(), seed, epoch);
    let mut batch = UnpairedBatch { x: vec![], y: vec![] };
    for &p in positions {
        if p >= xs.len().min(ys.len()) {
            return Err(Error::InvalidConfig(format!("batch position {p} beyond the epoch")));
        }
        batch.x.push(load_image(&root.join(&xs[order.x[p]].path), size)?);
        batch.y.push(load_image(&root.join(&ys[order.y[p]].path), size)?);
    }
    Ok(batch)
}

/// Font labels written by [`synth_fonts`]: thin strokes and thick strokes.
pub const SYNTH_FONTS: [&str; 2] = ["A", "B"];

/// A glyph as polylines over pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct StrokeGlyph {
    pub strokes: Vec<Vec<(i64, i64)>>,
}

impl StrokeGlyph {
    /// 2–4 polylines of 2–4 points on a 5×5 lattice kept clear of the border.
    pub fn random(size: usize, rng: &mut impl Rng) -> Self {
        let margin = (size / 8).max(2) as i64;
        let span = size as i64 - 1 - 2 * margin;
        let lattice = |k: i64| margin + k * span / 4;
        let strokes = (0..rng.random_range(2..=4))
            .map(|_| {
                let len = rng.random_range(2..=4);
                let mut pts: Vec<(i64, i64)> = Vec::new();
                while pts.len() < len {
                    let p = (lattice(rng.random_range(0..5)), lattice(rng.random_range(0..5)));
                    if pts.last() != Some(&p) {
                        pts.push(p);
                    }
                }
                pts
            })
            .collect();
        Self { strokes }
    }

    /// Black-on-white RGB rendering with a square brush of side `thickness`.
    pub fn render(&self, size: usize, thickness: usize) -> RasterImage {
        let mut data = vec![1.0; size * size * 3];
        let r = (thickness as i64 - 1) / 2;
        let mut ink = |x: i64, y: i64| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (px, py) = (x + dx, y + dy);
                    if px >= 0 && py >= 0 && (px as usize) < size && (py as usize) < size {
                        let i = (py as usize * size + px as usize) * 3;
                        data[i..i + 3].fill(0.0);
                    }
                }
            }
        };
        for stroke in &self.strokes {
            for pair in stroke.windows(2) {
                for (x, y) in line_pixels(pair[0], pair[1]) {
                    ink(x, y);
                }
            }
        }
        RasterImage::new(size, size, ColorSpace::Rgb, data).expect("square rgb")
    }
}

/// 8-connected Bresenham line including both endpoints.
pub fn line_pixels((x0, y0): (i64, i64), (x1, y1): (i64, i64)) -> Vec<(i64, i64)> {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut out = vec![(x, y)];
    while (x, y) != (x1, y1) {
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        out.push((x, y));
    }
    out
}

/// Writes `n` random glyphs per synthetic font under `out/A` (thickness 1) and
/// `out/B` (thickness 3, same shapes, same file names) plus `out/manifest.tsv`.
pub fn synth_fonts(out: &Path, n: usize, size: usize, seed: u64) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::InvalidConfig("synth needs at least one glyph per font".into()));
    }
    if size < 8 {
        return Err(Error::InvalidSize { width: size, height: size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<PathBuf> = SYNTH_FONTS.iter().map(|f| out.join(f)).collect();
    for d in &dirs {
        fs::create_dir_all(d)?;
    }
    for i in 0..n {
        let glyph = StrokeGlyph::random(size, &mut rng);
        for (dir, thickness) in dirs.iter().zip([1, 3]) {
            write_png(&dir.join(format!("{i:04}.png")), &glyph.render(size, thickness))?;
        }
    }
    let fonts: Vec<String> = SYNTH_FONTS.iter().map(|s| s.to_string()).collect();
    let manifest = build_manifest(out, &fonts, DEFAULT_SPLIT_RATIO, seed)?;
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::ske;

    #[test]
    fn test_counts() {
        assert_eq!(test_count(10, 0.8), 2);
        assert_eq!(test_count(5, 0.8), 1);
        assert_eq!(test_count(100, 0.8), 20);
        assert_eq!(test_count(2, 0.8), 1);
        assert_eq!(test_count(166, 0.8), 33);
    }

    #[test]
    fn manifest_text_roundtrip() {
        let text = "A/0.png\tA\ttrain\nB/0.png\tB\ttest\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.to_text(), text);
        assert!(Manifest::parse("a\tb\n").is_err());
        assert!(Manifest::parse("a\tA\ttrain\na\tA\ttest\n").is_err());
        assert!(Manifest::parse("a\tA\tvalid\n").is_err());
    }

    #[test]
    fn line_pixels_are_connected() {
        for (a, b) in [((0, 0), (7, 3)), ((5, 5), (1, 9)), ((2, 2), (2, 2)), ((0, 4), (6, 4))] {
            let px = line_pixels(a, b);
            assert_eq!(px[0], a);
            assert_eq!(*px.last().unwrap(), b);
            for w in px.windows(2) {
                assert!((w[0].0 - w[1].0).abs() <= 1 && (w[0].1 - w[1].1).abs() <= 1);
            }
        }
    }

    #[test]
    fn synth_layout_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = synth_fonts(a.path(), 10, 32, 5).unwrap();
        synth_fonts(b.path(), 10, 32, 5).unwrap();
        assert_eq!(m.entries.len(), 20);
        for font in SYNTH_FONTS {
            assert_eq!(m.select(font, Split::Train).len(), 8);
            assert_eq!(m.select(font, Split::Test).len(), 2);
        }
        for e in &m.entries {
            assert_eq!(fs::read(a.path().join(&e.path)).unwrap(), fs::read(b.path().join(&e.path)).unwrap());
        }
        assert_eq!(Manifest::read(&a.path().join(MANIFEST_FILE)).unwrap(), m);
    }

    #[test]
    fn thin_glyphs_are_near_fixpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let g = StrokeGlyph::random(32, &mut rng);
            let thin = g.render(32, 1);
            let ink = crate::imgcore::binarize(&crate::imgcore::to_gray(&thin).unwrap(), 0.5).unwrap();
            let sk = ske(&thin, 0.5).unwrap();
            assert!(sk.is_subset_of(&ink));
            assert!(sk.count_ones() as f64 >= 0.85 * ink.count_ones() as f64);
        }
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let o = EpochOrder::for_epoch(7, 5, 3, 2);
        let mut x = o.x.clone();
        x.sort();
        assert_eq!(x, (0..7).collect::<Vec<_>>());
        assert_eq!(o, EpochOrder::for_epoch(7, 5, 3, 2));
        assert_ne!(o, EpochOrder::for_epoch(7, 5, 3, 3));
        assert_eq!(steps_per_epoch(7, 5, 2), 2);
    }
}
