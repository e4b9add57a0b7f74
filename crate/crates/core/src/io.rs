//! Datasets on disk: 8-bit RGB PNGs for images, grayscale PNGs holding class
//! indices for layouts, and a JSON manifest per directory.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::hex_digest;
use crate::error::{invalid, Error, Result};
use crate::scene::{Domain, SceneSample, SplitConfig};
use crate::segmentation::ClassMap;
use crate::tensor::Tensor3;
use crate::transfer::{TransferConfig, TransferredPair};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRANSFER_MANIFEST_SCHEMA: &str = "zsda-transfer-manifest";
pub const SPLIT_MANIFEST_SCHEMA: &str = "zsda-split-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Display colours for the five classes.
pub const CLASS_COLORS: [[u8; 3]; 5] = [
    [70, 130, 180],
    [128, 64, 128],
    [70, 70, 70],
    [0, 0, 142],
    [107, 142, 35],
];

pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

/// Round-trip through 8-bit storage.
pub fn quantize(image: &Tensor3) -> Tensor3 {
    image.map(|v| from_u8(to_u8(v)))
}

pub fn tensor_to_rgb(image: &Tensor3) -> Result<RgbImage> {
    let (c, h, w) = image.shape();
    if c != 3 {
        return Err(invalid!("expected 3 channels, got {c}"));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|ch| to_u8(image.get(ch, y, x))))
    }))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor3 {
    Tensor3::from_fn(3, img.height() as usize, img.width() as usize, |c, y, x| {
        from_u8(img.get_pixel(x as u32, y as u32)[c])
    })
}

pub fn colorize(layout: &ClassMap) -> RgbImage {
    RgbImage::from_fn(layout.width() as u32, layout.height() as u32, |x, y| {
        let c = layout.get(y as usize, x as usize) as usize;
        Rgb(CLASS_COLORS.get(c).copied().unwrap_or([255, 255, 255]))
    })
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

pub fn save_image(path: &Path, image: &Tensor3) -> Result<()> {
    tensor_to_rgb(image)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn load_image(path: &Path) -> Result<Tensor3> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn save_layout(path: &Path, layout: &ClassMap) -> Result<()> {
    let img = GrayImage::from_fn(layout.width() as u32, layout.height() as u32, |x, y| {
        Luma([layout.get(y as usize, x as usize)])
    });
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn load_layout(path: &Path) -> Result<ClassMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    ClassMap::from_vec(img.height() as usize, img.width() as usize, img.into_raw())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex_digest(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub index: usize,
    pub scene_seed: u64,
    pub item_seed: u64,
    /// Paths relative to the dataset directory.
    pub source: String,
    pub generated: String,
    pub layout: String,
    pub generated_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferManifest {
    pub schema: String,
    pub version: u32,
    pub source_domain: Domain,
    pub config: TransferConfig,
    pub master_seed: u64,
    /// Parameter checksum of the denoiser that produced the transfers.
    pub denoiser_checksum: String,
    pub count: usize,
    pub items: Vec<ManifestItem>,
}

/// Write `pairs` under `dir` with a manifest and contact sheet.
pub fn write_transfer_dataset(
    dir: &Path,
    pairs: &[TransferredPair],
    master_seed: u64,
    denoiser_checksum: &str,
) -> Result<TransferManifest> {
    let first = pairs
        .first()
        .ok_or_else(|| invalid!("refusing to write an empty dataset"))?;
    for sub in ["source", "generated", "layout"] {
        create_dir(&dir.join(sub))?;
    }
    let mut items = Vec::with_capacity(pairs.len());
    for (index, p) in pairs.iter().enumerate() {
        let name = format!("{:06}.png", p.source.seed);
        let item = ManifestItem {
            index,
            scene_seed: p.source.seed,
            item_seed: p.item_seed,
            source: format!("source/{name}"),
            generated: format!("generated/{name}"),
            layout: format!("layout/{name}"),
            generated_sha256: String::new(),
        };
        save_image(&dir.join(&item.source), &p.source.image)?;
        save_image(&dir.join(&item.generated), &p.generated)?;
        save_layout(&dir.join(&item.layout), &p.layout)?;
        let generated_sha256 = file_digest(&dir.join(&item.generated))?;
        items.push(ManifestItem {
            generated_sha256,
            ..item
        });
    }
    let manifest = TransferManifest {
        schema: TRANSFER_MANIFEST_SCHEMA.to_owned(),
        version: MANIFEST_VERSION,
        source_domain: first.source.domain,
        config: first.config.clone(),
        master_seed,
        denoiser_checksum: denoiser_checksum.to_owned(),
        count: items.len(),
        items,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    contact_sheet(pairs, 8)?
        .save_with_format(dir.join("contact_sheet.png"), ImageFormat::Png)
        .map_err(|e| image_err(&dir.join("contact_sheet.png"), e))?;
    Ok(manifest)
}

pub fn read_transfer_manifest(dir: &Path) -> Result<TransferManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Missing {
            what: "transfer dataset",
            path,
        });
    }
    let m: TransferManifest = read_json(&path)?;
    if m.schema != TRANSFER_MANIFEST_SCHEMA || m.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported manifest {} v{}",
            path.display(),
            m.schema,
            m.version
        )));
    }
    if m.count != m.items.len() {
        return Err(Error::Format(format!(
            "{}: count {} but {} items",
            path.display(),
            m.count,
            m.items.len()
        )));
    }
    Ok(m)
}

/// Load a dataset written by [`write_transfer_dataset`], verifying each
/// generated image against its recorded digest.
pub fn read_transfer_dataset(dir: &Path) -> Result<(TransferManifest, Vec<TransferredPair>)> {
    let manifest = read_transfer_manifest(dir)?;
    let mut pairs = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let gen_path = dir.join(&item.generated);
        let found = file_digest(&gen_path)?;
        if found != item.generated_sha256 {
            return Err(Error::Checksum {
                path: gen_path,
                expected: item.generated_sha256.clone(),
                found,
            });
        }
        let layout = load_layout(&dir.join(&item.layout))?;
        pairs.push(TransferredPair {
            source: SceneSample {
                image: load_image(&dir.join(&item.source))?,
                layout: layout.clone(),
                domain: manifest.source_domain,
                seed: item.scene_seed,
            },
            generated: load_image(&gen_path)?,
            layout,
            config: manifest.config.clone(),
            item_seed: item.item_seed,
        });
    }
    Ok((manifest, pairs))
}

/// Originals on the top row, transfers below, layouts at the bottom.
pub fn contact_sheet(pairs: &[TransferredPair], columns: usize) -> Result<RgbImage> {
    let shown = &pairs[..pairs.len().min(columns.max(1))];
    let (h, w) = shown
        .first()
        .map(|p| p.layout.shape())
        .ok_or_else(|| invalid!("no pairs to show"))?;
    let gap = 2;
    let sheet_w = shown.len() * (w + gap) - gap;
    let sheet_h = 3 * h + 2 * gap;
    let mut sheet = RgbImage::from_pixel(sheet_w as u32, sheet_h as u32, Rgb([255, 255, 255]));
    for (i, p) in shown.iter().enumerate() {
        let x0 = (i * (w + gap)) as i64;
        let tiles = [
            tensor_to_rgb(&p.source.image)?,
            tensor_to_rgb(&p.generated)?,
            colorize(&p.layout),
        ];
        for (row, tile) in tiles.iter().enumerate() {
            image::imageops::replace(&mut sheet, tile, x0, (row * (h + gap)) as i64);
        }
    }
    Ok(sheet)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub schema: String,
    pub version: u32,
    pub config: SplitConfig,
}

pub fn write_split_manifest(path: &Path, config: &SplitConfig) -> Result<()> {
    write_json(
        path,
        &SplitManifest {
            schema: SPLIT_MANIFEST_SCHEMA.to_owned(),
            version: MANIFEST_VERSION,
            config: config.clone(),
        },
    )
}

/// Loss table as CSV: a header row then one row per epoch.
pub fn write_curve_csv(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::from("epoch");
    for c in columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v:.10e}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Minimal line plot of each series (no text), scaled to the joint range.
pub fn plot_curves(series: &[Vec<f64>], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 8i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let axis = Rgb([0, 0, 0]);
    for x in 0..=w {
        put(&mut img, margin + x, margin + h, axis);
    }
    for y in 0..=h {
        put(&mut img, margin, margin + y, axis);
    }
    let all = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let palette = [Rgb([200, 30, 30]), Rgb([30, 90, 200]), Rgb([30, 150, 60]), Rgb([150, 80, 0])];
    for (si, s) in series.iter().enumerate() {
        let n = s.len().max(2) - 1;
        let pt = |i: usize, v: f64| {
            (
                margin + (i as i64 * w) / n as i64,
                margin + h - (((v - lo) / span) * h as f64).round() as i64,
            )
        };
        for i in 1..s.len() {
            let (a, b) = (pt(i - 1, s[i - 1]), pt(i, s[i]));
            line(&mut img, a, b, palette[si % palette.len()]);
        }
        if s.len() == 1 {
            let (x, y) = pt(0, s[0]);
            put(&mut img, x, y, palette[si % palette.len()]);
        }
    }
    img
}

pub fn save_plot(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    plot_curves(series, 480, 240)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        put(img, x, y, c);
    }
}

/// Resolve `dir` relative to `root` unless it is already absolute.
pub fn resolve(root: Option<&Path>, dir: &Path) -> PathBuf {
    match root {
        Some(r) if dir.is_relative() => r.join(dir),
        _ => dir.to_path_buf(),
    }
}
