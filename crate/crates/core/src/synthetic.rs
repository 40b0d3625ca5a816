//! Procedural two-domain open-set segmentation benchmark: perspective
//! source scenes, a distorted "panoramic" target with a target-private
//! class and weather-style shift, plus dataset persistence and cropping.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Domain;

pub const NUM_BASE: usize = 5;
pub const UNKNOWN_ID: i64 = NUM_BASE as i64;
pub const IGNORE_ID: i64 = 255;
pub const CLASS_NAMES: [&str; 6] = ["sky", "ground", "building", "car", "vegetation", "obstacle"];

/// H×W×3 image with values in [0,1], quantized to the 8-bit grid so disk
/// round-trips are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }
}

/// H×W class ids: base ids `0..num_base`, unknown id `num_base`, ignore 255.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub data: Array2<i64>,
    pub num_base: usize,
}

impl LabelMap {
    pub fn unknown_id(&self) -> i64 {
        self.num_base as i64
    }

    pub fn validate(&self, allow_unknown: bool) -> Result<()> {
        for &v in self.data.iter() {
            let base = v >= 0 && v < self.num_base as i64;
            let unk = allow_unknown && v == self.unknown_id();
            if !(base || unk || v == IGNORE_ID) {
                return Err(Error::InvalidArgument(format!(
                    "label map contains invalid id {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of one domain's procedural generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    /// Vertical sinusoid amplitude as a fraction of height, in [0, 0.25].
    pub warp_amplitude: f64,
    pub brightness: f64,
    pub fog: f64,
    pub hue_rotation: f64,
    /// Whether target-private obstacle instances are generated.
    pub private_class: bool,
}

impl DomainSpec {
    pub fn source() -> Self {
        DomainSpec {
            domain: Domain::Source,
            warp_amplitude: 0.0,
            brightness: 0.0,
            fog: 0.0,
            hue_rotation: 0.0,
            private_class: false,
        }
    }

    pub fn target() -> Self {
        DomainSpec {
            domain: Domain::Target,
            warp_amplitude: 0.15,
            brightness: -0.08,
            fog: 0.25,
            hue_rotation: 0.12,
            private_class: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=0.25).contains(&self.warp_amplitude) {
            return Err(Error::InvalidArgument(format!(
                "warp amplitude {} outside [0, 0.25]",
                self.warp_amplitude
            )));
        }
        if self.private_class && self.domain == Domain::Source {
            return Err(Error::InvalidArgument(
                "private class instances are target-only".into(),
            ));
        }
        Ok(())
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "scene size must be even and >= 32, got {h}x{w}"
        )));
    }
    Ok(())
}

fn quantize(img: &mut Array3<f64>) {
    img.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

struct Painter<'a> {
    img: &'a mut Array3<f64>,
    lbl: &'a mut Array2<i64>,
}

impl Painter<'_> {
    fn put(&mut self, y: usize, x: usize, color: [f64; 3], class: i64) {
        for c in 0..3 {
            self.img[[y, x, c]] = color[c];
        }
        self.lbl[[y, x]] = class;
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    let mut out = base;
    for c in &mut out {
        *c = (*c + (rng.random::<f64>() - 0.5) * amount).clamp(0.0, 1.0);
    }
    out
}

/// Procedurally generate one unwarped scene with its pixel-aligned labels.
/// Deterministic per `(seed, spec, size)`; the weather-style shift is
/// applied here, geometric warping is a separate step.
pub fn generate_scene(
    seed: u64,
    spec: &DomainSpec,
    size: (usize, usize),
) -> Result<(ImageTensor, LabelMap)> {
    let (h, w) = size;
    check_size(h, w)?;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array3::<f64>::zeros((h, w, 3));
    let mut lbl = Array2::<i64>::from_elem((h, w), 0);
    let horizon = ((0.35 + rng.random::<f64>() * 0.1) * h as f64) as usize;

    // sky gradient then ground plane
    for y in 0..h {
        for x in 0..w {
            if y < horizon {
                let t = y as f64 / horizon.max(1) as f64;
                img[[y, x, 0]] = 0.35 + 0.25 * t;
                img[[y, x, 1]] = 0.55 + 0.2 * t;
                img[[y, x, 2]] = 0.85 + 0.1 * t;
                lbl[[y, x]] = 0;
            } else {
                let t = (y - horizon) as f64 / (h - horizon).max(1) as f64;
                img[[y, x, 0]] = 0.38 - 0.08 * t;
                img[[y, x, 1]] = 0.42 - 0.06 * t;
                img[[y, x, 2]] = 0.30 - 0.05 * t;
                lbl[[y, x]] = 1;
            }
        }
    }

    let mut p = Painter { img: &mut img, lbl: &mut lbl };

    // buildings: rectangles rising above the horizon
    for _ in 0..rng.random_range(2..=4) {
        let bw = rng.random_range(w / 12..w / 5);
        let bh = rng.random_range(h / 6..h / 3);
        let x0 = rng.random_range(0..w - bw);
        let y1 = horizon + rng.random_range(0..h / 16 + 1);
        let y0 = y1.saturating_sub(bh);
        let color = jitter(&mut rng, [0.52, 0.5, 0.56], 0.15);
        for y in y0..y1.min(h) {
            for x in x0..x0 + bw {
                p.put(y, x, color, 2);
            }
        }
    }

    // vegetation: triangles near the horizon
    for _ in 0..rng.random_range(1..=3) {
        let half = rng.random_range(w / 24..w / 10).max(2);
        let th = rng.random_range(h / 8..h / 4).max(2);
        let cx = rng.random_range(half..w - half);
        let y1 = horizon + rng.random_range(0..h / 12 + 1);
        let color = jitter(&mut rng, [0.12, 0.5, 0.16], 0.1);
        for dy in 0..th {
            let y = y1.saturating_sub(dy);
            if y >= h {
                continue;
            }
            let span = (half * (th - dy)) / th;
            for x in cx.saturating_sub(span)..(cx + span).min(w) {
                p.put(y, x, color, 4);
            }
        }
    }

    // cars: discs on the ground
    for _ in 0..rng.random_range(1..=3) {
        let r = rng.random_range(h / 16..h / 8).max(2);
        let cy = rng.random_range((horizon + r).min(h - r - 1)..h - r);
        let cx = rng.random_range(r..w - r);
        let color = jitter(&mut rng, [0.72, 0.14, 0.16], 0.1);
        for y in cy - r..cy + r {
            for x in cx - r..cx + r {
                let (dy, dx) = (y as f64 - cy as f64, x as f64 - cx as f64);
                if dy * dy + dx * dx <= (r * r) as f64 {
                    p.put(y, x, color, 3);
                }
            }
        }
    }

    // target-private obstacles: hexagons on the ground
    if spec.private_class {
        for _ in 0..rng.random_range(1..=2) {
            let r = rng.random_range(h / 12..h / 7).max(3);
            let cy = rng.random_range((horizon + r).min(h - r - 1)..h - r);
            let cx = rng.random_range(r..w - r);
            let color = jitter(&mut rng, [0.92, 0.62, 0.08], 0.08);
            for y in cy - r..cy + r {
                for x in cx - r..cx + r {
                    let dy = (y as f64 - cy as f64).abs();
                    let dx = (x as f64 - cx as f64).abs();
                    // regular hexagon (flat top)
                    if dy <= r as f64 * 0.866 && dy + dx * 0.866 * 2.0 <= r as f64 * 1.732 {
                        p.put(y, x, color, UNKNOWN_ID);
                    }
                }
            }
        }
    }

    // weather-style shift
    for v in img.iter_mut() {
        *v += spec.brightness;
    }
    if spec.fog > 0.0 {
        for v in img.iter_mut() {
            *v = (1.0 - spec.fog) * *v + spec.fog;
        }
    }
    if spec.hue_rotation > 0.0 {
        let t = spec.hue_rotation;
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = (img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
                img[[y, x, 0]] = (1.0 - t) * r + t * g;
                img[[y, x, 1]] = (1.0 - t) * g + t * b;
                img[[y, x, 2]] = (1.0 - t) * b + t * r;
            }
        }
    }
    quantize(&mut img);
    Ok((ImageTensor { data: img }, LabelMap { data: lbl, num_base: NUM_BASE }))
}

/// Vertical displacement of column `x`: `amplitude·H·sin(2πx/W)`.
pub fn column_displacement(x: usize, w: usize, h: usize, amplitude: f64) -> f64 {
    amplitude * h as f64 * (2.0 * std::f64::consts::PI * x as f64 / w as f64).sin()
}

fn wrap(v: isize, n: usize) -> usize {
    v.rem_euclid(n as isize) as usize
}

/// Displace each column vertically by a sinusoid of the horizontal
/// position, wrapping at the image edges. Bilinear resampling for the
/// image, nearest-neighbor for labels. `amplitude = 0` is the identity.
pub fn panoramic_warp(
    img: &ImageTensor,
    lbl: &LabelMap,
    amplitude: f64,
) -> Result<(ImageTensor, LabelMap)> {
    if !(-0.25..=0.25).contains(&amplitude) {
        return Err(Error::InvalidArgument(format!(
            "warp amplitude {amplitude} outside [-0.25, 0.25]"
        )));
    }
    let (h, w) = (img.height(), img.width());
    if lbl.data.shape() != [h, w] {
        return Err(Error::Shape("image and label map sizes differ".into()));
    }
    let mut out_img = Array3::<f64>::zeros((h, w, 3));
    let mut out_lbl = Array2::<i64>::zeros((h, w));
    for x in 0..w {
        let d = column_displacement(x, w, h, amplitude);
        for y in 0..h {
            let src = y as f64 - d;
            let y0 = src.floor() as isize;
            let frac = src - src.floor();
            let (ya, yb) = (wrap(y0, h), wrap(y0 + 1, h));
            for c in 0..3 {
                out_img[[y, x, c]] =
                    img.data[[ya, x, c]] * (1.0 - frac) + img.data[[yb, x, c]] * frac;
            }
            let yn = wrap(src.round() as isize, h);
            out_lbl[[y, x]] = lbl.data[[yn, x]];
        }
    }
    Ok((
        ImageTensor { data: out_img },
        LabelMap { data: out_lbl, num_base: lbl.num_base },
    ))
}

/// Full sample pipeline: scene generation followed by the domain's warp.
pub fn generate_sample(
    seed: u64,
    spec: &DomainSpec,
    size: (usize, usize),
) -> Result<(ImageTensor, LabelMap)> {
    let (img, lbl) = generate_scene(seed, spec, size)?;
    if spec.warp_amplitude > 0.0 {
        let (mut wi, wl) = panoramic_warp(&img, &lbl, spec.warp_amplitude)?;
        quantize(&mut wi.data);
        Ok((wi, wl))
    } else {
        Ok((img, lbl))
    }
}

/// Aligned random crop with a uniform offset drawn from `seed`.
pub fn random_crop(
    img: &ImageTensor,
    lbl: &LabelMap,
    crop: (usize, usize),
    seed: u64,
) -> Result<(ImageTensor, LabelMap)> {
    let (h, w) = (img.height(), img.width());
    let (ch, cw) = crop;
    if ch > h || cw > w {
        return Err(Error::InvalidArgument(format!(
            "crop {ch}x{cw} larger than image {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.random_range(0..=h - ch);
    let ox = rng.random_range(0..=w - cw);
    let ci = img.data.slice(ndarray::s![oy..oy + ch, ox..ox + cw, ..]).to_owned();
    let cl = lbl.data.slice(ndarray::s![oy..oy + ch, ox..ox + cw]).to_owned();
    Ok((
        ImageTensor { data: ci },
        LabelMap { data: cl, num_base: lbl.num_base },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub class_names: Vec<String>,
    pub num_base: usize,
    pub unknown_id: i64,
    pub ignore_id: i64,
    pub spec: DomainSpec,
}

impl DatasetMeta {
    fn new(spec: DomainSpec) -> Self {
        DatasetMeta {
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            num_base: NUM_BASE,
            unknown_id: UNKNOWN_ID,
            ignore_id: IGNORE_ID,
            spec,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_base + 1 != self.class_names.len() {
            return Err(Error::InvalidArgument(format!(
                "meta num_base {} inconsistent with {} class names",
                self.num_base,
                self.class_names.len()
            )));
        }
        if self.unknown_id != self.num_base as i64 || self.ignore_id != IGNORE_ID {
            return Err(Error::InvalidArgument(
                "meta unknown/ignore ids violate the label-space convention".into(),
            ));
        }
        Ok(())
    }
}

/// On-disk dataset handle: `root/{split}/{images,labels}/NNNNN.png` plus
/// `root/meta.json`.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: String,
    pub meta: DatasetMeta,
    count: usize,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn image_to_png_bytes(img: &ImageTensor) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img.data[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.data[[y, x, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.data[[y, x, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(buf)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("png encode");
    bytes
}

fn label_to_png_bytes(lbl: &LabelMap) -> Vec<u8> {
    let (h, w) = (lbl.data.shape()[0], lbl.data.shape()[1]);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([lbl.data[[y, x]] as u8]));
        }
    }
    let mut bytes = Vec::new();
    image::DynamicImage::ImageLuma8(buf)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("png encode");
    bytes
}

/// Load a standalone RGB PNG into an image tensor on the [0,1] grid.
pub fn read_image_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::dataset(path.display().to_string(), e.to_string()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[[y, x, c]] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(ImageTensor { data })
}

/// Persist a label map as an 8-bit grayscale PNG of class ids.
pub fn write_label_png(path: &Path, lbl: &LabelMap) -> Result<()> {
    atomic_write(path, &label_to_png_bytes(lbl))
}

/// Generate and persist `count` samples of `spec` under `root/split`.
pub fn write_dataset(
    root: &Path,
    split: &str,
    spec: &DomainSpec,
    count: usize,
    base_seed: u64,
    size: (usize, usize),
) -> Result<Dataset> {
    spec.validate()?;
    let img_dir = root.join(split).join("images");
    let lbl_dir = root.join(split).join("labels");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(img_dir.display().to_string(), e))?;
    fs::create_dir_all(&lbl_dir).map_err(|e| Error::io(lbl_dir.display().to_string(), e))?;
    for i in 0..count {
        let (img, lbl) = generate_sample(base_seed.wrapping_add(i as u64), spec, size)?;
        atomic_write(&img_dir.join(format!("{i:05}.png")), &image_to_png_bytes(&img))?;
        atomic_write(&lbl_dir.join(format!("{i:05}.png")), &label_to_png_bytes(&lbl))?;
    }
    let meta = DatasetMeta::new(spec.clone());
    let meta_json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| Error::dataset(root.display().to_string(), e.to_string()))?;
    atomic_write(&root.join("meta.json"), &meta_json)?;
    Ok(Dataset { root: root.to_path_buf(), split: split.to_string(), meta, count })
}

/// Open a dataset split, validating `meta.json` and counting samples.
pub fn load_dataset(root: &Path, split: &str) -> Result<Dataset> {
    let meta_path = root.join("meta.json");
    let meta_bytes =
        fs::read(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::dataset(meta_path.display().to_string(), e.to_string()))?;
    meta.validate()?;
    let img_dir = root.join(split).join("images");
    let mut count = 0;
    while img_dir.join(format!("{count:05}.png")).exists() {
        count += 1;
    }
    if count == 0 {
        return Err(Error::dataset(
            img_dir.display().to_string(),
            "no samples found".to_string(),
        ));
    }
    Ok(Dataset { root: root.to_path_buf(), split: split.to_string(), meta, count })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn get(&self, index: usize) -> Result<(ImageTensor, LabelMap)> {
        let img_path = self
            .root
            .join(&self.split)
            .join("images")
            .join(format!("{index:05}.png"));
        let lbl_path = self
            .root
            .join(&self.split)
            .join("labels")
            .join(format!("{index:05}.png"));
        let img = image::open(&img_path)
            .map_err(|e| Error::dataset(img_path.display().to_string(), e.to_string()))?
            .into_rgb8();
        let lbl_img = image::open(&lbl_path)
            .map_err(|e| Error::dataset(lbl_path.display().to_string(), e.to_string()))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if (lbl_img.width() as usize, lbl_img.height() as usize) != (w, h) {
            return Err(Error::dataset(
                lbl_path.display().to_string(),
                "label size differs from image".to_string(),
            ));
        }
        let mut data = Array3::<f64>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    data[[y, x, c]] = px[c] as f64 / 255.0;
                }
            }
        }
        let mut labels = Array2::<i64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let v = lbl_img.get_pixel(x as u32, y as u32)[0] as i64;
                let allow_unknown = self.meta.spec.domain == Domain::Target;
                let valid = (v >= 0 && v < self.meta.num_base as i64)
                    || (allow_unknown && v == self.meta.unknown_id)
                    || v == self.meta.ignore_id;
                if !valid {
                    return Err(Error::dataset(
                        lbl_path.display().to_string(),
                        format!("label id {v} outside the {:?}-domain label space", self.meta.spec.domain),
                    ));
                }
                labels[[y, x]] = v;
            }
        }
        Ok((
            ImageTensor { data },
            LabelMap { data: labels, num_base: self.meta.num_base },
        ))
    }
}
