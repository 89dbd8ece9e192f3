//! Procedural satellite-like scenes of rectangular buildings with exact
//! ground truth: instance masks, boxes and a per-pixel height map.
//!
//! Roof brightness is an affine, increasing function of building height, so
//! height can be regressed from RGB alone. Overlaps are resolved tallest-wins.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, HeightMap, ImageTile, Instance, InstanceSet};
use crate::error::{LightError, Result};
use crate::io;

/// Parameters of the scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Inclusive range of buildings per scene.
    pub n_buildings_range: [usize; 2],
    /// Inclusive range of building side lengths, pixels.
    pub footprint_range: [usize; 2],
    /// Building heights in meters; the upper end is the normalization scale.
    pub height_range: [f64; 2],
    pub rotation: bool,
    /// Std-dev of additive per-pixel noise, intensity units.
    pub texture_noise: f64,
    /// Largest allowed overlap of two footprints, as a fraction of the smaller one.
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 512,
            n_buildings_range: [4, 16],
            footprint_range: [24, 96],
            height_range: [3.0, 100.0],
            rotation: false,
            texture_noise: 0.02,
            max_overlap: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Small scenes used for desk-scale training.
    pub fn desk(seed: u64) -> Self {
        Self {
            image_size: 128,
            n_buildings_range: [1, 5],
            footprint_range: [14, 44],
            height_range: [3.0, 100.0],
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 || self.image_size % 32 != 0 {
            return Err(LightError::config(
                "image_size",
                format!("must be at least 64 and divisible by 32, got {}", self.image_size),
            ));
        }
        let [nlo, nhi] = self.n_buildings_range;
        if nlo > nhi {
            return Err(LightError::config("n_buildings_range", format!("empty range [{nlo}, {nhi}]")));
        }
        let [flo, fhi] = self.footprint_range;
        if flo == 0 || flo > fhi || fhi >= self.image_size {
            return Err(LightError::config(
                "footprint_range",
                format!("need 1 <= min <= max < image_size ({}), got [{flo}, {fhi}]", self.image_size),
            ));
        }
        let [hlo, hhi] = self.height_range;
        if !(hlo > 0.0 && hlo <= hhi && hhi.is_finite()) {
            return Err(LightError::config("height_range", format!("need 0 < min <= max, got [{hlo}, {hhi}]")));
        }
        if !(0.0..=1.0).contains(&self.texture_noise) {
            return Err(LightError::config("texture_noise", format!("must lie in [0, 1], got {}", self.texture_noise)));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return Err(LightError::config("max_overlap", format!("must lie in [0, 1], got {}", self.max_overlap)));
        }
        Ok(())
    }

    /// Height normalization scale (meters).
    pub fn h_max(&self) -> f64 {
        self.height_range[1]
    }
}

/// One rectangular building footprint. Pixel `(x, y)` is covered when its
/// center `(x + 0.5, y + 0.5)` lies inside the (possibly rotated) rectangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub length: f64,
    /// Rotation in radians, counter-clockwise.
    pub angle: f64,
    pub height_m: f64,
}

impl Building {
    /// Axis-aligned building covering pixels `x0..x0+w`, `y0..y0+h`.
    pub fn axis_aligned(x0: usize, y0: usize, w: usize, h: usize, height_m: f64) -> Self {
        Self {
            cx: x0 as f64 + w as f64 / 2.0,
            cy: y0 as f64 + h as f64 / 2.0,
            width: w as f64,
            length: h as f64,
            angle: 0.0,
            height_m,
        }
    }

    pub fn covers(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        // Half-open on the far side so adjacent axis-aligned rectangles tile exactly.
        let hw = self.width / 2.0;
        let hl = self.length / 2.0;
        u >= -hw && u < hw && v >= -hl && v < hl
    }

    fn aabb(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let ex = (c * self.width).abs() / 2.0 + (s * self.length).abs() / 2.0;
        let ey = (s * self.width).abs() / 2.0 + (c * self.length).abs() / 2.0;
        (self.cx - ex, self.cy - ey, self.cx + ex, self.cy + ey)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: u64,
    pub buildings: Vec<Building>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: ImageTile,
    /// Visible instances, sorted by descending height.
    pub instances: InstanceSet,
    pub height: HeightMap,
    pub meta: SampleMeta,
}

/// Roof intensity for a building of height `h`.
pub fn roof_intensity(h: f64, h_max: f64) -> f64 {
    0.35 + 0.6 * (h / h_max).clamp(0.0, 1.0)
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Deterministic scene number `index` of the stream defined by `spec.seed`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<SyntheticSample> {
    spec.validate()?;
    let mut rng = sample_rng(spec.seed, index);
    let buildings = sample_buildings(spec, &mut rng);
    render_with_rng(spec, buildings, &mut rng, index)
}

fn sample_buildings(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Building> {
    let size = spec.image_size as f64;
    let n = rng.random_range(spec.n_buildings_range[0]..=spec.n_buildings_range[1]);
    let mut out: Vec<Building> = Vec::with_capacity(n);
    for _ in 0..n {
        for _attempt in 0..50 {
            let w = rng.random_range(spec.footprint_range[0]..=spec.footprint_range[1]);
            let l = rng.random_range(spec.footprint_range[0]..=spec.footprint_range[1]);
            let height_m = if spec.height_range[0] < spec.height_range[1] {
                rng.random_range(spec.height_range[0]..spec.height_range[1])
            } else {
                spec.height_range[0]
            };
            let cand = if spec.rotation {
                let angle = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
                let mut b = Building { cx: 0.0, cy: 0.0, width: w as f64, length: l as f64, angle, height_m };
                let (x0, y0, x1, y1) = b.aabb();
                let (ew, eh) = (x1 - x0, y1 - y0);
                if ew >= size || eh >= size {
                    continue;
                }
                b.cx = rng.random_range(ew / 2.0..size - ew / 2.0);
                b.cy = rng.random_range(eh / 2.0..size - eh / 2.0);
                b
            } else {
                let x0 = rng.random_range(0..=spec.image_size - w);
                let y0 = rng.random_range(0..=spec.image_size - l);
                Building::axis_aligned(x0, y0, w, l, height_m)
            };
            if out.iter().all(|b| overlap_fraction(b, &cand) <= spec.max_overlap) {
                out.push(cand);
                break;
            }
        }
    }
    out
}

/// Bounding-box intersection over the smaller footprint area.
fn overlap_fraction(a: &Building, b: &Building) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.aabb();
    let (bx0, by0, bx1, by1) = b.aabb();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let smaller = (a.width * a.length).min(b.width * b.length);
    if smaller <= 0.0 {
        1.0
    } else {
        iw * ih / smaller
    }
}

/// Renders explicit buildings with the texture model of `spec`. The texture
/// stream is derived from `(spec.seed, index)` so the result is deterministic.
pub fn render_scene(spec: &SceneSpec, buildings: Vec<Building>, index: u64) -> Result<SyntheticSample> {
    spec.validate()?;
    let mut rng = sample_rng(spec.seed, index);
    render_with_rng(spec, buildings, &mut rng, index)
}

fn render_with_rng(spec: &SceneSpec, buildings: Vec<Building>, rng: &mut ChaCha8Rng, index: u64) -> Result<SyntheticSample> {
    let size = spec.image_size;
    let h_max = spec.h_max();

    // Painter's order: shortest first so the tallest building ends on top.
    let mut order: Vec<usize> = (0..buildings.len()).collect();
    order.sort_by(|&a, &b| buildings[a].height_m.total_cmp(&buildings[b].height_m).then(a.cmp(&b)));
    let mut owner: Vec<Option<usize>> = vec![None; size * size];
    for &bi in &order {
        let b = &buildings[bi];
        let (x0, y0, x1, y1) = b.aabb();
        let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(size as f64) as usize);
        let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(size as f64) as usize);
        for y in ys {
            for x in xs.clone() {
                if b.covers(x as f64 + 0.5, y as f64 + 0.5) {
                    owner[y * size + x] = Some(bi);
                }
            }
        }
    }

    let mut height = HeightMap::zeros(size, size);
    for (p, o) in owner.iter().enumerate() {
        if let Some(bi) = o {
            height.values[p] = buildings[*bi].height_m as f32;
        }
    }

    // Instances: visible part of each building, tallest first.
    let mut by_height: Vec<usize> = (0..buildings.len()).collect();
    by_height.sort_by(|&a, &b| buildings[b].height_m.total_cmp(&buildings[a].height_m).then(a.cmp(&b)));
    let mut instances = Vec::new();
    for bi in by_height {
        let mut mask = BinaryMask::empty(size, size);
        for (p, o) in owner.iter().enumerate() {
            if *o == Some(bi) {
                mask.data[p] = 1;
            }
        }
        if let Some(bbox) = mask.tight_box() {
            instances.push(Instance { bbox, mask, score: 1.0, height_m: Some(buildings[bi].height_m) });
        }
    }

    // Texture: ground tone with a smooth gradient, roofs by height, white noise on top.
    let base = [
        0.20 + rng.random_range(-0.03..0.03),
        0.24 + rng.random_range(-0.03..0.03),
        0.18 + rng.random_range(-0.03..0.03),
    ];
    let (gx, gy) = (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04));
    let noise = Normal::new(0.0, spec.texture_noise).map_err(|e| LightError::config("texture_noise", e.to_string()))?;
    let mut image = ImageTile::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let rgb = match owner[p] {
                Some(bi) => {
                    let v = roof_intensity(buildings[bi].height_m, h_max);
                    [v, v, 0.96 * v]
                }
                None => {
                    let t = gx * (x as f64 / size as f64 - 0.5) + gy * (y as f64 / size as f64 - 0.5);
                    [base[0] + t, base[1] + t, base[2] + t]
                }
            };
            let mut px = [0f32; 3];
            for c in 0..3 {
                px[c] = (rgb[c] + noise.sample(rng)).clamp(0.0, 1.0) as f32;
            }
            image.set_pixel(x, y, px);
        }
    }

    Ok(SyntheticSample {
        image,
        instances: InstanceSet { width: size, height: size, instances },
        height,
        meta: SampleMeta { seed: spec.seed, index, buildings },
    })
}

/// Dataset index written as `manifest.json` at the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    /// Height normalization scale, meters.
    pub h_max: f64,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            other => Err(LightError::data(format!("unknown split `{other}` (expected train or val)"))),
        }
    }
}

pub fn sample_name(index: u64) -> String {
    format!("sample_{index:06}")
}

/// Writes `n` samples with the default 90/10 train/val split by index.
pub fn write_dataset(spec: &SceneSpec, n: usize, dir: &Path) -> Result<DatasetManifest> {
    write_dataset_split(spec, n, n / 10, dir)
}

/// Writes `n` samples; the last `n_val` indices form the validation split.
pub fn write_dataset_split(spec: &SceneSpec, n: usize, n_val: usize, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_val > n {
        return Err(LightError::config("n_val", format!("{n_val} validation samples requested out of {n}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| LightError::io(dir, e))?;
    let mut manifest = DatasetManifest { format_version: 1, spec: spec.clone(), h_max: spec.h_max(), train: vec![], val: vec![] };
    for i in 0..n {
        let sample = generate_scene(spec, i as u64)?;
        let name = sample_name(i as u64);
        write_sample(&dir.join(&name), &sample)?;
        if i < n - n_val {
            manifest.train.push(name);
        } else {
            manifest.val.push(name);
        }
    }
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_sample(dir: &Path, sample: &SyntheticSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LightError::io(dir, e))?;
    io::write_image(&dir.join("image.png"), &sample.image)?;
    io::write_grid(&dir.join("height.grid"), &sample.height)?;
    io::write_instances(&dir.join("instances.json"), &sample.instances, false)?;
    io::write_json(&dir.join("meta.json"), &sample.meta)
}

/// One sample as read back from disk (the image is 8-bit quantized).
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub name: String,
    pub image: ImageTile,
    pub instances: InstanceSet,
    pub height: HeightMap,
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest.json");
        if !mpath.exists() {
            return Err(LightError::data(format!("no manifest.json in {}", root.display())));
        }
        Ok(Self { root: root.to_path_buf(), manifest: io::read_json(&mpath)? })
    }

    pub fn load(&self, name: &str) -> Result<LoadedSample> {
        let dir = self.root.join(name);
        let image = io::read_image(&dir.join("image.png"))?;
        let height = io::read_grid(&dir.join("height.grid"))?;
        if (height.rows, height.cols) != (image.height, image.width) {
            return Err(LightError::data(format!("{}: height grid and image sizes differ", dir.display())));
        }
        let instances = io::read_instances(&dir.join("instances.json"), image.width, image.height)?;
        Ok(LoadedSample { name: name.to_string(), image, instances, height })
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<LoadedSample>> {
        self.manifest.split(split)?.iter().map(|n| self.load(n)).collect()
    }
}
