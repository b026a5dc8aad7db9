//! Procedural paired shadow/shadow-free data: structured base images
//! (gradients, shapes, thin strokes), soft convex shadow masks, and a
//! per-channel attenuation model. Generation is byte-reproducible from the
//! dataset seed, with disjoint random streams per split and per example.

use crate::error::{Error, Result};
use crate::imageio::{load_png, load_png_gray, save_png};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataCfg {
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DataCfg {
    fn default() -> Self {
        Self {
            size: 64,
            train: 24,
            val: 4,
            test: 8,
            seed: 1,
        }
    }
}

impl DataCfg {
    pub fn count(&self, split: &str) -> Result<usize> {
        match split {
            "train" => Ok(self.train),
            "val" => Ok(self.val),
            "test" => Ok(self.test),
            other => Err(Error::InvalidArgument(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub shadow: Tensor<f32>,
    pub shadow_free: Tensor<f32>,
    pub mask: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: String,
    pub index: usize,
    pub shadow: String,
    pub shadow_free: String,
    pub mask: String,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub cfg: DataCfg,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    /// Line-oriented text: `#`-prefixed header documents the generator
    /// settings and columns; one whitespace-separated row per example.
    pub fn to_text(&self) -> String {
        let c = &self.cfg;
        let mut s = String::new();
        s.push_str(&format!(
            "# size={} seed={} train={} val={} test={}\n",
            c.size, c.seed, c.train, c.val, c.test
        ));
        s.push_str("# columns: split index shadow_file shadow_free_file mask_file\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{} {} {} {} {}\n",
                e.split, e.index, e.shadow, e.shadow_free, e.mask
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = DataCfg {
            size: 0,
            train: 0,
            val: 0,
            test: 0,
            seed: 0,
        };
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for kv in rest.split_whitespace() {
                    if let Some((k, v)) = kv.split_once('=') {
                        let v: u64 = v
                            .parse()
                            .map_err(|_| Error::Data(format!("bad manifest header {kv}")))?;
                        match k {
                            "size" => cfg.size = v as usize,
                            "seed" => cfg.seed = v,
                            "train" => cfg.train = v as usize,
                            "val" => cfg.val = v as usize,
                            "test" => cfg.test = v as usize,
                            _ => {}
                        }
                    }
                }
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 5 {
                return Err(Error::Data(format!("bad manifest row: {line}")));
            }
            entries.push(ManifestEntry {
                split: cols[0].to_string(),
                index: cols[1]
                    .parse()
                    .map_err(|_| Error::Data(format!("bad index in row: {line}")))?,
                shadow: cols[2].to_string(),
                shadow_free: cols[3].to_string(),
                mask: cols[4].to_string(),
            });
        }
        if cfg.size == 0 {
            return Err(Error::Data("manifest missing size header".into()));
        }
        Ok(Self { cfg, entries })
    }
}

fn put(img: &mut Tensor<f32>, ch: usize, y: usize, x: usize, v: f32, h: usize, w: usize) {
    img[ch * h * w + y * w + x] = v;
}

fn get(img: &Tensor<f32>, ch: usize, y: usize, x: usize, h: usize, w: usize) -> f32 {
    img[ch * h * w + y * w + x]
}

/// A structured base image: a two-color gradient background, a few filled
/// shapes, and thin high-contrast strokes.
pub fn gen_base_image<R: Rng>(rng: &mut R, size: usize) -> Tensor<f32> {
    let (h, w) = (size, size);
    let mut img = Tensor::zeros(&[3, h, w]);
    // gradient background between two random colors along a random direction
    let c0: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let c1: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = (theta.sin(), theta.cos());
    for y in 0..h {
        for x in 0..w {
            let proj = (y as f32 / h as f32 - 0.5) * dy + (x as f32 / w as f32 - 0.5) * dx;
            let t = (proj + 0.5).clamp(0.0, 1.0);
            for ch in 0..3 {
                put(&mut img, ch, y, x, c0[ch] * (1.0 - t) + c1[ch] * t, h, w);
            }
        }
    }
    // filled shapes
    let n_shapes = rng.gen_range(2..=4);
    for _ in 0..n_shapes {
        let col: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let cy = rng.gen_range(0.0..h as f32);
        let cx = rng.gen_range(0.0..w as f32);
        let ry = rng.gen_range(0.08..0.25) * h as f32;
        let rx = rng.gen_range(0.08..0.25) * w as f32;
        let rect: bool = rng.gen();
        for y in 0..h {
            for x in 0..w {
                let fy = (y as f32 - cy) / ry;
                let fx = (x as f32 - cx) / rx;
                let inside = if rect {
                    fy.abs() <= 1.0 && fx.abs() <= 1.0
                } else {
                    fy * fy + fx * fx <= 1.0
                };
                if inside {
                    for ch in 0..3 {
                        let old = get(&img, ch, y, x, h, w);
                        put(&mut img, ch, y, x, 0.35 * old + 0.65 * col[ch], h, w);
                    }
                }
            }
        }
    }
    // thin strokes: short random polylines in a contrasting tone
    let n_strokes = rng.gen_range(3..=6);
    for _ in 0..n_strokes {
        let bright: bool = rng.gen();
        let v = if bright { 0.95 } else { 0.05 };
        let mut y = rng.gen_range(2.0..(h as f32 - 2.0));
        let mut x = rng.gen_range(2.0..(w as f32 - 2.0));
        let mut ang: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let steps = rng.gen_range(8..=2 * size);
        for _ in 0..steps {
            let (yi, xi) = (y as usize, x as usize);
            if yi < h && xi < w {
                for ch in 0..3 {
                    put(&mut img, ch, yi, xi, v, h, w);
                }
            }
            ang += rng.gen_range(-0.3..0.3);
            y += ang.sin();
            x += ang.cos();
            if y < 1.0 || y >= h as f32 - 1.0 || x < 1.0 || x >= w as f32 - 1.0 {
                break;
            }
        }
    }
    img
}

/// Separable Gaussian blur of a `[1,H,W]` map.
pub fn gaussian_blur(map: &Tensor<f32>, sigma: f32) -> Result<Tensor<f32>> {
    let (c, h, w) = map.dims3()?;
    if c != 1 {
        return Err(Error::InvalidArgument("blur expects one channel".into()));
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let v = (-((i * i) as f32) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * map[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Tensor::new(&[1, h, w], out)
}

fn convex_polygon_mask<R: Rng>(rng: &mut R, size: usize) -> Tensor<f32> {
    let (h, w) = (size, size);
    let cy = rng.gen_range(0.25..0.75) * h as f32;
    let cx = rng.gen_range(0.25..0.75) * w as f32;
    let ellipse: bool = rng.gen_bool(0.4);
    let mut mask = Tensor::zeros(&[1, h, w]);
    if ellipse {
        let ry = rng.gen_range(0.12..0.4) * h as f32;
        let rx = rng.gen_range(0.12..0.4) * w as f32;
        for y in 0..h {
            for x in 0..w {
                let fy = (y as f32 - cy) / ry;
                let fx = (x as f32 - cx) / rx;
                if fy * fy + fx * fx <= 1.0 {
                    mask[y * w + x] = 1.0;
                }
            }
        }
    } else {
        let n = rng.gen_range(3..=7);
        let mut angles: Vec<f32> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f32::consts::TAU))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let verts: Vec<(f32, f32)> = angles
            .iter()
            .map(|&a| {
                let r = rng.gen_range(0.15..0.45) * size as f32;
                (cy + r * a.sin(), cx + r * a.cos())
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                // inside iff on the same side of every edge (vertices are
                // in angular order around the center, so the hull is convex)
                let mut sign = 0.0f32;
                let mut inside = true;
                for i in 0..n {
                    let (ay, ax) = verts[i];
                    let (by, bx) = verts[(i + 1) % n];
                    let cross = (bx - ax) * (y as f32 - ay) - (by - ay) * (x as f32 - ax);
                    if cross.abs() > 1e-9 {
                        if sign == 0.0 {
                            sign = cross.signum();
                        } else if cross.signum() != sign {
                            inside = false;
                            break;
                        }
                    }
                }
                if inside {
                    mask[y * w + x] = 1.0;
                }
            }
        }
    }
    mask
}

/// A soft shadow mask: a random convex region blurred at the boundary.
/// The interior saturates at 1 and the soft coverage lands in `[0.05, 0.6]`
/// of the image (rejection-sampled).
pub fn gen_shadow_mask<R: Rng>(rng: &mut R, size: usize) -> Result<Tensor<f32>> {
    for _ in 0..200 {
        let hard = convex_polygon_mask(rng, size);
        let sigma = rng.gen_range(1.0..3.0);
        let soft = gaussian_blur(&hard, sigma)?;
        let peak = (0..soft.len()).map(|i| soft[i]).fold(0.0f32, f32::max);
        if peak < 0.995 {
            continue; // region too thin to keep a fully shadowed interior
        }
        let area = (0..soft.len()).map(|i| soft[i] as f64).sum::<f64>() / soft.len() as f64;
        if (0.05..=0.6).contains(&area) {
            return Ok(soft);
        }
    }
    Err(Error::Data(
        "could not sample a shadow mask within the coverage bounds".into(),
    ))
}

/// Darken `base` under `mask` with per-channel attenuation factors:
/// `out = base * (1 - (1 - a_c) * mask)`, so mask=0 keeps the pixel and
/// mask=1 scales channel `c` by `a_c`.
pub fn apply_shadow(
    base: &Tensor<f32>,
    mask: &Tensor<f32>,
    atten: [f32; 3],
) -> Result<Tensor<f32>> {
    let (c, h, w) = base.dims3()?;
    let (mc, mh, mw) = mask.dims3()?;
    if c != 3 || mc != 1 || mh != h || mw != w {
        return Err(Error::ShapeMismatch(format!(
            "apply_shadow: base {:?} mask {:?}",
            base.shape(),
            mask.shape()
        )));
    }
    let mut out = base.clone();
    for ch in 0..3 {
        for i in 0..h * w {
            out[ch * h * w + i] = base[ch * h * w + i] * (1.0 - (1.0 - atten[ch]) * mask[i]);
        }
    }
    Ok(out)
}

pub fn gen_example<R: Rng>(rng: &mut R, size: usize) -> Result<Example> {
    let shadow_free = gen_base_image(rng, size);
    let mask = gen_shadow_mask(rng, size)?;
    let atten = [
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
    ];
    let shadow = apply_shadow(&shadow_free, &mask, atten)?;
    Ok(Example {
        shadow,
        shadow_free,
        mask,
    })
}

fn example_rng(seed: u64, split_id: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split_id << 32) | index);
    rng
}

/// Generate and write the full dataset: `{split}_{index}_{role}.png`
/// triplets plus `manifest.json`.
pub fn gen_dataset(dir: &Path, cfg: &DataCfg) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (split_id, split) in SPLITS.iter().enumerate() {
        let n = cfg.count(split)?;
        for index in 0..n {
            let mut rng = example_rng(cfg.seed, split_id as u64 + 1, index as u64);
            let ex = gen_example(&mut rng, cfg.size)?;
            let names = [
                format!("{split}_{index}_shadow.png"),
                format!("{split}_{index}_sf.png"),
                format!("{split}_{index}_mask.png"),
            ];
            save_png(&dir.join(&names[0]), &ex.shadow)?;
            save_png(&dir.join(&names[1]), &ex.shadow_free)?;
            save_png(&dir.join(&names[2]), &ex.mask)?;
            entries.push(ManifestEntry {
                split: split.to_string(),
                index,
                shadow: names[0].clone(),
                shadow_free: names[1].clone(),
                mask: names[2].clone(),
            });
        }
    }
    let manifest = Manifest {
        cfg: cfg.clone(),
        entries,
    };
    std::fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Manifest::from_text(&text)
}

/// Load one split's examples back from disk.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Example>> {
    let manifest = load_manifest(dir)?;
    let mut out = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == split) {
        out.push(Example {
            shadow: load_png(&dir.join(&e.shadow))?,
            shadow_free: load_png(&dir.join(&e.shadow_free))?,
            mask: load_png_gray(&dir.join(&e.mask))?,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no examples for split {split}")));
    }
    Ok(out)
}
