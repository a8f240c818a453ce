//! Synthetic scenes, augmentation and the on-disk dataset layout.

pub mod augment;
pub mod resize;
pub mod scene;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use resize::{resize_bilinear, resize_depth, resize_image};
pub use scene::{generate_frame, generate_scene, layout, render, Primitive, Render, Scene, SceneSpec, Shape};

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::ndcore::Rng;
use crate::raster::{read_depth, read_pgm16, read_ppm, write_depth, write_pgm16, write_ppm, DepthMap, Image, LabelMap};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub depth: DepthMap,
    pub instances: LabelMap,
    pub scene_id: u32,
    pub frame_id: u32,
}

pub const MANIFEST: &str = "manifest.txt";

fn stem_paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
    ["ppm", "depth", "pgm"].map(|ext| dir.join(format!("{stem}.{ext}")))
}

pub fn write_sample(dir: &Path, stem: &str, s: &Sample) -> Result<()> {
    let [img, dep, ins] = stem_paths(dir, stem);
    let mut w = BufWriter::new(File::create(img)?);
    write_ppm(&mut w, &s.image)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dep)?);
    write_depth(&mut w, &s.depth)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(ins)?);
    write_pgm16(&mut w, &s.instances)?;
    w.flush()?;
    Ok(())
}

pub fn read_sample(dir: &Path, stem: &str, scene_id: u32, frame_id: u32) -> Result<Sample> {
    let [img, dep, ins] = stem_paths(dir, stem);
    let image = read_ppm(&mut BufReader::new(File::open(img)?))?;
    let depth = read_depth(&mut BufReader::new(File::open(dep)?))?;
    let instances = read_pgm16(&mut BufReader::new(File::open(ins)?))?;
    let dims = [
        (image.height, image.width),
        (depth.height, depth.width),
        (instances.height, instances.width),
    ];
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(Error::Format(format!("sample {stem} has rasters of different sizes: {dims:?}")));
    }
    Ok(Sample {
        image,
        depth,
        instances,
        scene_id,
        frame_id,
    })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub stem: String,
    pub scene_id: u32,
    pub frame_id: u32,
}

pub fn render_manifest(entries: &[Entry]) -> String {
    let mut s = String::from("# stem scene frame\n");
    for e in entries {
        s.push_str(&format!("{} {} {}\n", e.stem, e.scene_id, e.frame_id));
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("manifest line {}: {line:?}", n + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(Entry {
            stem: f[0].to_string(),
            scene_id: f[1].parse().map_err(|_| bad())?,
            frame_id: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// How to synthesize a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub scenes: usize,
    pub frames_per_scene: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub spec: SceneSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            frames_per_scene: 4,
            height: 96,
            width: 96,
            seed: 0,
            spec: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(cfg: &GenConfig) -> Result<Self> {
        if cfg.height == 0 || cfg.width == 0 || cfg.scenes == 0 || cfg.frames_per_scene == 0 {
            return Err(Error::Config("dataset needs nonzero size, scenes and frames".into()));
        }
        let k = Intrinsics::for_size(cfg.height, cfg.width);
        let root = Rng::new(cfg.seed);
        let mut samples = Vec::with_capacity(cfg.scenes * cfg.frames_per_scene);
        for scene in 0..cfg.scenes {
            let seed = root.child_indexed("scene", scene as u64).next_u64();
            for frame in 0..cfg.frames_per_scene {
                let mut s = generate_frame(seed, frame as u32, &cfg.spec, cfg.height, cfg.width, &k)?.sample;
                s.scene_id = scene as u32;
                samples.push(s);
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.height, s.image.width))
    }

    pub fn entries(&self) -> Vec<Entry> {
        self.samples
            .iter()
            .map(|s| Entry {
                stem: format!("s{:04}_f{:02}", s.scene_id, s.frame_id),
                scene_id: s.scene_id,
                frame_id: s.frame_id,
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let entries = self.entries();
        for (e, s) in entries.iter().zip(&self.samples) {
            write_sample(dir, &e.stem, s)?;
        }
        fs::write(dir.join(MANIFEST), render_manifest(&entries))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let entries = parse_manifest(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let samples = entries
            .iter()
            .map(|e| read_sample(dir, &e.stem, e.scene_id, e.frame_id))
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Format("manifest lists no samples".into()));
        }
        let d = Self { samples };
        let size = d.size();
        if d.samples.iter().any(|s| Some((s.image.height, s.image.width)) != size) {
            return Err(Error::Format("samples differ in size".into()));
        }
        Ok(d)
    }

    /// Visiting order for one epoch; depends only on `seed` and `epoch`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        Rng::new(seed).child_indexed("epoch", epoch).permutation(self.len())
    }
}
