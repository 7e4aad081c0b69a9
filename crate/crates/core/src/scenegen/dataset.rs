//! Scene collections and their on-disk container: a length-prefixed binary
//! record file plus a JSON manifest next to it.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, SceneConfig, SceneSample};
use crate::dethead::DetectionBox;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"CFTSCN01";
pub const MANIFEST_FORMAT: &str = "cft-scenes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Record file, relative to the manifest.
    pub records: String,
    pub count: usize,
    pub seeds: Vec<u64>,
    pub scene: SceneConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub scenes: Vec<SceneSample>,
}

/// Per-scene seeds derived from one base seed.
pub fn scene_seeds(base: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..count).map(|_| rng.random()).collect()
}

impl Dataset {
    pub fn generate(config: &SceneConfig, base_seed: u64, count: usize) -> Result<Self> {
        Self::from_seeds(config, &scene_seeds(base_seed, count))
    }

    pub fn from_seeds(config: &SceneConfig, seeds: &[u64]) -> Result<Self> {
        let rig = config.rig()?;
        let scenes = seeds.par_iter().map(|&s| generate_scene(s, config, &rig)).collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let bin_name = format!("{stem}.bin");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.scenes.len() as u64).to_le_bytes());
        for s in &self.scenes {
            let rec = encode_record(s);
            out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
            out.extend_from_slice(&rec);
        }
        fs::File::create(dir.join(&bin_name))?.write_all(&out)?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            records: bin_name,
            count: self.scenes.len(),
            seeds: self.scenes.iter().map(|s| s.seed).collect(),
            scene: self.config.clone(),
        };
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
            return Err(Error::Dataset(format!("unsupported manifest {} v{}", manifest.format, manifest.version)));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut bytes = Vec::new();
        fs::File::open(dir.join(&manifest.records))?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Dataset("bad record file header".into()));
        }
        let count = cur.u64()? as usize;
        if count != manifest.count {
            return Err(Error::Dataset(format!("manifest lists {} scenes, file has {count}", manifest.count)));
        }
        let mut scenes = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u64()? as usize;
            let mut rec = Cursor { bytes: cur.take(len)?, pos: 0 };
            scenes.push(decode_record(&mut rec)?);
        }
        if scenes.iter().map(|s| s.seed).ne(manifest.seeds.iter().copied()) {
            return Err(Error::Dataset("record seeds disagree with the manifest".into()));
        }
        Ok(Self { config: manifest.scene, scenes })
    }
}

fn encode_record(s: &SceneSample) -> Vec<u8> {
    let mut r = Vec::new();
    r.extend_from_slice(&s.seed.to_le_bytes());
    r.extend_from_slice(&(s.boxes.len() as u32).to_le_bytes());
    for b in &s.boxes {
        for v in b.center.iter().chain(&b.size).chain([&b.yaw]).chain(&b.velocity).chain([&b.score]) {
            r.extend_from_slice(&v.to_le_bytes());
        }
        r.extend_from_slice(&(b.class_id as u32).to_le_bytes());
    }
    let (rows, cols) = s.images.dims2().expect("images are a matrix");
    r.extend_from_slice(&(rows as u32).to_le_bytes());
    r.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in s.images.data() {
        r.extend_from_slice(&v.to_le_bytes());
    }
    r
}

fn decode_record(c: &mut Cursor) -> Result<SceneSample> {
    let seed = c.u64()?;
    let n = c.u32()? as usize;
    let mut boxes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut f = [0.0; 10];
        for v in &mut f {
            *v = c.f64()?;
        }
        boxes.push(DetectionBox {
            center: [f[0], f[1], f[2]],
            size: [f[3], f[4], f[5]],
            yaw: f[6],
            velocity: [f[7], f[8]],
            score: f[9],
            class_id: c.u32()? as usize,
        });
    }
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let data = (0..rows * cols).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
    if c.pos != c.bytes.len() {
        return Err(Error::Dataset("trailing bytes in scene record".into()));
    }
    Ok(SceneSample { seed, boxes, images: Tensor::new(&[rows, cols], data)? })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Dataset("truncated scene file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
