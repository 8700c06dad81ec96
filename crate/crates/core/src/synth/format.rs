//! `SAMPV01` sample files and the dataset manifest.
//!
//! A sample file is the 7-byte magic followed by tagged sections
//! `(u32 tag, u64 byte length, payload)`, all little-endian. Float payloads
//! are `f32` except camera records, which keep `f64` so a round trip is
//! exact.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Quat};
use crate::model::InputBundle;
use crate::synth::sample::{Dataset, DatasetConfig, SceneSample, Split};

pub const SAMPLE_MAGIC: &[u8; 7] = b"SAMPV01";

const TAG_META: u32 = 1;
const TAG_EXPRESSIONS: u32 = 2;
const TAG_CAMERAS: u32 = 3;
const TAG_IMAGES: u32 = 4;
const TAG_POSITIONS: u32 = 5;
const TAG_CONFIDENCE: u32 = 6;
const TAG_FEATURES: u32 = 7;
const TAG_SUPERVISION: u32 = 8;

/// Bytes of one camera record: 11 `f64` then `u32` width, height and id.
const CAMERA_RECORD: usize = 11 * 8 + 3 * 4;

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn camera_bytes(cam: &Camera, id: u32, out: &mut Vec<u8>) {
    let q = cam.rotation;
    let t = cam.translation;
    for v in [cam.fx, cam.fy, cam.cx, cam.cy, q.w, q.x, q.y, q.z, t.x, t.y, t.z] {
        out.extend(v.to_le_bytes());
    }
    for v in [cam.width as u32, cam.height as u32, id] {
        out.extend(v.to_le_bytes());
    }
}

fn section<W: Write>(out: &mut W, tag: u32, payload: &[u8]) -> Result<()> {
    out.write_all(&tag.to_le_bytes())?;
    out.write_all(&(payload.len() as u64).to_le_bytes())?;
    out.write_all(payload)?;
    Ok(())
}

pub fn write_sample<W: Write>(s: &SceneSample, mut out: W) -> Result<()> {
    let b = &s.bundle;
    let meta = format!(
        "split={}\nindex={}\nidentity={}\nviews={}\ninput_size={}\nfeature_size={}\nfeature_channels={}\n\
         supervision_views={}\nsupervision_size={}\nexpr_dim={}\n",
        s.split.name(),
        s.index,
        s.identity,
        b.views(),
        b.size,
        b.feature_size,
        b.feature_channels,
        s.supervision_views(),
        s.supervision_size,
        s.target_expression.len()
    );
    out.write_all(SAMPLE_MAGIC)?;
    section(&mut out, TAG_META, meta.as_bytes())?;
    let exprs: Vec<f32> = s.target_expression.iter().chain(s.input_expressions.iter().flatten()).copied().collect();
    section(&mut out, TAG_EXPRESSIONS, &f32_bytes(&exprs))?;
    let mut cams = Vec::new();
    for (c, &id) in b.cameras.iter().zip(&s.input_camera_ids) {
        camera_bytes(c, id, &mut cams);
    }
    for (c, &id) in s.supervision_cameras.iter().zip(&s.supervision_camera_ids) {
        camera_bytes(c, id, &mut cams);
    }
    section(&mut out, TAG_CAMERAS, &cams)?;
    section(&mut out, TAG_IMAGES, &f32_bytes(&b.images))?;
    section(&mut out, TAG_POSITIONS, &f32_bytes(&b.positions))?;
    section(&mut out, TAG_CONFIDENCE, &f32_bytes(&b.confidence))?;
    section(&mut out, TAG_FEATURES, &f32_bytes(&b.features))?;
    section(&mut out, TAG_SUPERVISION, &f32_bytes(&s.supervision))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt("sample", format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn f32s(bytes: &[u8], expect: usize, what: &str) -> Result<Vec<f32>> {
    if bytes.len() != expect * 4 {
        return Err(Error::corrupt("sample", format!("{what}: {} bytes, expected {}", bytes.len(), expect * 4)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn meta_value(meta: &str, key: &str) -> Result<usize> {
    meta.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::corrupt("sample", format!("meta lacks a valid {key}")))
}

pub fn read_sample<R: Read>(mut input: R) -> Result<SceneSample> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(7, "magic")? != SAMPLE_MAGIC {
        return Err(Error::corrupt("sample", "bad magic"));
    }
    let mut sections: [Option<&[u8]>; 9] = [None; 9];
    while c.pos < buf.len() {
        let tag = c.u32("section tag")? as usize;
        let len = c.u64("section length")? as usize;
        let payload = c.take(len, "section payload")?;
        if !(1..=8).contains(&tag) {
            return Err(Error::corrupt("sample", format!("unknown section {tag}")));
        }
        if sections[tag].replace(payload).is_some() {
            return Err(Error::corrupt("sample", format!("duplicate section {tag}")));
        }
    }
    let get =
        |tag: u32| sections[tag as usize].ok_or_else(|| Error::corrupt("sample", format!("missing section {tag}")));
    let meta = std::str::from_utf8(get(TAG_META)?).map_err(|_| Error::corrupt("sample", "meta is not UTF-8"))?;
    let split_name = meta
        .lines()
        .find_map(|l| l.strip_prefix("split="))
        .ok_or_else(|| Error::corrupt("sample", "meta lacks split"))?;
    let split = Split::parse(split_name).map_err(|e| Error::corrupt("sample", e.to_string()))?;
    let index = meta_value(meta, "index")? as u64;
    let identity = meta_value(meta, "identity")? as u32;
    let v = meta_value(meta, "views")?;
    let size = meta_value(meta, "input_size")?;
    let fs = meta_value(meta, "feature_size")?;
    let fc = meta_value(meta, "feature_channels")?;
    let sv = meta_value(meta, "supervision_views")?;
    let ss = meta_value(meta, "supervision_size")?;
    let ed = meta_value(meta, "expr_dim")?;

    let exprs = f32s(get(TAG_EXPRESSIONS)?, (v + 1) * ed, "expressions")?;
    let cam_bytes = get(TAG_CAMERAS)?;
    if cam_bytes.len() != (v + sv) * CAMERA_RECORD {
        return Err(Error::corrupt("sample", "camera section size"));
    }
    let mut cc = Cursor { buf: cam_bytes, pos: 0 };
    let mut cams = Vec::with_capacity(v + sv);
    let mut ids = Vec::with_capacity(v + sv);
    for _ in 0..v + sv {
        let mut f = [0.0; 11];
        for x in f.iter_mut() {
            *x = cc.f64("camera")?;
        }
        let (w, h, id) = (cc.u32("camera")?, cc.u32("camera")?, cc.u32("camera")?);
        let cam = Camera {
            fx: f[0],
            fy: f[1],
            cx: f[2],
            cy: f[3],
            rotation: Quat::new(f[4], f[5], f[6], f[7]),
            translation: Vector3::new(f[8], f[9], f[10]),
            width: w as usize,
            height: h as usize,
        };
        cam.validate().map_err(|e| Error::corrupt("sample", e.to_string()))?;
        cams.push(cam);
        ids.push(id);
    }
    let n = v * size * size;
    let bundle = InputBundle {
        size,
        images: f32s(get(TAG_IMAGES)?, 3 * n, "images")?,
        positions: f32s(get(TAG_POSITIONS)?, 3 * n, "positions")?,
        confidence: f32s(get(TAG_CONFIDENCE)?, n, "confidence")?,
        features: f32s(get(TAG_FEATURES)?, v * fs * fs * fc, "features")?,
        feature_size: fs,
        feature_channels: fc,
        cameras: cams[..v].to_vec(),
    };
    bundle.validate().map_err(|e| Error::corrupt("sample", e.to_string()))?;
    Ok(SceneSample {
        split,
        index,
        identity,
        target_expression: exprs[..ed].to_vec(),
        input_expressions: exprs[ed..].chunks(ed.max(1)).map(|c| c.to_vec()).collect(),
        input_camera_ids: ids[..v].to_vec(),
        bundle,
        supervision_camera_ids: ids[v..].to_vec(),
        supervision_cameras: cams[v..].to_vec(),
        supervision_size: ss,
        supervision: f32s(get(TAG_SUPERVISION)?, sv * ss * ss * 3, "supervision")?,
    })
}

/// One listed sample file.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub index: u64,
    /// Path relative to the dataset directory.
    pub path: String,
    pub bytes: u64,
}

/// `manifest.txt`: the dataset config followed by one
/// `sample=<split> <index> <path> <bytes>` line per file.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = self.config.to_text();
        let c = &self.config;
        for i in 0..c.identities + c.heldout_identities {
            s.push_str(&format!("identity={i} {}\n", c.identity_seed(i)));
        }
        for e in &self.entries {
            s.push_str(&format!("sample={} {} {} {}\n", e.split.name(), e.index, e.path, e.bytes));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg_lines = String::new();
        let mut entries = Vec::new();
        let mut seeds = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.trim().strip_prefix("identity=") {
                let f: Vec<u64> = rest.split_whitespace().filter_map(|v| v.parse().ok()).collect();
                if f.len() != 2 {
                    return Err(Error::corrupt("manifest", format!("bad identity line {line:?}")));
                }
                seeds.push((f[0] as usize, f[1]));
                continue;
            }
            match line.trim().strip_prefix("sample=") {
                Some(rest) => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    let bad = || Error::corrupt("manifest", format!("bad sample line {line:?}"));
                    if f.len() != 4 {
                        return Err(bad());
                    }
                    entries.push(ManifestEntry {
                        split: Split::parse(f[0]).map_err(|_| bad())?,
                        index: f[1].parse().map_err(|_| bad())?,
                        path: f[2].to_string(),
                        bytes: f[3].parse().map_err(|_| bad())?,
                    });
                }
                None => {
                    cfg_lines.push_str(line);
                    cfg_lines.push('\n');
                }
            }
        }
        let config = DatasetConfig::parse(&cfg_lines)?;
        // identity seeds are derived; a mismatch means the file was edited
        if let Some(&(i, seed)) = seeds.iter().find(|&&(i, seed)| config.identity_seed(i) != seed) {
            return Err(Error::corrupt("manifest", format!("identity {i} lists seed {seed}, config derives another")));
        }
        Ok(Manifest { config, entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
    }

    pub fn entries_of(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Samples per split written by [`write_dataset`].
pub fn split_sizes(config: &DatasetConfig) -> [(Split, u64); 3] {
    let per = config.samples_per_identity as u64;
    [
        (Split::Train, per * config.identities as u64),
        (Split::Val, config.identities as u64),
        (Split::Heldout, per * config.heldout_identities as u64),
    ]
}

/// Generates every sample file plus the manifest under `dir`.
pub fn write_dataset(dir: &Path, config: &DatasetConfig) -> Result<Manifest> {
    let data = Dataset::new(config.clone())?;
    let mut entries = Vec::new();
    for (split, count) in split_sizes(config) {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub)?;
        for index in 0..count {
            let rel = format!("{}/{index:06}.samp", split.name());
            let mut bytes = Vec::new();
            write_sample(&data.sample(split, index)?, &mut bytes)?;
            fs::write(dir.join(&rel), &bytes)?;
            entries.push(ManifestEntry { split, index, path: rel, bytes: bytes.len() as u64 });
        }
    }
    let m = Manifest { config: config.clone(), entries };
    fs::write(dir.join(MANIFEST_FILE), m.to_text())?;
    Ok(m)
}

/// Reads the listed sample files of one split.
#[derive(Clone, Debug)]
pub struct DiskSamples {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DiskSamples {
    pub fn open(dir: &Path, split: Split) -> Result<(Manifest, Self)> {
        let m = Manifest::load(dir)?;
        let entries = m.entries_of(split).into_iter().cloned().collect();
        Ok((m, DiskSamples { root: dir.to_path_buf(), entries }))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<SceneSample> {
        let e = &self.entries[i];
        let bytes = fs::read(self.root.join(&e.path))?;
        if bytes.len() as u64 != e.bytes {
            return Err(Error::corrupt(
                "sample",
                format!("{}: {} bytes, manifest says {}", e.path, bytes.len(), e.bytes),
            ));
        }
        read_sample(bytes.as_slice())
    }
}
