//! On-disk containers: model checkpoints (DSNM/DSCF), dataset blobs (DSDT),
//! spectrum caches (DSSP), flat key-value manifests, and content hashing.
//! Every format round-trips bit-exactly.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::classifier::{Classifier, ClassifierSpec};
use crate::data::{LabeledImage, Origin, SampleId};
use crate::diffusion::{NoiseModel, NoiseNet, NoiseNetSpec};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::spectrum::SpectrumEntry;

const FORMAT_VERSION: u16 = 1;

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

// --- little-endian buffer helpers -----------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.f32(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4], path: &'a Path) -> Result<Self> {
        if buf.len() < 6 {
            return Err(corrupt(path, "file too short"));
        }
        if &buf[..4] != magic {
            return Err(corrupt(
                path,
                format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap()),
            ));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != FORMAT_VERSION {
            return Err(corrupt(path, format!("unsupported version {version}")));
        }
        Ok(Reader { buf, pos: 6, path })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(corrupt(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

// --- noise-model checkpoint (DSNM) -----------------------------------------

pub fn save_noise_model(model: &NoiseModel, path: &Path) -> Result<()> {
    let net = match model {
        NoiseModel::Net(net) => net,
        NoiseModel::AnalyticGaussian { .. } => {
            return Err(Error::invalid(
                "analytic models are test oracles and have no checkpoint form",
            ))
        }
    };
    let mut w = Writer::new(b"DSNM");
    w.u32(net.spec.height as u32);
    w.u32(net.spec.width as u32);
    w.u32(net.spec.classes as u32);
    w.u32(net.spec.hidden as u32);
    w.u32(net.spec.time_dim as u32);
    w.u32(net.spec.class_dim as u32);
    w.u64(net.params.len() as u64);
    w.f32s(&net.params);
    fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_noise_model(path: &Path) -> Result<NoiseModel> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, b"DSNM", path)?;
    let spec = NoiseNetSpec {
        height: r.u32()? as usize,
        width: r.u32()? as usize,
        classes: r.u32()? as usize,
        hidden: r.u32()? as usize,
        time_dim: r.u32()? as usize,
        class_dim: r.u32()? as usize,
    };
    let count = r.u64()? as usize;
    if count != spec.param_count() {
        return Err(corrupt(
            path,
            format!("parameter count {count} does not match descriptor"),
        ));
    }
    let params = r.f32s(count)?;
    r.done()?;
    Ok(NoiseModel::Net(NoiseNet { spec, params }))
}

// --- classifier checkpoint (DSCF) ------------------------------------------

pub fn save_classifier(clf: &Classifier, path: &Path) -> Result<()> {
    let mut w = Writer::new(b"DSCF");
    w.u32(clf.spec.height as u32);
    w.u32(clf.spec.width as u32);
    w.u32(clf.spec.classes as u32);
    w.u32(clf.spec.channels as u32);
    w.u32(clf.spec.embed_dim as u32);
    w.u64(clf.epochs_trained);
    w.u64(clf.params.len() as u64);
    w.f32s(&clf.params);
    fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, b"DSCF", path)?;
    let spec = ClassifierSpec {
        height: r.u32()? as usize,
        width: r.u32()? as usize,
        classes: r.u32()? as usize,
        channels: r.u32()? as usize,
        embed_dim: r.u32()? as usize,
    };
    let epochs_trained = r.u64()?;
    let count = r.u64()? as usize;
    if count != spec.param_count() {
        return Err(corrupt(
            path,
            format!("parameter count {count} does not match descriptor"),
        ));
    }
    let params = r.f32s(count)?;
    r.done()?;
    Ok(Classifier {
        spec,
        params,
        epochs_trained,
    })
}

// --- dataset blob (DSDT) ----------------------------------------------------

pub fn save_dataset(data: &[LabeledImage], path: &Path) -> Result<()> {
    let mut w = Writer::new(b"DSDT");
    let (h, wd) = data
        .first()
        .map(|s| (s.image.height, s.image.width))
        .unwrap_or((0, 0));
    w.u32(h as u32);
    w.u32(wd as u32);
    w.u64(data.len() as u64);
    for s in data {
        if s.image.height != h || s.image.width != wd {
            return Err(Error::invalid("dataset images must share one shape"));
        }
        w.u64(s.sample_id.0);
        w.u16(s.label);
        w.u8(match s.origin {
            Origin::Real => 0,
            Origin::Synthetic => 1,
        });
        w.f32(s.lambda as f32);
        w.f32s(&s.image.pixels);
    }
    fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, b"DSDT", path)?;
    let h = r.u32()? as usize;
    let wd = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let sample_id = SampleId(r.u64()?);
        let label = r.u16()?;
        let origin = match r.u8()? {
            0 => Origin::Real,
            1 => Origin::Synthetic,
            other => return Err(corrupt(path, format!("bad origin byte {other}"))),
        };
        let lambda = r.f32()? as f64;
        let pixels = r.f32s(h * wd)?;
        out.push(LabeledImage {
            image: ImageTensor::from_pixels(h, wd, pixels)?,
            label,
            origin,
            lambda,
            sample_id,
        });
    }
    r.done()?;
    Ok(out)
}

// --- spectrum cache (DSSP) ---------------------------------------------------

/// Record layout is fixed: source_id u64, lambda f32, seed u16, kept u8,
/// fidelity f32, then H*W f32 pixels. Labels, the grid, and image shape live
/// in the companion manifest.
pub fn save_spectrum(entries: &[SpectrumEntry], path: &Path) -> Result<()> {
    let mut w = Writer::new(b"DSSP");
    w.u64(entries.len() as u64);
    for e in entries {
        w.u64(e.source_id.0);
        w.f32(e.lambda as f32);
        w.u16(e.seed_index);
        w.u8(e.kept as u8);
        w.f32(e.fidelity);
        w.f32s(&e.image.pixels);
    }
    fs::write(path, w.buf)?;
    Ok(())
}

/// Load a spectrum cache. The caller supplies image shape, the guidance grid
/// and the source-id to label map (all recorded in the companion manifest).
pub fn load_spectrum(
    path: &Path,
    height: usize,
    width: usize,
    grid_levels: &[f64],
    label_of_source: &dyn Fn(SampleId) -> Option<u16>,
) -> Result<Vec<SpectrumEntry>> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, b"DSSP", path)?;
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let source_id = SampleId(r.u64()?);
        let lambda = r.f32()? as f64;
        let seed_index = r.u16()?;
        let kept = r.u8()? != 0;
        let fidelity = r.f32()?;
        let pixels = r.f32s(height * width)?;
        let lambda_index = grid_levels
            .iter()
            .position(|&l| (l - lambda).abs() < 1e-6)
            .ok_or_else(|| corrupt(path, format!("lambda {lambda} not on the grid")))?;
        let label = label_of_source(source_id)
            .ok_or_else(|| corrupt(path, format!("unknown source id {}", source_id.0)))?;
        out.push(SpectrumEntry {
            entry_id: SampleId(crate::data::SYNTHETIC_ID_BASE + i as u64),
            source_id,
            label,
            lambda: grid_levels[lambda_index],
            lambda_index,
            seed_index,
            image: ImageTensor::from_pixels(height, width, pixels)?,
            fidelity,
            kept,
        });
    }
    r.done()?;
    Ok(out)
}

// --- flat key-value manifests -------------------------------------------------

/// Serialize ordered key-value pairs as `key = value` lines.
pub fn kv_to_string(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn kv_parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::invalid(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// SHA-256 content hash, hex-encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hash a file's contents.
pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
