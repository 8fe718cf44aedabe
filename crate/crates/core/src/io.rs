//! Little-endian file formats.
//!
//! | file          | magic  | header after magic + `version: u32`              | payload            |
//! |---------------|--------|--------------------------------------------------|--------------------|
//! | feature maps  | `QFMP` | `n, d, h, w: u32`                                | `n·d·h·w` × `f32`  |
//! | scores        | `QSIM` | `stage, n_query, n_gallery: u32`                 | `n_q·n_g` × `f32`  |
//! | head          | `QHED` | `n_features, mode: u32`                          | `f64` fields       |
//! | image         | `QIMG` | `channels, height, width: u32`                   | `c·h·w` × `f32`    |
//!
//! Feature payloads are ordered (sample, channel, row, column); score
//! payloads are row-major. Metadata is a text file with one
//! `id,camera[,frame,fps]` line per sample.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::augment::ImageTensor;
use crate::error::{Error, Result};
use crate::matching::{BatchNorm, HeadParams, Mode, SimilarityMatrix, Stage};
use crate::store::MetaRecord;
use crate::tensor::FeatureMap;

pub const VERSION: u32 = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"QFMP";
pub const SCORE_MAGIC: &[u8; 4] = b"QSIM";
pub const HEAD_MAGIC: &[u8; 4] = b"QHED";
pub const IMAGE_MAGIC: &[u8; 4] = b"QIMG";

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Decoder<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Decoder<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if buf.len() < 8 || &buf[..4] != magic {
            return format_err(format!("{what}: bad magic, expected {:?}", String::from_utf8_lossy(magic)));
        }
        let mut dec = Self { buf: &buf[4..], what };
        let version = dec.u32()?;
        if version != VERSION {
            return format_err(format!("{what}: unsupported version {version}"));
        }
        Ok(dec)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return format_err(format!("{}: truncated", self.what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(self) -> Result<()> {
        if !self.buf.is_empty() {
            return format_err(format!("{}: {} trailing bytes", self.what, self.buf.len()));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4], fields: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * fields.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn push_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn dim(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).or_else(|_| format_err(format!("{what} {x} does not fit in u32")))
}

/// Contents of a feature-map file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub maps: Vec<FeatureMap>,
}

pub fn encode_features(file: &FeatureFile) -> Result<Vec<u8>> {
    let profile = (file.d, file.h, file.w);
    if let Some(m) = file.maps.iter().find(|m| m.profile() != profile) {
        return Err(Error::ProfileMismatch(format!("map profile {:?} vs header {profile:?}", m.profile())));
    }
    let mut out = header(
        FEATURE_MAGIC,
        &[dim(file.maps.len(), "n")?, dim(file.d, "d")?, dim(file.h, "h")?, dim(file.w, "w")?],
    );
    for m in &file.maps {
        push_f32s(&mut out, m.data());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureFile> {
    let mut dec = Decoder::new(bytes, FEATURE_MAGIC, "feature file")?;
    let [n, d, h, w] = [dec.u32()?, dec.u32()?, dec.u32()?, dec.u32()?].map(|x| x as usize);
    if d == 0 || h == 0 || w == 0 {
        return format_err(format!("feature file: zero dimension in {d}x{h}x{w}"));
    }
    let per = d * h * w;
    let mut maps = Vec::with_capacity(n);
    for _ in 0..n {
        maps.push(FeatureMap::new(d, h, w, dec.f32s(per)?)?);
    }
    dec.finish()?;
    Ok(FeatureFile { d, h, w, maps })
}

pub fn encode_scores(m: &SimilarityMatrix) -> Result<Vec<u8>> {
    let mut out = header(
        SCORE_MAGIC,
        &[m.stage().tag(), dim(m.n_query(), "n_query")?, dim(m.n_gallery(), "n_gallery")?],
    );
    push_f32s(&mut out, m.scores());
    Ok(out)
}

pub fn decode_scores(bytes: &[u8]) -> Result<SimilarityMatrix> {
    let mut dec = Decoder::new(bytes, SCORE_MAGIC, "score file")?;
    let tag = dec.u32()?;
    let stage = Stage::from_tag(tag).ok_or_else(|| Error::Format(format!("score file: unknown stage tag {tag}")))?;
    let nq = dec.u32()? as usize;
    let ng = dec.u32()? as usize;
    let scores = dec.f32s(nq * ng)?;
    dec.finish()?;
    SimilarityMatrix::new(nq, ng, stage, scores)
}

pub fn encode_head(head: &HeadParams) -> Result<Vec<u8>> {
    head.validate()?;
    let mode = match head.mode {
        Mode::Train => 0,
        Mode::Eval => 1,
    };
    let mut out = header(HEAD_MAGIC, &[dim(head.n_features(), "n_features")?, mode]);
    push_f64s(&mut out, &[head.momentum]);
    for part in [&head.bn1.scale, &head.bn1.shift, &head.bn1.running_mean, &head.bn1.running_var, &head.fc_weight] {
        push_f64s(&mut out, part);
    }
    push_f64s(
        &mut out,
        &[head.fc_bias, head.bn2.scale[0], head.bn2.shift[0], head.bn2.running_mean[0], head.bn2.running_var[0]],
    );
    Ok(out)
}

pub fn decode_head(bytes: &[u8]) -> Result<HeadParams> {
    let mut dec = Decoder::new(bytes, HEAD_MAGIC, "head file")?;
    let n = dec.u32()? as usize;
    let mode = match dec.u32()? {
        0 => Mode::Train,
        1 => Mode::Eval,
        other => return format_err(format!("head file: unknown mode {other}")),
    };
    let momentum = dec.f64()?;
    let bn1 = BatchNorm { scale: dec.f64s(n)?, shift: dec.f64s(n)?, running_mean: dec.f64s(n)?, running_var: dec.f64s(n)? };
    let fc_weight = dec.f64s(n)?;
    let fc_bias = dec.f64()?;
    let bn2 = BatchNorm {
        scale: vec![dec.f64()?],
        shift: vec![dec.f64()?],
        running_mean: vec![dec.f64()?],
        running_var: vec![dec.f64()?],
    };
    dec.finish()?;
    let head = HeadParams { bn1, fc_weight, fc_bias, bn2, momentum, mode };
    head.validate().map_err(|e| Error::Format(format!("head file: {e}")))?;
    Ok(head)
}

pub fn encode_image(img: &ImageTensor) -> Result<Vec<u8>> {
    let mut out = header(
        IMAGE_MAGIC,
        &[dim(img.channels(), "channels")?, dim(img.height(), "height")?, dim(img.width(), "width")?],
    );
    push_f32s(&mut out, img.data());
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    let mut dec = Decoder::new(bytes, IMAGE_MAGIC, "image file")?;
    let [c, h, w] = [dec.u32()?, dec.u32()?, dec.u32()?].map(|x| x as usize);
    let data = dec.f32s(c * h * w)?;
    dec.finish()?;
    ImageTensor::new(c, h, w, data)
}

/// One `id,camera[,frame,fps]` line per record.
pub fn encode_meta(records: &[MetaRecord]) -> String {
    let mut out = String::new();
    for r in records {
        match r.frame {
            Some((frame, fps)) => out.push_str(&format!("{},{},{},{}\n", r.identity, r.camera, frame, fps)),
            None => out.push_str(&format!("{},{}\n", r.identity, r.camera)),
        }
    }
    out
}

/// Parses metadata lines; blank lines and `#` comments are skipped.
pub fn decode_meta(text: &str) -> Result<Vec<MetaRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("metadata line {}: {what}: {line:?}", lineno + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let int = |s: &str| s.parse::<i64>().map_err(|_| bad("expected an integer"));
        let rec = match fields.as_slice() {
            [id, cam] => MetaRecord::new(int(id)?, int(cam)?),
            [id, cam, frame, fps] => {
                let fps: f64 = fps.parse().map_err(|_| bad("expected a real fps"))?;
                MetaRecord::new(int(id)?, int(cam)?)
                    .with_frame(int(frame)?, fps)
                    .map_err(|e| bad(&e.to_string()))?
            }
            _ => return Err(bad("expected id,camera or id,camera,frame,fps")),
        };
        records.push(rec);
    }
    Ok(records)
}

pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    decode_features(&read_bytes(path)?)
}

pub fn write_features(path: impl AsRef<Path>, file: &FeatureFile) -> Result<()> {
    write_bytes(path, &encode_features(file)?)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<SimilarityMatrix> {
    decode_scores(&read_bytes(path)?)
}

pub fn write_scores(path: impl AsRef<Path>, m: &SimilarityMatrix) -> Result<()> {
    write_bytes(path, &encode_scores(m)?)
}

pub fn read_head(path: impl AsRef<Path>) -> Result<HeadParams> {
    decode_head(&read_bytes(path)?)
}

pub fn write_head(path: impl AsRef<Path>, head: &HeadParams) -> Result<()> {
    write_bytes(path, &encode_head(head)?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    decode_image(&read_bytes(path)?)
}

pub fn write_image(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    write_bytes(path, &encode_image(img)?)
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<Vec<MetaRecord>> {
    decode_meta(&std::fs::read_to_string(path)?)
}

pub fn write_meta(path: impl AsRef<Path>, records: &[MetaRecord]) -> Result<()> {
    write_bytes(path, encode_meta(records).as_bytes())
}
