//! On-disk formats: feature files, manifests and checkpoints.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::config::{lm_entries, model_entries, parse_pairs, set_lm, set_model};
use crate::encoder::AudioFeatures;
use crate::error::{Error, Result};
use crate::model::{AsrModel, LanguageModel, ModelConfig};
use crate::params::ParamStore;
use crate::training::{Adam, LmTrainConfig};
use crate::vocab::BLANK;

const FEATURE_MAGIC: &[u8; 4] = b"PAF1";
const FEATURE_HEADER: usize = 16;

/// Writes via a sibling temporary file so readers never see partial data.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// `[frames × dim]` features as little-endian f64 after a 16-byte header
/// `{magic, frames: u64, dim: u32}`.
pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    let (t, d) = match frames.shape() {
        &[t, d] => (t, d),
        s => {
            return Err(Error::InvalidInput {
                what: "features",
                reason: format!("expected a matrix, got shape {s:?}"),
            })
        }
    };
    let mut bytes = Vec::with_capacity(FEATURE_HEADER + 8 * t * d);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&(t as u64).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    for v in frames.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

fn parse_feature_header(path: &Path, head: &[u8]) -> Result<(usize, usize)> {
    if head.len() < FEATURE_HEADER {
        return Err(corrupt(path, "truncated feature header"));
    }
    if &head[..4] != FEATURE_MAGIC {
        return Err(corrupt(path, "not a feature file"));
    }
    let t = u64::from_le_bytes(head[4..12].try_into().expect("8 bytes")) as usize;
    let d = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as usize;
    Ok((t, d))
}

/// `(frames, dim)` from the header alone.
pub fn read_feature_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut head = Vec::with_capacity(FEATURE_HEADER);
    fs::File::open(path)?
        .take(FEATURE_HEADER as u64)
        .read_to_end(&mut head)?;
    parse_feature_header(path, &head)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (t, d) = parse_feature_header(path, &bytes)?;
    let body = &bytes[FEATURE_HEADER..];
    if body.len() != 8 * t * d {
        return Err(corrupt(
            path,
            format!("header promises {t}×{d} values, file holds {} bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(vec![t, d], data)
}

// Manifests.

pub const MANIFEST_HEADER: &str = "#utt_id\tfeature_path\tframes\ttranscript";

/// One manifest line. Paired records have features; text-only records have
/// neither features nor a frame count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub utt_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub features: Option<PathBuf>,
    pub frames: Option<usize>,
    pub transcript: Option<String>,
}

impl ManifestRecord {
    pub fn paired(utt_id: impl Into<String>, features: PathBuf, frames: usize, transcript: Option<String>) -> Self {
        Self {
            utt_id: utt_id.into(),
            features: Some(features),
            frames: Some(frames),
            transcript,
        }
    }

    pub fn text_only(utt_id: impl Into<String>, transcript: impl Into<String>) -> Self {
        Self {
            utt_id: utt_id.into(),
            features: None,
            frames: None,
            transcript: Some(transcript.into()),
        }
    }

    pub fn is_paired(&self) -> bool {
        self.features.is_some()
    }
}

/// Tab-separated records under [`MANIFEST_HEADER`]. `-` marks a missing
/// feature path or frame count; an empty transcript field means none.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    dir: PathBuf,
}

impl Manifest {
    pub fn new(dir: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Self {
            records,
            dir: dir.into(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn feature_path(&self, record: &ManifestRecord) -> Option<PathBuf> {
        record.features.as_ref().map(|p| self.dir.join(p))
    }

    /// Parses and checks referential integrity: unique ids, existing feature
    /// files whose headers agree with the listed frame counts.
    pub fn load(path: &Path) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::Manifest {
            path: path.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        };
        let text = fs::read_to_string(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            _ => return Err(bad(1, "missing header".into())),
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, feat, frames, transcript] = cols[..] else {
                return Err(bad(n, format!("expected 4 columns, found {}", cols.len())));
            };
            if id.is_empty() {
                return Err(bad(n, "empty utt_id".into()));
            }
            if !seen.insert(id.to_string()) {
                return Err(bad(n, format!("duplicate utt_id `{id}`")));
            }
            let transcript = (!transcript.is_empty()).then(|| transcript.to_string());
            let record = match (feat, frames) {
                ("-", "-") => {
                    if transcript.is_none() {
                        return Err(bad(n, format!("text-only record `{id}` has no transcript")));
                    }
                    ManifestRecord {
                        utt_id: id.into(),
                        features: None,
                        frames: None,
                        transcript,
                    }
                }
                ("-", _) | (_, "-") => {
                    return Err(bad(n, format!("`{id}` needs both a feature path and a frame count")));
                }
                (feat, frames) => {
                    let frames: usize = frames
                        .parse()
                        .map_err(|_| bad(n, format!("frame count `{frames}` is not a number")))?;
                    let full = dir.join(feat);
                    if !full.is_file() {
                        return Err(bad(n, format!("feature file {} does not exist", full.display())));
                    }
                    let (t, _) = read_feature_header(&full)?;
                    if t != frames {
                        return Err(bad(n, format!("`{id}` lists {frames} frames, file has {t}")));
                    }
                    ManifestRecord::paired(id, PathBuf::from(feat), frames, transcript)
                }
            };
            records.push(record);
        }
        Ok(Self { records, dir })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let feat = r
                .features
                .as_ref()
                .map_or_else(|| "-".to_string(), |p| p.display().to_string());
            let frames = r.frames.map_or_else(|| "-".to_string(), |t| t.to_string());
            let text = r.transcript.as_deref().unwrap_or("");
            out.push_str(&format!("{}\t{feat}\t{frames}\t{text}\n", r.utt_id));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for r in &self.records {
            let fields = [Some(r.utt_id.as_str()), r.transcript.as_deref()];
            if fields.iter().flatten().any(|f| f.contains(['\t', '\n'])) {
                return Err(Error::InvalidInput {
                    what: "manifest record",
                    reason: format!("`{}` contains a tab or newline", r.utt_id),
                });
            }
        }
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn paired(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.is_paired())
    }

    pub fn load_features(&self, record: &ManifestRecord) -> Result<AudioFeatures> {
        let path = self.feature_path(record).ok_or_else(|| Error::InvalidInput {
            what: "manifest record",
            reason: format!("`{}` has no features", record.utt_id),
        })?;
        AudioFeatures::new(record.utt_id.clone(), read_features(&path)?)
    }
}

// Checkpoints.

const CHECKPOINT_MAGIC: &[u8; 8] = b"PASRCKPT";
const CHECKPOINT_END: &[u8; 4] = b"END!";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Asr,
    Lm,
}

impl ModelKind {
    fn as_str(self) -> &'static str {
        match self {
            ModelKind::Asr => "asr",
            ModelKind::Lm => "lm",
        }
    }
}

/// Run facts stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub alphabet: String,
    pub seed: u64,
    pub step: u64,
}

/// A decoded checkpoint file before it is bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub meta: CheckpointMeta,
    /// Architecture entries in `key = value` form.
    pub config: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<Adam>,
}

fn encode_alphabet(a: &str) -> String {
    a.chars()
        .map(|c| (c as u32).to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn decode_alphabet(s: &str) -> Option<String> {
    if s.is_empty() {
        return Some(String::new());
    }
    s.split(',')
        .map(|n| n.parse::<u32>().ok().and_then(char::from_u32))
        .collect()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    fn from_store(
        kind: ModelKind,
        meta: &CheckpointMeta,
        config: Vec<(&'static str, String)>,
        store: &ParamStore,
        optimizer: Option<&Adam>,
    ) -> Self {
        Self {
            kind,
            meta: meta.clone(),
            config: config.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!(
            "kind = {}\nblank_index = {BLANK}\nalphabet = {}\nseed = {}\nstep = {}\n",
            self.kind.as_str(),
            encode_alphabet(&self.meta.alphabet),
            self.meta.seed,
            self.meta.step
        );
        for (k, v) in &self.config {
            header.push_str(&format!("{k} = {v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                put_u64(&mut out, adam.step);
                put_f64s(&mut out, &[adam.beta1, adam.beta2, adam.eps]);
                for (m, v) in adam.m.iter().zip(&adam.v) {
                    put_f64s(&mut out, m);
                    put_f64s(&mut out, v);
                }
            }
        }
        out.extend_from_slice(CHECKPOINT_END);
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { path, bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(corrupt(path, "not a checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| corrupt(path, "header is not UTF-8"))?;
        let pairs = parse_pairs(header).map_err(|e| corrupt(path, e.to_string()))?;
        let field = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(_, k, _)| k == key)
                .map(|(_, _, v)| v.as_str())
                .ok_or_else(|| corrupt(path, format!("header lacks `{key}`")))
        };
        let kind = match field("kind")? {
            "asr" => ModelKind::Asr,
            "lm" => ModelKind::Lm,
            k => return Err(corrupt(path, format!("unknown model kind `{k}`"))),
        };
        if field("blank_index")? != BLANK.to_string() {
            return Err(corrupt(path, "unexpected blank index"));
        }
        let number = |key: &str| -> Result<u64> {
            field(key)?
                .parse()
                .map_err(|_| corrupt(path, format!("`{key}` is not a number")))
        };
        let meta = CheckpointMeta {
            alphabet: decode_alphabet(field("alphabet")?).ok_or_else(|| corrupt(path, "bad alphabet"))?,
            seed: number("seed")?,
            step: number("step")?,
        };
        let config = pairs
            .into_iter()
            .filter(|(_, k, _)| k.starts_with("model.") || k.starts_with("lm."))
            .map(|(_, k, v)| (k, v))
            .collect();

        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params.min(1 << 16));
        for _ in 0..n_params {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| corrupt(path, "parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(path, "parameter size overflows"))?;
            let data = r.f64s(count)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let betas = r.f64s(3)?;
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for (_, t) in &params {
                    m.push(r.f64s(t.data().len())?);
                    v.push(r.f64s(t.data().len())?);
                }
                Some(Adam {
                    beta1: betas[0],
                    beta2: betas[1],
                    eps: betas[2],
                    step,
                    m,
                    v,
                })
            }
            f => return Err(corrupt(path, format!("bad optimizer flag {f}"))),
        };
        if r.take(4)? != CHECKPOINT_END {
            return Err(corrupt(path, "missing end marker"));
        }
        if r.pos != bytes.len() {
            return Err(corrupt(path, "trailing bytes after end marker"));
        }
        Ok(Self {
            kind,
            meta,
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &fs::read(path)?)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::InvalidInput {
                what: "checkpoint",
                reason: format!("holds a `{}` model, expected `{}`", self.kind.as_str(), kind.as_str()),
            })
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (k, v) in &self.config {
            set_model(&mut cfg, k, v)?;
        }
        Ok(cfg)
    }

    pub fn lm_config(&self) -> Result<LmTrainConfig> {
        let mut cfg = LmTrainConfig::default();
        for (k, v) in &self.config {
            set_lm(&mut cfg, k, v)?;
        }
        Ok(cfg)
    }

    /// Copies every parameter of `store` from the checkpoint, checking names
    /// and shapes against the receiving model.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let (_, t) = self
                .params
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            let expected = store.get(id).shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(Error::ParamShape {
                    name,
                    expected,
                    found: t.shape().to_vec(),
                });
            }
            store.set_values(id, t.data())?;
        }
        Ok(())
    }

    fn restore_optimizer(&self, store: &ParamStore) -> Result<Option<Adam>> {
        // parameter order of the file may differ from the store's
        let Some(adam) = &self.optimizer else {
            return Ok(None);
        };
        let mut out = Adam::new(store, adam.beta1, adam.beta2, adam.eps);
        out.step = adam.step;
        for id in store.ids() {
            let i = self
                .params
                .iter()
                .position(|(n, _)| n == store.name(id))
                .ok_or_else(|| Error::MissingParam(store.name(id).to_string()))?;
            out.m[id.index()] = adam.m[i].clone();
            out.v[id.index()] = adam.v[i].clone();
        }
        Ok(Some(out))
    }
}

struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(self.path, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt(self.path, "truncated"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_asr(path: &Path, model: &AsrModel, meta: &CheckpointMeta, optimizer: Option<&Adam>) -> Result<()> {
    Checkpoint::from_store(ModelKind::Asr, meta, model_entries(&model.config, true), &model.store, optimizer).save(path)
}

/// Rebuilds the model from the stored configuration.
pub fn load_asr(path: &Path) -> Result<(AsrModel, CheckpointMeta, Option<Adam>)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(ModelKind::Asr)?;
    let config = ckpt.model_config()?;
    bind_asr(&ckpt, config)
}

/// Loads into a model built from `config`; parameters whose shapes differ
/// are reported by name.
pub fn load_asr_with_config(path: &Path, config: &ModelConfig) -> Result<(AsrModel, CheckpointMeta, Option<Adam>)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(ModelKind::Asr)?;
    bind_asr(&ckpt, config.clone())
}

fn bind_asr(ckpt: &Checkpoint, config: ModelConfig) -> Result<(AsrModel, CheckpointMeta, Option<Adam>)> {
    let mut model = AsrModel::new(config, 0)?;
    ckpt.restore_into(&mut model.store)?;
    let adam = ckpt.restore_optimizer(&model.store)?;
    Ok((model, ckpt.meta.clone(), adam))
}

pub fn save_lm(path: &Path, lm: &LanguageModel, meta: &CheckpointMeta) -> Result<()> {
    let cfg = LmTrainConfig {
        lm: lm.config.clone(),
        ..LmTrainConfig::default()
    };
    let arch = lm_entries(&cfg, true)
        .into_iter()
        .filter(|(k, _)| matches!(*k, "lm.vocab_size" | "lm.model_dim" | "lm.heads" | "lm.ff_dim" | "lm.blocks"))
        .collect();
    Checkpoint::from_store(ModelKind::Lm, meta, arch, &lm.store, None).save(path)
}

pub fn load_lm(path: &Path) -> Result<(LanguageModel, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(ModelKind::Lm)?;
    let mut lm = LanguageModel::new(ckpt.lm_config()?.lm, 0)?;
    ckpt.restore_into(&mut lm.store)?;
    Ok((lm, ckpt.meta))
}
