use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{Encoder, EncoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::head::{HeadWeights, NliModel};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"KDNLICKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Encoder,
    Head,
    Composed,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Encoder => 0,
            ModelKind::Head => 1,
            ModelKind::Composed => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(ModelKind::Encoder),
            1 => Ok(ModelKind::Head),
            2 => Ok(ModelKind::Composed),
            _ => Err(Error::Format(format!("unknown model kind tag {t}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Encoder => "encoder",
            ModelKind::Head => "head",
            ModelKind::Composed => "composed",
        }
    }
}

/// Float width of stored tensor values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Storage {
    #[default]
    F32,
    /// Full precision, for bit-exact round trips of f64 models.
    F64,
}

impl Storage {
    fn width(self) -> u8 {
        match self {
            Storage::F32 => 4,
            Storage::F64 => 8,
        }
    }
}

/// Saved model: kind tag, producing seed, key=value config echo, the
/// vocabulary (encoders only) and the named tensor table.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub vocab: Option<Vocabulary>,
    pub tensors: Vec<(String, Tensor)>,
}

fn tensors_of(set: &ParamSet) -> Vec<(String, Tensor)> {
    set.iter()
        .map(|(n, t)| (n.to_string(), t.detached()))
        .collect()
}

fn encoder_config_echo(c: &EncoderConfig, out: &mut BTreeMap<String, String>) {
    for (k, v) in [
        ("embed_dim", c.embed_dim),
        ("num_layers", c.num_layers),
        ("num_heads", c.num_heads),
        ("ffn_dim", c.ffn_dim),
        ("max_tokens_length", c.max_tokens_length),
        ("max_sentence_length", c.max_sentence_length),
    ] {
        out.insert(k.to_string(), v.to_string());
    }
}

fn head_config_echo(h: &HeadWeights, out: &mut BTreeMap<String, String>) {
    let dims: Vec<String> = h.dims().iter().map(usize::to_string).collect();
    out.insert("head_dims".into(), dims.join(","));
}

impl Checkpoint {
    pub fn from_encoder(e: &Encoder, seed: u64) -> Self {
        let mut config = BTreeMap::new();
        encoder_config_echo(e.config(), &mut config);
        Self {
            kind: ModelKind::Encoder,
            seed,
            config,
            vocab: Some(e.vocab().clone()),
            tensors: tensors_of(e.params()),
        }
    }

    pub fn from_head(h: &HeadWeights, seed: u64) -> Self {
        let mut config = BTreeMap::new();
        head_config_echo(h, &mut config);
        Self {
            kind: ModelKind::Head,
            seed,
            config,
            vocab: None,
            tensors: tensors_of(h.params()),
        }
    }

    pub fn from_model(m: &NliModel, seed: u64) -> Self {
        let mut ckpt = Self::from_encoder(m.encoder(), seed);
        ckpt.kind = ModelKind::Composed;
        head_config_echo(m.head(), &mut ckpt.config);
        ckpt.tensors.extend(tensors_of(m.head().params()));
        ckpt
    }

    /// Extra key=value pairs recorded alongside the model settings.
    pub fn with_note(mut self, key: &str, value: impl ToString) -> Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    fn usize_key(&self, key: &str) -> Result<usize> {
        self.config
            .get(key)
            .ok_or_else(|| Error::Format(format!("config echo lacks {key}")))?
            .parse()
            .map_err(|e| Error::Format(format!("config echo {key}: {e}")))
    }

    fn encoder_config(&self) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            embed_dim: self.usize_key("embed_dim")?,
            num_layers: self.usize_key("num_layers")?,
            num_heads: self.usize_key("num_heads")?,
            ffn_dim: self.usize_key("ffn_dim")?,
            max_tokens_length: self.usize_key("max_tokens_length")?,
            max_sentence_length: self.usize_key("max_sentence_length")?,
        })
    }

    fn head_dims(&self) -> Result<Vec<usize>> {
        let raw = self
            .config
            .get("head_dims")
            .ok_or_else(|| Error::Format("config echo lacks head_dims".into()))?;
        raw.split(',')
            .map(|d| {
                d.parse()
                    .map_err(|e| Error::Format(format!("head_dims: {e}")))
            })
            .collect()
    }

    fn param_set(&self, slot: usize, keep: impl Fn(&str) -> bool) -> ParamSet {
        let mut set = ParamSet::new(slot);
        for (name, t) in self.tensors.iter().filter(|(n, _)| keep(n)) {
            set.add(name.clone(), t.clone());
        }
        set
    }

    fn build_encoder(&self) -> Result<Encoder> {
        let vocab = self
            .vocab
            .clone()
            .ok_or_else(|| Error::Format("checkpoint has no vocabulary".into()))?;
        let mut enc = Encoder::new(self.encoder_config()?, vocab, 0)?;
        enc.load_params(&self.param_set(0, |n| !n.starts_with("head.")))?;
        Ok(enc)
    }

    fn build_head(&self) -> Result<HeadWeights> {
        let mut head = HeadWeights::zeros(&self.head_dims()?)?;
        head.load_params(&self.param_set(1, |n| n.starts_with("head.")))?;
        Ok(head)
    }

    /// The encoder of an encoder or composed checkpoint.
    pub fn to_encoder(&self) -> Result<Encoder> {
        match self.kind {
            ModelKind::Head => Err(Error::Format("head checkpoint has no encoder".into())),
            _ => self.build_encoder(),
        }
    }

    /// The head of a head or composed checkpoint.
    pub fn to_head(&self) -> Result<HeadWeights> {
        match self.kind {
            ModelKind::Encoder => Err(Error::Format("encoder checkpoint has no head".into())),
            _ => self.build_head(),
        }
    }

    pub fn to_model(&self) -> Result<NliModel> {
        if self.kind != ModelKind::Composed {
            return Err(Error::Format(format!(
                "expected a composed checkpoint, found {}",
                self.kind.as_str()
            )));
        }
        NliModel::new(self.build_encoder()?, self.build_head()?)
    }

    pub fn to_bytes(&self, storage: Storage) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.push(storage.width());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let echo: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_blob(&mut out, echo.as_bytes());
        put_blob(
            &mut out,
            self.vocab
                .as_ref()
                .map(Vocabulary::to_text)
                .unwrap_or_default()
                .as_bytes(),
        );
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_blob(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                match storage {
                    Storage::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Storage::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r
            .take(8)
            .map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r
            .u32()
            .map_err(|_| Error::Format("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let head = r
            .take(2)
            .map_err(|_| Error::Format("truncated header".into()))?;
        let kind = ModelKind::from_tag(head[0])?;
        let width = head[1];
        if width != 4 && width != 8 {
            return Err(Error::Format(format!("unsupported float width {width}")));
        }
        let seed = r
            .u64()
            .map_err(|_| Error::Format("truncated header".into()))?;
        let echo = r
            .string()
            .map_err(|_| Error::Format("truncated config echo".into()))?;
        let mut config = BTreeMap::new();
        for line in echo.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config echo line {line:?}")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let vocab_text = r
            .string()
            .map_err(|_| Error::Format("truncated vocabulary".into()))?;
        let vocab = match kind {
            ModelKind::Head => None,
            _ => Some(Vocabulary::from_text(&vocab_text)?),
        };
        let count = r
            .u32()
            .map_err(|_| Error::Format("missing tensor count".into()))?;
        let mut tensors = Vec::with_capacity(count as usize);
        for i in 0..count {
            let name = r.string().map_err(|_| Error::Integrity {
                tensor: format!("#{i}"),
                message: "truncated tensor name".into(),
            })?;
            let integrity = |message: &str| Error::Integrity {
                tensor: name.clone(),
                message: message.into(),
            };
            let rank = r.u32().map_err(|_| integrity("truncated rank"))?;
            if rank > 8 {
                return Err(integrity("implausible rank"));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(r.u64().map_err(|_| integrity("truncated dims"))? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| integrity("dims overflow"))?;
            let raw = r
                .take(
                    numel
                        .checked_mul(width as usize)
                        .ok_or_else(|| integrity("dims overflow"))?,
                )
                .map_err(|_| integrity("truncated values"))?;
            let data: Vec<f64> = if width == 4 {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            } else {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(integrity("non-finite value"));
            }
            tensors.push((name.clone(), Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            kind,
            seed,
            config,
            vocab,
            tensors,
        })
    }
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob);
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ()> {
        let end = self.pos.checked_add(n).ok_or(())?;
        let s = self.bytes.get(self.pos..end).ok_or(())?;
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, ()> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, ()> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> std::result::Result<String, ()> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ())
    }
}

/// Writes `bytes` next to `path` and renames over it, so readers never see
/// a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>, storage: Storage) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.to_bytes(storage))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Hex SHA-256 of a checkpoint file's bytes.
pub fn checkpoint_id(path: impl AsRef<Path>) -> Result<String> {
    Ok(bytes_id(&fs::read(path)?))
}

pub fn bytes_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
