//! Synthetic backbone features, the stem that derives the extra top levels,
//! and the FPZ1 pyramid container.
//!
//! FPZ1 layout:
//!
//! ```text
//! b"FPZ1"  u32 LE header length  JSON header  f64 LE blobs, ascending level
//! ```
//!
//! The header is `{"format":"FPZ1","dtype":"f64le","levels":[{"level":l,"shape":[n,c,h,w]},..],"seed":s,"config":{..}|null}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::NeckConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ConvInit, ParamStore};
use crate::pyramid::{FeaturePyramid, Pyramid};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FPZ1";
pub const DTYPE: &str = "f64le";

/// Standard-normal features for the backbone levels of `cfg`.
///
/// Level `l` is drawn from stream `backbone.l{l}` of `cfg.seed`.
pub fn synth_backbone(cfg: &NeckConfig) -> Result<FeaturePyramid> {
    cfg.validate()?;
    Ok(cfg
        .backbone_levels()
        .map(|l| {
            let (h, w) = cfg.resolution(l);
            let shape = [cfg.batch, cfg.input_channels(l), h, w];
            let t = rng::normal(
                &mut rng::stream(cfg.seed, &format!("backbone.l{l}")),
                &shape,
                1.0,
            );
            (l, t)
        })
        .collect())
}

/// Registers stem convs `{prefix}.stem.c6`, `{prefix}.stem.c7`, ...
pub fn init_stem(store: &mut ParamStore, prefix: &str, cfg: &NeckConfig, init: ConvInit) {
    let mut cin = cfg
        .backbone_channels
        .last()
        .copied()
        .unwrap_or(cfg.channels);
    for l in cfg.stem_levels() {
        store.conv(&format!("{prefix}.stem.c{l}"), cin, cfg.channels, 3, init);
        cin = cfg.channels;
    }
}

/// Adds the stem levels to `c` on `tape`, in scope `stem` under the current one.
///
/// The first new level convolves the top backbone level; later ones
/// convolve the ReLU of the level below.
pub fn stem_on_tape(
    tape: &mut Tape,
    params: &Bound,
    cfg: &NeckConfig,
    c: &mut Pyramid<Var>,
) -> Result<()> {
    let levels = cfg.stem_levels();
    if levels.is_empty() {
        return Ok(());
    }
    let first = *levels.start();
    if let Some(l) = levels.clone().find(|&l| c.contains(l)) {
        return Err(Error::InvalidArgument(format!(
            "stem: level {l} already present"
        )));
    }
    if c.highest() != Some(first - 1) {
        return Err(Error::MissingLevel(first - 1));
    }
    tape.scoped("stem", |t| {
        for l in levels {
            let mut x = *c.get(l - 1)?;
            if l > first {
                x = t.relu(x)?;
            }
            let y = params.conv(t, &format!("c{l}"), x, 2, 1)?;
            c.insert(l, y);
        }
        Ok(())
    })
}

/// Value-level stem: returns `c` with the stem levels appended.
pub fn extend_stem(
    c: &FeaturePyramid,
    store: &ParamStore,
    prefix: &str,
    cfg: &NeckConfig,
) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let params = store.bind_constant(&mut tape);
    let mut vars = c.record_constant(&mut tape);
    tape.scoped(prefix, |t| stem_on_tape(t, &params, cfg, &mut vars))?;
    let out = vars.values(&tape);
    out.validate()?;
    Ok(out)
}

#[derive(Debug, thiserror::Error)]
pub enum FpzError {
    #[error("fpz: {0}")]
    Io(#[from] std::io::Error),
    #[error("fpz: bad magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("fpz: malformed header: {0}")]
    MalformedHeader(String),
    #[error("fpz: shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("fpz: blob length mismatch: expected {expected} bytes, found {actual}")]
    BlobLength { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub level: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpzHeader {
    pub format: String,
    pub dtype: String,
    pub levels: Vec<LevelEntry>,
    pub seed: Option<u64>,
    pub config: Option<NeckConfig>,
}

impl FpzHeader {
    pub fn for_pyramid(pyr: &FeaturePyramid, cfg: Option<&NeckConfig>) -> Self {
        Self {
            format: "FPZ1".into(),
            dtype: DTYPE.into(),
            levels: pyr
                .iter()
                .map(|(level, t)| LevelEntry {
                    level,
                    shape: t.shape().to_vec(),
                })
                .collect(),
            seed: cfg.map(|c| c.seed),
            config: cfg.cloned(),
        }
    }
}

pub fn encode(pyr: &FeaturePyramid, cfg: Option<&NeckConfig>) -> Vec<u8> {
    let header = serde_json::to_vec(&FpzHeader::for_pyramid(pyr, cfg)).expect("header serializes");
    let mut out = Vec::with_capacity(
        8 + header.len() + 8 * pyr.iter().map(|(_, t)| t.numel()).sum::<usize>(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in pyr.iter() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(FpzHeader, FeaturePyramid), FpzError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FpzError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    let len_bytes: [u8; 4] = bytes
        .get(4..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| FpzError::MalformedHeader("missing header length".into()))?;
    let hlen = u32::from_le_bytes(len_bytes) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| FpzError::MalformedHeader(format!("header length {hlen} exceeds file")))?;
    let header: FpzHeader =
        serde_json::from_slice(body).map_err(|e| FpzError::MalformedHeader(e.to_string()))?;
    if header.format != "FPZ1" || header.dtype != DTYPE {
        return Err(FpzError::MalformedHeader(format!(
            "format {:?} dtype {:?}",
            header.format, header.dtype
        )));
    }
    let mut prev = None;
    for e in &header.levels {
        if prev.is_some_and(|p| e.level <= p) {
            return Err(FpzError::MalformedHeader("levels not ascending".into()));
        }
        prev = Some(e.level);
        if e.shape.len() != 4 || e.shape.contains(&0) {
            return Err(FpzError::ShapeMismatch(format!(
                "level {}: shape {:?}",
                e.level, e.shape
            )));
        }
    }
    // Check the declared shapes before touching blobs so wrong extents are
    // reported as such even when the byte count happens to line up.
    let probe: FeaturePyramid = header
        .levels
        .iter()
        .map(|e| {
            (
                e.level,
                Tensor::zeros(&[e.shape[0], 1, e.shape[2], e.shape[3]]),
            )
        })
        .collect();
    probe
        .validate()
        .map_err(|e| FpzError::ShapeMismatch(e.to_string()))?;
    if let Some(cfg) = &header.config {
        for e in &header.levels {
            let fits = cfg.levels().contains(&e.level) && {
                let (h, w) = cfg.resolution(e.level);
                [e.shape[0], e.shape[2], e.shape[3]] == [cfg.batch, h, w]
            };
            if !fits {
                return Err(FpzError::ShapeMismatch(format!(
                    "level {}: shape {:?} disagrees with config",
                    e.level, e.shape
                )));
            }
        }
    }

    let blobs = &bytes[8 + hlen..];
    let expected: usize = header
        .levels
        .iter()
        .map(|e| 8 * e.shape.iter().product::<usize>())
        .sum();
    if blobs.len() != expected {
        return Err(FpzError::BlobLength {
            expected,
            actual: blobs.len(),
        });
    }
    let mut pyr = FeaturePyramid::new();
    let mut off = 0;
    for e in &header.levels {
        let n: usize = e.shape.iter().product();
        let data = blobs[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        off += 8 * n;
        let t = Tensor::new(&e.shape, data).map_err(|e| FpzError::ShapeMismatch(e.to_string()))?;
        pyr.insert(e.level, t);
    }
    Ok((header, pyr))
}

pub fn save_pyramid(
    path: &Path,
    pyr: &FeaturePyramid,
    cfg: Option<&NeckConfig>,
) -> std::result::Result<(), FpzError> {
    std::fs::write(path, encode(pyr, cfg))?;
    Ok(())
}

pub fn load_pyramid(path: &Path) -> std::result::Result<FeaturePyramid, FpzError> {
    read_fpz(path).map(|(_, p)| p)
}

pub fn read_fpz(path: &Path) -> std::result::Result<(FpzHeader, FeaturePyramid), FpzError> {
    decode(&std::fs::read(path)?)
}
