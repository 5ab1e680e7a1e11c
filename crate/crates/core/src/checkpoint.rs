//! Parameter container shared by every saved artifact: a UTF-8 header of
//! `key=value` metadata and `block` lines, a `data` marker line, then the
//! raw little-endian f64 contents of each block in header order.
//!
//! ```text
//! hybridvc-params 1
//! kind=backbone
//! version=0.1.0
//! block speaker.conv1.weight 1 240x64
//! ...
//! data
//! <binary>
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::encoders::SpeakerEncoder;
use crate::error::{Error, Result};
use crate::latent::Backbone;
use crate::nn::Parameters;

const MAGIC: &str = "hybridvc-params 1";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamFile {
    pub meta: BTreeMap<String, String>,
    pub blocks: Vec<StoredBlock>,
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::input(format!("{}: {msg}", path.display()))
}

impl ParamFile {
    pub fn new(kind: &str) -> Self {
        let mut f = ParamFile::default();
        f.set("kind", kind);
        f.set("version", env!("CARGO_PKG_VERSION"));
        f
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::input(format!("parameter file lacks `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::input(format!("parameter file field `{key}` has invalid value {v:?}")))
    }

    pub fn kind(&self) -> &str {
        self.meta.get("kind").map(String::as_str).unwrap_or("")
    }

    /// Appends every block of `params` under `prefix.`.
    pub fn put<P: Parameters>(&mut self, prefix: &str, params: &P, frozen: bool) {
        for b in params.blocks() {
            self.blocks.push(StoredBlock {
                name: format!("{prefix}.{}", b.name),
                shape: b.shape.clone(),
                frozen,
                data: b.data.to_vec(),
            });
        }
    }

    pub fn block(&self, name: &str) -> Option<&StoredBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Fills `params` from the blocks stored under `prefix.`, checking
    /// every name and shape.
    pub fn take<P: Parameters>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let wanted: Vec<(String, Vec<usize>)> = params
            .blocks()
            .iter()
            .map(|b| (format!("{prefix}.{}", b.name), b.shape.clone()))
            .collect();
        for ((name, shape), dst) in wanted.iter().zip(params.blocks_mut()) {
            let stored = self
                .block(name)
                .ok_or_else(|| Error::input(format!("parameter file lacks block {name}")))?;
            if &stored.shape != shape {
                return Err(Error::input(format!(
                    "block {name} has shape {:?}, expected {:?}",
                    stored.shape, shape
                )));
            }
            dst.copy_from_slice(&stored.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::from(MAGIC);
        head.push('\n');
        for (k, v) in &self.meta {
            head.push_str(&format!("{k}={v}\n"));
        }
        for b in &self.blocks {
            let shape: Vec<String> = b.shape.iter().map(usize::to_string).collect();
            head.push_str(&format!(
                "block {} {} {}\n",
                b.name,
                u8::from(b.frozen),
                shape.join("x")
            ));
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        for b in &self.blocks {
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| corrupt(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut next_line = || -> std::result::Result<&str, String> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or("truncated header")?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| "header is not UTF-8")?;
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err("not a hybridvc parameter file".into());
        }
        let mut file = ParamFile::default();
        loop {
            let line = next_line()?;
            if line == "data" {
                break;
            }
            if let Some(rest) = line.strip_prefix("block ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(format!("malformed block line {line:?}"));
                }
                let shape = parts[2]
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| format!("bad shape in {line:?}")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                file.blocks.push(StoredBlock {
                    name: parts[0].to_string(),
                    shape,
                    frozen: parts[1] == "1",
                    data: Vec::new(),
                });
            } else if let Some((k, v)) = line.split_once('=') {
                file.meta.insert(k.to_string(), v.to_string());
            } else {
                return Err(format!("malformed header line {line:?}"));
            }
        }
        let mut data = &bytes[pos..];
        for b in &mut file.blocks {
            let n: usize = b.shape.iter().product();
            if data.len() < 8 * n {
                return Err(format!("data truncated in block {}", b.name));
            }
            b.data = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            data = &data[8 * n..];
        }
        if !data.is_empty() {
            return Err(format!("{} trailing bytes after data", data.len()));
        }
        Ok(file)
    }
}

pub(crate) fn put_speaker(file: &mut ParamFile, enc: &SpeakerEncoder) {
    file.set("speaker_hidden", enc.hidden());
    file.put("speaker", enc, true);
}

pub(crate) fn take_speaker(file: &ParamFile) -> Result<SpeakerEncoder> {
    let hidden: usize = file.get_parsed("speaker_hidden")?;
    let mut enc = SpeakerEncoder::init(hidden, &mut crate::rng::stream(0, &[]));
    file.take("speaker", &mut enc)?;
    enc.trained = true;
    Ok(enc)
}

pub(crate) fn put_backbone(file: &mut ParamFile, bb: &Backbone) {
    file.set("backbone_hidden", bb.decoder.out.input_dim());
    file.put("backbone", bb, true);
}

pub(crate) fn take_backbone(file: &ParamFile) -> Result<Backbone> {
    let hidden: usize = file.get_parsed("backbone_hidden")?;
    let mut bb = Backbone::init(hidden, &mut crate::rng::stream(0, &[]));
    file.take("backbone", &mut bb)?;
    Ok(bb)
}

pub fn save_speaker(path: &Path, enc: &SpeakerEncoder, seed: u64) -> Result<()> {
    let mut f = ParamFile::new("speaker");
    f.set("seed", seed);
    put_speaker(&mut f, enc);
    f.write(path)
}

/// Loads the speaker encoder from a speaker, backbone or hybrid file.
pub fn load_speaker(path: &Path) -> Result<SpeakerEncoder> {
    take_speaker(&ParamFile::read(path)?)
}

pub fn save_backbone(path: &Path, speaker: &SpeakerEncoder, backbone: &Backbone, seed: u64) -> Result<()> {
    let mut f = ParamFile::new("backbone");
    f.set("seed", seed);
    put_speaker(&mut f, speaker);
    put_backbone(&mut f, backbone);
    f.write(path)
}

/// Loads the frozen speaker encoder and backbone from a backbone or hybrid
/// file.
pub fn load_backbone(path: &Path) -> Result<(SpeakerEncoder, Backbone)> {
    let f = ParamFile::read(path)?;
    if f.kind() == "speaker" {
        return Err(Error::State(format!("{} holds no pretrained backbone", path.display())));
    }
    Ok((take_speaker(&f)?, take_backbone(&f)?))
}
