//! Directory checkpoints.
//!
//! Layout:
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/<network>.<tensor>.f32     little-endian f32, one file per tensor
//! ```
//!
//! The manifest is line oriented:
//!
//! ```text
//! nnkit-checkpoint 1
//! step 5000
//! meta task drawer_place
//! network bc_actor 3f2a9c0d11e2b4a7
//! tensor bc_actor l0.weight 256x23 bc_actor.l0.weight.f32
//! scalar alpha_log 0xbf800000
//! ```
//!
//! Scalars are stored as raw bit patterns so round trips are exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::params::{ParamVector, TensorLayout};
use crate::{NnError, Result};

const MAGIC: &str = "nnkit-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParams {
    pub name: String,
    pub spec_hash: String,
    pub params: ParamVector,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: Vec<(String, String)>,
    pub networks: Vec<NamedParams>,
    pub scalars: Vec<(String, f32)>,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(NnError::Checkpoint(format!("{kind} {s:?} must be a non-empty token")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Option<&NamedParams> {
        self.networks.iter().find(|n| n.name == name)
    }

    pub fn scalar(&self, name: &str) -> Option<f32> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        manifest.push_str(&format!("step {}\n", self.step));
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            check_token("meta value", v)?;
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for net in &self.networks {
            check_token("network name", &net.name)?;
            check_token("spec hash", &net.spec_hash)?;
            manifest.push_str(&format!("network {} {}\n", net.name, net.spec_hash));
            for (i, t) in net.params.layout().iter().enumerate() {
                check_token("tensor name", &t.name)?;
                let shape = t
                    .shape
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x");
                let file = format!("{}.{}.f32", net.name, t.name);
                manifest.push_str(&format!("tensor {} {} {} {}\n", net.name, t.name, shape, file));
                let mut bytes = Vec::with_capacity(t.numel() * 4);
                for v in net.params.tensor(i) {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                fs::write(dir.join(&file), bytes)?;
            }
        }
        for (name, v) in &self.scalars {
            check_token("scalar name", name)?;
            manifest.push_str(&format!("scalar {name} {:#010x}\n", v.to_bits()));
        }
        let mut f = fs::File::create(dir.join("manifest.txt"))?;
        f.write_all(manifest.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt")).map_err(|e| {
            NnError::Checkpoint(format!("reading manifest in {}: {e}", dir.display()))
        })?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(NnError::Checkpoint("missing or unknown manifest header".into()));
        }
        let mut ckpt = Checkpoint::default();
        // (name, hash, layout, values)
        let mut pending: Vec<(String, String, Vec<TensorLayout>, Vec<f32>)> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let bad = |msg: &str| NnError::Checkpoint(format!("manifest line {}: {msg}", lineno + 2));
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [] => {}
                ["step", n] => ckpt.step = n.parse().map_err(|_| bad("bad step"))?,
                ["meta", k, v] => ckpt.meta.push((k.to_string(), v.to_string())),
                ["network", name, hash] => {
                    pending.push((name.to_string(), hash.to_string(), Vec::new(), Vec::new()))
                }
                ["tensor", net, name, shape, file] => {
                    let entry = pending
                        .iter_mut()
                        .find(|p| p.0 == *net)
                        .ok_or_else(|| bad("tensor before its network"))?;
                    let shape: Vec<usize> = shape
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad("bad shape")))
                        .collect::<Result<_>>()?;
                    let bytes = fs::read(dir.join(file))?;
                    let layout = TensorLayout::new(*name, shape);
                    if bytes.len() != layout.numel() * 4 {
                        return Err(bad(&format!("{file} has {} bytes", bytes.len())));
                    }
                    entry.3.extend(
                        bytes
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
                    );
                    entry.2.push(layout);
                }
                ["scalar", name, bits] => {
                    let hex = bits.trim_start_matches("0x");
                    let b = u32::from_str_radix(hex, 16).map_err(|_| bad("bad scalar bits"))?;
                    ckpt.scalars.push((name.to_string(), f32::from_bits(b)));
                }
                _ => return Err(bad("unrecognized record")),
            }
        }
        for (name, spec_hash, layout, values) in pending {
            ckpt.networks.push(NamedParams {
                name,
                spec_hash,
                params: ParamVector::new(layout, values)?,
            });
        }
        Ok(ckpt)
    }
}
