//! Checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MIMC"  u32 version
//! u32 len + UTF-8 config block (key=value lines; `meta.` keys are free-form)
//! u64 training step
//! u8 has_adam  [f32 lr, beta1, beta2, epsilon; u64 adam step]
//! u32 entry count, then per entry:
//!     u32 len + name, u32 rank, u32 dims..., f32 data...
//! ```
//!
//! Parameter entries use their plain names; Adam moments are stored as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MIMC";
pub const CHECKPOINT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";
const META: &str = "meta.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub adam: Option<AdamState>,
    /// Number of training steps already taken.
    pub step: u64,
    /// Free-form `key=value` pairs (stored with a `meta.` prefix).
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Checkpoint {
            network,
            adam: None,
            step: 0,
            metadata: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.network.config
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);

    let mut block = ckpt.network.config.to_text();
    for (k, v) in &ckpt.metadata {
        if k.contains(['\n', '=']) || v.contains('\n') {
            return Err(Error::invalid(format!("metadata entry `{k}` cannot be stored")));
        }
        block.push_str(&format!("{META}{k}={v}\n"));
    }
    w.string(&block)?;
    w.u64(ckpt.step);

    match &ckpt.adam {
        Some(adam) => {
            w.u8(1);
            let c = adam.config;
            for v in [c.lr, c.beta1, c.beta2, c.epsilon] {
                w.f32(v);
            }
            w.u64(adam.step_count);
        }
        None => w.u8(0),
    }

    let params = &ckpt.network.params;
    let moments = ckpt
        .adam
        .as_ref()
        .map(|a| a.first_moment.len() + a.second_moment.len())
        .unwrap_or(0);
    w.len_u32(params.len() + moments)?;
    for (name, t) in params.iter() {
        w.named_tensor(name, t)?;
    }
    if let Some(adam) = &ckpt.adam {
        for (name, t) in adam.first_moment.iter() {
            w.named_tensor(&format!("{FIRST_MOMENT}{name}"), t)?;
        }
        for (name, t) in adam.second_moment.iter() {
            w.named_tensor(&format!("{SECOND_MOMENT}{name}"), t)?;
        }
    }
    w.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(format!(
            "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }

    let block = r.string("config block")?;
    let mut network_lines = String::new();
    let mut metadata = BTreeMap::new();
    for line in block.lines() {
        match line.strip_prefix(META).and_then(|l| l.split_once('=')) {
            Some((k, v)) => {
                metadata.insert(k.to_owned(), v.to_owned());
            }
            None => {
                network_lines.push_str(line);
                network_lines.push('\n');
            }
        }
    }
    let config = NetworkConfig::from_text(&network_lines).map_err(|e| r.error(format!("config block: {e}")))?;
    let step = r.u64("step")?;

    let adam_header = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let mut v = [0f32; 4];
            for x in &mut v {
                *x = r.f32("optimizer config")?;
            }
            let steps = r.u64("optimizer step")?;
            Some((
                AdamConfig {
                    lr: v[0],
                    beta1: v[1],
                    beta2: v[2],
                    epsilon: v[3],
                },
                steps,
            ))
        }
        other => return Err(r.error(format!("bad optimizer flag {other}"))),
    };

    let count = r.u32("entry count")? as usize;
    let mut params = ParamStore::new();
    let mut first = ParamStore::new();
    let mut second = ParamStore::new();
    for _ in 0..count {
        let (name, t) = r.named_tensor()?;
        let (store, key) = if let Some(n) = name.strip_prefix(FIRST_MOMENT) {
            (&mut first, n.to_owned())
        } else if let Some(n) = name.strip_prefix(SECOND_MOMENT) {
            (&mut second, n.to_owned())
        } else {
            (&mut params, name.clone())
        };
        if store.insert(key, t).is_some() {
            return Err(r.error(format!("duplicate entry `{name}`")));
        }
    }
    r.finish()?;

    let network = Network::from_parts(config, params).map_err(|e| r.error(e.to_string()))?;
    let adam = match adam_header {
        Some((config, step_count)) => {
            for store in [&first, &second] {
                let same = store.len() == network.params.len()
                    && network
                        .params
                        .iter()
                        .all(|(n, t)| store.get(n).map(|m| m.shape() == t.shape()).unwrap_or(false));
                if !same {
                    return Err(r.error("optimizer moments do not match the parameters"));
                }
            }
            Some(AdamState {
                config,
                step_count,
                first_moment: first,
                second_moment: second,
            })
        }
        None if first.is_empty() && second.is_empty() => None,
        None => return Err(r.error("optimizer moments present without optimizer header")),
    };

    Ok(Checkpoint {
        network,
        adam,
        step,
        metadata,
    })
}
