//! Checkpoint files.
//!
//! A checkpoint is a UTF-8 header followed by a binary blob of tensors:
//!
//! ```text
//! MSSNET-CHECKPOINT 1
//! [network]
//! num_stacks=2
//! ...
//! [state]                      (optional: training progress)
//! epoch=12
//! adam_step=750
//! [tensors]
//! stem.conv0.weight<TAB>32,3,3,3<TAB>0<TAB>3480
//! ...
//! [end]
//! <tensor blob>
//! ```
//!
//! Each manifest row gives the tensor name, shape, byte offset into the blob
//! and byte length. Tensors are stored in the MSST tensor format. Adam moments
//! of a training state are stored as `adam.m.<param>` / `adam.v.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Network, NetworkConfig, Param};
use crate::tensor::{Scalar, Tensor};
use crate::train::AdamState;

const MAGIC_LINE: &str = "MSSNET-CHECKPOINT 1";

/// Optimiser progress stored alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Scalar> {
    /// Number of completed epochs.
    pub epoch: usize,
    pub adam: AdamState<T>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub network: Network<T>,
    pub state: Option<TrainState<T>>,
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Serialises a network (and optional training state) to bytes.
pub fn to_bytes<T: Scalar>(network: &Network<T>, state: Option<&TrainState<T>>) -> Vec<u8> {
    let mut named: Vec<(String, &Tensor<T>)> = network.params().iter().map(|p| (p.name.clone(), &p.value)).collect();
    if let Some(s) = state {
        for (p, (m, v)) in network.params().iter().zip(s.adam.m.iter().zip(&s.adam.v)) {
            named.push((format!("adam.m.{}", p.name), m));
            named.push((format!("adam.v.{}", p.name), v));
        }
    }

    let mut header = format!("{MAGIC_LINE}\n[network]\n{}", network.config().to_kv());
    if let Some(s) = state {
        header += &format!("[state]\nepoch={}\nadam_step={}\n", s.epoch, s.adam.step);
    }
    header += "[tensors]\n";
    let mut blob = Vec::new();
    for (name, t) in &named {
        let bytes = t.encode();
        header += &format!("{name}\t{}\t{}\t{}\n", shape_str(t.shape()), blob.len(), bytes.len());
        blob.extend_from_slice(&bytes);
    }
    header += "[end]\n";
    let mut out = header.into_bytes();
    out.extend_from_slice(&blob);
    out
}

pub fn save<T: Scalar>(path: &Path, network: &Network<T>, state: Option<&TrainState<T>>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so an interrupted save never clobbers a good file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(network, state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Parses checkpoint bytes. `origin` only labels error messages.
pub fn from_bytes<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<Checkpoint<T>> {
    let err = |line: Option<usize>, msg: String| Error::parse(origin, line, msg);
    let end_marker = b"\n[end]\n";
    let header_end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| err(None, "missing [end] marker".into()))?
        + end_marker.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| err(None, "header is not UTF-8".into()))?;
    let blob = &bytes[header_end..];

    let mut lines = header.lines().enumerate();
    match lines.next() {
        Some((_, MAGIC_LINE)) => {}
        _ => return Err(err(Some(1), format!("expected {MAGIC_LINE:?}"))),
    }
    let mut section = "";
    let mut net_kv = BTreeMap::new();
    let mut state_kv = BTreeMap::new();
    let mut entries = Vec::new();
    for (i, line) in lines {
        let ln = Some(i + 1);
        if line.starts_with('[') {
            section = match line {
                "[network]" | "[state]" | "[tensors]" | "[end]" => line,
                _ => return Err(err(ln, format!("unknown section {line}"))),
            };
            continue;
        }
        match section {
            "[network]" | "[state]" => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| err(ln, format!("expected key=value, got {line:?}")))?;
                let map = if section == "[network]" { &mut net_kv } else { &mut state_kv };
                map.insert(k.to_string(), v.to_string());
            }
            "[tensors]" => {
                let cols: Vec<&str> = line.split('\t').collect();
                let [name, shape, offset, len] = cols[..] else {
                    return Err(err(ln, "manifest rows need name, shape, offset, length".into()));
                };
                let num = |s: &str| s.parse::<usize>().map_err(|_| err(ln, format!("bad number {s:?}")));
                let shape = if shape.is_empty() {
                    Vec::new()
                } else {
                    shape.split(',').map(num).collect::<Result<_>>()?
                };
                entries.push(Entry {
                    name: name.to_string(),
                    shape,
                    offset: num(offset)?,
                    len: num(len)?,
                });
            }
            _ => return Err(err(ln, format!("unexpected line {line:?}"))),
        }
    }

    let config = NetworkConfig::from_kv(&net_kv).map_err(|e| err(None, e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for e in &entries {
        let chunk = blob
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| err(None, format!("tensor {} lies outside the blob", e.name)))?;
        let t: Tensor<T> = Tensor::read_from(&mut Cursor::new(chunk)).map_err(|x| err(None, format!("{}: {x}", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(err(None, format!("tensor {}: manifest shape {:?} vs stored {:?}", e.name, e.shape, t.shape())));
        }
        tensors.insert(e.name.clone(), t);
    }

    let template = Network::<T>::build(&config, 0).map_err(|e| err(None, e.to_string()))?;
    let names: Vec<String> = template.params().iter().map(|p| p.name.clone()).collect();
    let params = names
        .iter()
        .map(|n| {
            tensors
                .remove(n)
                .map(|value| Param { name: n.clone(), value })
                .ok_or_else(|| err(None, format!("missing parameter {n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let network = Network::from_params(&config, params).map_err(|e| err(None, e.to_string()))?;

    let state = if state_kv.is_empty() {
        None
    } else {
        let num = |k: &str| -> Result<u64> {
            state_kv
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(None, format!("state field {k} missing or invalid")))
        };
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for n in &names {
            for (prefix, out) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                let key = format!("{prefix}{n}");
                out.push(tensors.remove(&key).ok_or_else(|| err(None, format!("missing {key}")))?);
            }
        }
        Some(TrainState {
            epoch: num("epoch")? as usize,
            adam: AdamState { step: num("adam_step")?, m, v },
        })
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(err(None, format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { network, state })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            num_stacks: 1,
            feature_channels: 16,
            scales: vec![1, 2],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn roundtrip_params_and_state() {
        let net = Network::<f32>::build(&small(), 3).unwrap();
        let mut adam = AdamState::new(net.params().iter().map(|p| &p.value));
        adam.step = 9;
        adam.m[0].data_mut()[0] = 0.25;
        let state = TrainState { epoch: 4, adam };
        let bytes = to_bytes(&net, Some(&state));
        let ck: Checkpoint<f32> = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.network.params(), net.params());
        assert_eq!(ck.network.config(), net.config());
        assert_eq!(ck.state.as_ref(), Some(&state));
        assert_eq!(to_bytes(&ck.network, ck.state.as_ref()), bytes);
    }

    #[test]
    fn header_is_readable_text() {
        let net = Network::<f32>::build(&small(), 1).unwrap();
        let bytes = to_bytes(&net, None);
        let text = String::from_utf8_lossy(&bytes[..200]);
        assert!(text.starts_with("MSSNET-CHECKPOINT 1\n[network]\nnum_stacks=1\n"));
    }

    #[test]
    fn corrupt_files_error() {
        let net = Network::<f32>::build(&small(), 1).unwrap();
        let bytes = to_bytes(&net, None);
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 4], Path::new("x")).is_err());
        assert!(from_bytes::<f32>(b"nope", Path::new("x")).is_err());
    }

    #[test]
    fn loads_at_other_precision() {
        let net = Network::<f32>::build(&small(), 2).unwrap();
        let ck: Checkpoint<f64> = from_bytes(&to_bytes(&net, None), Path::new("x")).unwrap();
        assert_eq!(ck.network.params()[0].value, net.params()[0].value.cast::<f64>());
    }
}
