//! Checkpoint container: a JSON header (version, network spec, tensor
//! directory) followed by little-endian f32 blobs. Round trips are bitwise
//! lossless and the format is seekable and language-neutral.

use std::collections::BTreeMap;
use std::path::Path;

use crate::builder::{attach_fcn32_head, build_ndnet, NetworkSpec};
use crate::error::{Error, Result};
use crate::graph::{LayerGraph, Unit};
use crate::train::SgdState;

const MAGIC: &[u8; 4] = b"NDNC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the f32 blob section.
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
struct Header {
    version: u32,
    network_spec: NetworkSpec,
    with_head: bool,
    step: u64,
    bn_initialized: Vec<(String, bool)>,
    tensors: Vec<TensorEntry>,
}

/// A checkpoint loaded back into memory: the rebuilt graph, optimizer
/// velocity and the training step it was captured at.
#[derive(Debug)]
pub struct Checkpoint {
    pub graph: LayerGraph<f32>,
    pub sgd: SgdState<f32>,
    pub step: u64,
}

fn graph_has_head(graph: &LayerGraph<f32>) -> bool {
    graph
        .units()
        .iter()
        .any(|u| matches!(u, Unit::Upsample { .. }))
}

/// Serializes every parameter tensor, batch-norm running statistic and
/// optimizer velocity buffer. The graph must have been built from a
/// `NetworkSpec` so it can be reconstructed at load time.
pub fn save_checkpoint(
    graph: &LayerGraph<f32>,
    sgd: Option<&SgdState<f32>>,
    step: u64,
    path: &Path,
) -> Result<()> {
    let spec = graph.network_spec.clone().ok_or_else(|| {
        Error::Checkpoint("graph carries no network spec; only built networks are checkpointable".into())
    })?;

    let mut tensors = Vec::new();
    let mut blob = Vec::<f32>::new();
    let mut bn_flags = Vec::new();
    let push = |name: String, shape: Vec<usize>, data: &[f32], blob: &mut Vec<f32>, tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: blob.len() as u64,
            len: data.len() as u64,
        });
        blob.extend_from_slice(data);
    };

    graph.visit_convs(&mut |layer| {
        push(
            format!("{}.weight", layer.name),
            layer.weight.shape().to_vec(),
            layer.weight.data(),
            &mut blob,
            &mut tensors,
        );
        if let Some(bn) = layer.bn.as_ref() {
            let c = vec![bn.channels()];
            for (field, data) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                push(
                    format!("{}.bn.{field}", layer.name),
                    c.clone(),
                    data,
                    &mut blob,
                    &mut tensors,
                );
            }
            bn_flags.push((format!("{}.bn", layer.name), bn.initialized));
        }
    });

    if let Some(sgd) = sgd {
        let names = graph.parameter_names();
        if names.len() != sgd.buffers().len() {
            return Err(Error::Checkpoint(format!(
                "optimizer holds {} buffers for {} parameters",
                sgd.buffers().len(),
                names.len()
            )));
        }
        for (name, buf) in names.iter().zip(sgd.buffers()) {
            push(
                format!("velocity.{name}"),
                vec![buf.len()],
                buf,
                &mut blob,
                &mut tensors,
            );
        }
    }

    let header = Header {
        version: FORMAT_VERSION,
        network_spec: spec,
        with_head: graph_has_head(graph),
        step,
        bn_initialized: bn_flags,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_bytes.len() + blob.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for v in &blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Rebuilds the graph named in the header and restores every tensor bitwise.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unknown checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;

    let blob_bytes = &bytes[header_end..];
    if blob_bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint("blob section is not f32-aligned".into()));
    }
    let blob: Vec<f32> = blob_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut entries: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for entry in &header.tensors {
        let end = entry.offset.checked_add(entry.len);
        if end.is_none() || end.unwrap() as usize > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} points past the end of a truncated blob",
                entry.name
            )));
        }
        if entries.insert(&entry.name, entry).is_some() {
            return Err(Error::Checkpoint(format!(
                "tensor {} appears twice in the directory",
                entry.name
            )));
        }
    }
    let slice_of = |entry: &TensorEntry| -> &[f32] {
        &blob[entry.offset as usize..(entry.offset + entry.len) as usize]
    };

    let backbone = build_ndnet::<f32>(&header.network_spec)?;
    let mut graph = if header.with_head {
        attach_fcn32_head(backbone, header.network_spec.num_classes)?
    } else {
        backbone
    };

    let bn_flags: BTreeMap<&str, bool> = header
        .bn_initialized
        .iter()
        .map(|(n, b)| (n.as_str(), *b))
        .collect();

    let mut consumed = 0usize;
    let mut missing: Option<String> = None;
    let mut bad_shape: Option<String> = None;
    graph.visit_convs_mut(&mut |layer| {
        if missing.is_some() || bad_shape.is_some() {
            return;
        }
        let wname = format!("{}.weight", layer.name);
        match entries.get(wname.as_str()) {
            Some(entry) => {
                if entry.len as usize != layer.weight.len() {
                    bad_shape = Some(format!(
                        "{wname}: checkpoint holds {} elements, graph expects {}",
                        entry.len,
                        layer.weight.len()
                    ));
                    return;
                }
                layer.weight.data_mut().copy_from_slice(slice_of(entry));
                consumed += 1;
            }
            None => {
                missing = Some(wname);
                return;
            }
        }
        if let Some(bn) = layer.bn.as_mut() {
            let c = bn.channels();
            let fields: [(&str, &mut Vec<f32>); 4] = [
                ("gamma", &mut bn.gamma),
                ("beta", &mut bn.beta),
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ];
            for (field, dst) in fields {
                let name = format!("{}.bn.{field}", layer.name);
                match entries.get(name.as_str()) {
                    Some(entry) if entry.len as usize == c => {
                        dst.copy_from_slice(slice_of(entry));
                        consumed += 1;
                    }
                    Some(entry) => {
                        bad_shape = Some(format!(
                            "{name}: checkpoint holds {} elements, graph expects {c}",
                            entry.len
                        ));
                        return;
                    }
                    None => {
                        missing = Some(name);
                        return;
                    }
                }
            }
            bn.initialized = bn_flags
                .get(format!("{}.bn", layer.name).as_str())
                .copied()
                .unwrap_or(false);
        }
    });
    if let Some(name) = missing {
        return Err(Error::Checkpoint(format!("missing tensor {name}")));
    }
    if let Some(msg) = bad_shape {
        return Err(Error::Checkpoint(msg));
    }

    let mut sgd = SgdState::new(&mut graph);
    for (name, buf) in graph.parameter_names().iter().zip(sgd.buffers_mut()) {
        let vname = format!("velocity.{name}");
        if let Some(entry) = entries.get(vname.as_str()) {
            if entry.len as usize != buf.len() {
                return Err(Error::Checkpoint(format!(
                    "{vname}: checkpoint holds {} elements, graph expects {}",
                    entry.len,
                    buf.len()
                )));
            }
            buf.copy_from_slice(slice_of(entry));
            consumed += 1;
        }
    }
    if consumed != header.tensors.len() {
        let known: Vec<String> = entries.keys().map(|s| s.to_string()).collect();
        return Err(Error::Checkpoint(format!(
            "checkpoint directory holds {} tensors but the graph consumed {consumed}; directory: {known:?}",
            header.tensors.len()
        )));
    }

    Ok(Checkpoint {
        graph,
        sgd,
        step: header.step,
    })
}
