//! Binary model container, all integers and floats little-endian:
//!
//! ```text
//! magic "LSBQCKPT" | u32 version | u32 spec_len | spec JSON
//! u8 quantize_weights | u8 activation_bits (0 = none) | f64 activation_clip
//! u32 quantized layers, each: u8 bits | u8 prune_speed | u8 pinned | u8 kind
//!                             f64 scale | u64 len | len × f64 latent
//! u32 full layers, each:      u64 len | len × f64
//! u32 biases, each:           u64 len | len × f64
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::model::{ForwardPolicy, Model, ModelSpec};
use crate::numerics::Tensor;
use crate::quantize::{LayerQuantState, QuantizerKind};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSBQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let spec = serde_json::to_vec(model.spec())?;
    // Writes into a Vec cannot fail.
    let w = &mut out;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    w.write_u32::<LittleEndian>(spec.len() as u32).unwrap();
    w.extend_from_slice(&spec);
    w.write_u8(model.policy.quantize_weights as u8).unwrap();
    w.write_u8(model.policy.activation_bits.unwrap_or(0)).unwrap();
    w.write_f64::<LittleEndian>(model.policy.activation_clip).unwrap();
    let floats = |w: &mut Vec<u8>, xs: &[f64]| {
        w.write_u64::<LittleEndian>(xs.len() as u64).unwrap();
        for &x in xs {
            w.write_f64::<LittleEndian>(x).unwrap();
        }
    };
    w.write_u32::<LittleEndian>(model.quant_layers().len() as u32).unwrap();
    for q in model.quant_layers() {
        w.write_u8(q.bits()).unwrap();
        w.write_u8(q.prune_speed()).unwrap();
        w.write_u8(q.pinned() as u8).unwrap();
        w.write_u8(match q.kind() {
            QuantizerKind::RoundClamp => 0,
            QuantizerKind::DoReFa => 1,
        })
        .unwrap();
        w.write_f64::<LittleEndian>(q.scale()).unwrap();
        floats(w, q.latent.data());
    }
    w.write_u32::<LittleEndian>(model.full_layers().len() as u32).unwrap();
    for t in model.full_layers() {
        floats(w, t.data());
    }
    w.write_u32::<LittleEndian>(model.biases().len() as u32).unwrap();
    for b in model.biases() {
        floats(w, b);
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    atomic_write(path, &encode(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Internal(message) => Error::format(path, message),
        other => other,
    })
}

fn decode(bytes: &[u8]) -> Result<Model> {
    let truncated = |_| Error::Internal("truncated checkpoint".into());
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Internal(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Internal(format!("unsupported checkpoint version {version}")));
    }
    let spec_len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut spec = vec![0u8; spec_len.min(bytes.len())];
    r.read_exact(&mut spec).map_err(truncated)?;
    let spec: ModelSpec = serde_json::from_slice(&spec).map_err(|e| Error::Internal(format!("model spec: {e}")))?;
    let quantize_weights = r.read_u8().map_err(truncated)? != 0;
    let activation_bits = match r.read_u8().map_err(truncated)? {
        0 => None,
        b => Some(b),
    };
    let activation_clip = r.read_f64::<LittleEndian>().map_err(truncated)?;
    let policy = ForwardPolicy {
        quantize_weights,
        activation_bits,
        activation_clip,
    };
    let floats = |r: &mut Cursor<&[u8]>| -> Result<Vec<f64>> {
        let n = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        if n > bytes.len() / 8 {
            return Err(Error::Internal("truncated checkpoint".into()));
        }
        (0..n)
            .map(|_| r.read_f64::<LittleEndian>().map_err(truncated))
            .collect()
    };
    let nq = r.read_u32::<LittleEndian>().map_err(truncated)?;
    let mut quantized = Vec::new();
    for _ in 0..nq {
        let bits = r.read_u8().map_err(truncated)?;
        let speed = r.read_u8().map_err(truncated)?;
        let pinned = r.read_u8().map_err(truncated)? != 0;
        let kind = match r.read_u8().map_err(truncated)? {
            0 => QuantizerKind::RoundClamp,
            1 => QuantizerKind::DoReFa,
            k => return Err(Error::Internal(format!("unknown quantizer tag {k}"))),
        };
        let scale = r.read_f64::<LittleEndian>().map_err(truncated)?;
        let latent = Tensor::from_vec(floats(&mut r)?);
        quantized.push((latent, scale, bits, speed, kind, pinned));
    }
    let nf = r.read_u32::<LittleEndian>().map_err(truncated)?;
    let full: Vec<Vec<f64>> = (0..nf).map(|_| floats(&mut r)).collect::<Result<_>>()?;
    let nb = r.read_u32::<LittleEndian>().map_err(truncated)?;
    let biases: Vec<Vec<f64>> = (0..nb).map(|_| floats(&mut r)).collect::<Result<_>>()?;
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Internal("trailing bytes after checkpoint".into()));
    }

    // Reshape flat buffers to the layer shapes the spec implies.
    let template = Model::build(&spec, 0, 8, QuantizerKind::RoundClamp, policy)
        .map_err(|e| Error::Internal(format!("model spec: {e}")))?;
    if quantized.len() != template.quant_layers().len() || full.len() != template.full_layers().len() {
        return Err(Error::Consistency(
            "checkpoint layer count does not match its model spec".into(),
        ));
    }
    let quantized = quantized
        .into_iter()
        .zip(template.quant_layers())
        .map(|((latent, scale, bits, speed, kind, pinned), t)| {
            let latent = latent
                .reshape(t.latent.shape().to_vec())
                .map_err(|e| Error::Consistency(e.to_string()))?;
            LayerQuantState::restore(latent, scale, bits, speed, kind, pinned)
                .map_err(|e| Error::Consistency(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let full = full
        .into_iter()
        .zip(template.full_layers())
        .map(|(data, t)| Tensor::from_vec(data).reshape(t.shape().to_vec()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Consistency(e.to_string()))?;
    Model::from_parts(&spec, quantized, full, biases, policy)
}
