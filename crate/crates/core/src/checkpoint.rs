//! Flat binary tensor container and pipeline checkpoints.
//!
//! Container layout, all integers 64-bit little-endian: magic, version,
//! tensor count, then per tensor name length, name bytes, rank, extents,
//! and the f64 payload. Round-trips are bit-exact.
//!
//! A pipeline checkpoint prepends a small key=value header (architecture
//! string, variant, family, input extents, warp_ops, shared flag, plus any
//! caller metadata) to a container holding every layer's weights and bias.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{NetworkSpec, Variant};
use crate::error::{Error, Result};
use crate::pipeline::AlignmentPipeline;
use crate::tensor::Tensor;
use crate::warp::WarpFamily;

const TENSOR_MAGIC: &[u8; 8] = b"WARPTNSR";
const CKPT_MAGIC: &[u8; 8] = b"WARPCKPT";
const VERSION: u64 = 1;

const MAX_NAME_LEN: u64 = 1 << 16;
const MAX_RANK: u64 = 8;
const MAX_ELEMS: u64 = 1 << 31;

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated container".into())
        } else {
            Error::Io(e)
        }
    })
}

/// Serialize named tensors to a writer.
pub fn write_container<W: Write>(w: &mut W, entries: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    put_u64(w, VERSION)?;
    put_u64(w, entries.len() as u64)?;
    for (name, tensor) in entries {
        put_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        put_u64(w, tensor.shape().len() as u64)?;
        for &e in tensor.shape() {
            put_u64(w, e as u64)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Deserialize a container written by [`write_container`].
pub fn read_container<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format("not a tensor container".into()));
    }
    let version = get_u64(r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let count = get_u64(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = get_u64(r)?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!("tensor name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len as usize];
        read_exact(r, &mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = get_u64(r)?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut total: u64 = 1;
        for _ in 0..rank {
            let e = get_u64(r)?;
            total = total
                .checked_mul(e)
                .filter(|&t| t <= MAX_ELEMS)
                .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
            shape.push(e as usize);
        }
        let mut data = vec![0.0f64; total as usize];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            read_exact(r, &mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_container(&mut BufReader::new(File::open(path)?))
}

const RESERVED_KEYS: [&str; 6] = ["arch", "variant", "family", "input", "warp_ops", "shared"];

fn layer_names(prefix: &str, count: usize) -> Vec<(String, String)> {
    (0..count)
        .map(|j| {
            (
                format!("{prefix}.layer{j}.weights"),
                format!("{prefix}.layer{j}.bias"),
            )
        })
        .collect()
}

/// Write a pipeline checkpoint. `extra` key=value pairs are stored in the
/// header next to the architecture fields and returned by
/// [`load_pipeline`]; keys must not collide with the reserved ones.
pub fn save_pipeline(
    path: &Path,
    pipe: &AlignmentPipeline,
    extra: &[(&str, &str)],
) -> Result<()> {
    let spec = pipe.spec();
    let mut header = String::new();
    let mut push = |k: &str, v: &str| -> Result<()> {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Config(format!("bad header entry {k:?}")));
        }
        header.push_str(k);
        header.push('=');
        header.push_str(v);
        header.push('\n');
        Ok(())
    };
    push("arch", &spec.text)?;
    push("variant", spec.variant.name())?;
    push("family", spec.family.name())?;
    push(
        "input",
        &format!("{}x{}x{}", spec.input.0, spec.input.1, spec.input.2),
    )?;
    push("warp_ops", &spec.warp_ops.to_string())?;
    push("shared", if spec.shared { "true" } else { "false" })?;
    for (k, v) in extra {
        if RESERVED_KEYS.contains(k) {
            return Err(Error::Config(format!("metadata key {k:?} is reserved")));
        }
        push(k, v)?;
    }

    let mut names = Vec::new();
    for (i, stack) in pipe.predictors().iter().enumerate() {
        names.push((format!("pred{i}"), stack.len()));
    }
    names.push(("cls".to_string(), pipe.classifier().len()));

    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for (i, stack) in pipe.predictors().iter().enumerate() {
        for (j, layer) in stack.iter().enumerate() {
            entries.push((format!("pred{i}.layer{j}.weights"), &layer.weights));
            entries.push((format!("pred{i}.layer{j}.bias"), &layer.bias));
        }
    }
    for (j, layer) in pipe.classifier().iter().enumerate() {
        entries.push((format!("cls.layer{j}.weights"), &layer.weights));
        entries.push((format!("cls.layer{j}.bias"), &layer.bias));
    }
    let borrowed: Vec<(&str, &Tensor)> =
        entries.iter().map(|(n, t)| (n.as_str(), *t)).collect();

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    put_u64(&mut w, VERSION)?;
    put_u64(&mut w, header.len() as u64)?;
    w.write_all(header.as_bytes())?;
    write_container(&mut w, &borrowed)?;
    w.flush()?;
    Ok(())
}

/// Rebuild a pipeline from a checkpoint; returns it with the header
/// metadata (reserved and caller keys alike).
pub fn load_pipeline(path: &Path) -> Result<(AlignmentPipeline, BTreeMap<String, String>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a pipeline checkpoint".into()));
    }
    let version = get_u64(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = get_u64(&mut r)?;
    if header_len > MAX_NAME_LEN {
        return Err(Error::Format(format!("header length {header_len}")));
    }
    let mut header_buf = vec![0u8; header_len as usize];
    read_exact(&mut r, &mut header_buf)?;
    let header = String::from_utf8(header_buf)
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;

    let mut meta = BTreeMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let field = |k: &str| -> Result<&String> {
        meta.get(k)
            .ok_or_else(|| Error::Format(format!("checkpoint header missing {k:?}")))
    };
    let arch = field("arch")?.clone();
    let variant = Variant::parse(field("variant")?)?;
    let family = WarpFamily::parse(field("family")?)?;
    let input_text = field("input")?;
    let dims: Vec<usize> = input_text
        .split('x')
        .map(|s| s.parse().map_err(|_| Error::Format(format!("bad input extents {input_text:?}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::Format(format!("bad input extents {input_text:?}")));
    }
    let spec = NetworkSpec::build(&arch, variant, family, (dims[0], dims[1], dims[2]))?;
    let declared_ops: usize = field("warp_ops")?
        .parse()
        .map_err(|_| Error::Format("bad warp_ops".into()))?;
    let declared_shared = field("shared")?.as_str() == "true";
    if declared_ops != spec.warp_ops || declared_shared != spec.shared {
        return Err(Error::Format(
            "header warp_ops/shared disagree with the architecture".into(),
        ));
    }

    // Initialization is irrelevant: every tensor is overwritten below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pipe = AlignmentPipeline::new(spec, &mut rng);

    let mut tensors: BTreeMap<String, Tensor> = read_container(&mut r)?.into_iter().collect();
    let mut take = |name: &str, dst: &mut Tensor| -> Result<()> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name:?}")))?;
        if t.shape() != dst.shape() {
            return Err(Error::Format(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t;
        Ok(())
    };
    let pred_counts: Vec<usize> = pipe.predictors().iter().map(|s| s.len()).collect();
    for (i, count) in pred_counts.iter().enumerate() {
        for (j, (wname, bname)) in layer_names(&format!("pred{i}"), *count).iter().enumerate() {
            let layer = &mut pipe.predictors_mut()[i][j];
            take(wname, &mut layer.weights)?;
            take(bname, &mut layer.bias)?;
        }
    }
    let cls_count = pipe.classifier().len();
    for (j, (wname, bname)) in layer_names("cls", cls_count).iter().enumerate() {
        let layer = &mut pipe.classifier_mut()[j];
        take(wname, &mut layer.weights)?;
        take(bname, &mut layer.bias)?;
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {name:?}")));
    }
    pipe.zero_grads();
    Ok((pipe, meta))
}
