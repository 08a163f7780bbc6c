//! The `DGC1` checkpoint format.
//!
//! ```text
//! "DGC1"                      magic, 4 bytes
//! version                     u32 LE
//! record*                     parameters, running stats, step counters, metadata
//! record*                     Adam moments, named "<param>.m1" / "<param>.m2"
//! crc32                       u32 LE, over every preceding byte
//!
//! record := name_len u32 | name utf-8 | rank u32 | dims u32 * rank | data f32 LE * prod(dims)
//! ```
//!
//! Values are stored as `f32`. Saving rounds the live state to `f32` as well,
//! so a network that was saved and one that was loaded back are identical.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::{build_discriminator, build_generator, Network, NetworkSpec};
use crate::optim::Parameter;
use crate::tensor::Real;

pub const MAGIC: &[u8; 4] = b"DGC1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Record {
            name: name.into(),
            dims,
            data,
        }
    }

    fn from_reals(name: impl Into<String>, dims: &[usize], data: &[Real]) -> Self {
        Record::new(
            name,
            dims.to_vec(),
            data.iter().map(|&v| v as f32).collect(),
        )
    }

    fn scalar(name: impl Into<String>, v: Real) -> Self {
        Record::new(name, vec![], vec![v as f32])
    }

    fn list(name: impl Into<String>, values: &[usize]) -> Self {
        Record::new(
            name,
            vec![values.len()],
            values.iter().map(|&v| v as f32).collect(),
        )
    }

    fn reals(&self) -> Vec<Real> {
        self.data.iter().map(|&v| Real::from(v)).collect()
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for &d in &r.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!("record at byte {} runs past the end", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::Crc {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut cur = Cursor {
        bytes: payload,
        pos: 4,
    };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mut records = Vec::new();
    while cur.pos < payload.len() {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Data("checkpoint record name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = cur.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Truncated(name.clone()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(Record { name, dims, data });
    }
    Ok(records)
}

/// Networks plus the training position, as persisted.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub generator: Network,
    pub discriminator: Network,
    pub iteration: u64,
}

/// Specs a loaded checkpoint must agree with.
#[derive(Clone, Copy, Debug)]
pub struct ExpectedSpecs<'a> {
    pub generator: &'a NetworkSpec,
    pub discriminator: &'a NetworkSpec,
    pub input_size: usize,
}

fn spec_records(prefix: &str, spec: &NetworkSpec) -> Vec<Record> {
    vec![
        Record::list(
            format!("meta.{prefix}.encoder_filters"),
            &spec.encoder_filters,
        ),
        Record::list(
            format!("meta.{prefix}.decoder_filters"),
            &spec.decoder_filters,
        ),
        Record::list(
            format!("meta.{prefix}.dropout_blocks"),
            &spec.dropout_blocks,
        ),
        Record::new(
            format!("meta.{prefix}.hyper"),
            vec![5],
            vec![
                spec.kernel as f32,
                spec.stride as f32,
                spec.leak as f32,
                spec.dropout_rate as f32,
                if spec.normalize_first_layer { 1.0 } else { 0.0 },
            ],
        ),
    ]
}

fn network_records(prefix: &str, net: &Network, out: &mut Vec<Record>, moments: &mut Vec<Record>) {
    for p in &net.parameters {
        let name = format!("{prefix}.{}", p.name);
        out.push(Record::from_reals(&name, p.shape(), p.value.data()));
        out.push(Record::scalar(format!("{name}.step"), p.step_count as Real));
        moments.push(Record::from_reals(
            format!("{name}.m1"),
            p.shape(),
            &p.first_moment,
        ));
        moments.push(Record::from_reals(
            format!("{name}.m2"),
            p.shape(),
            &p.second_moment,
        ));
    }
    for (layer, stats) in &net.buffers {
        let c = stats.mean.len();
        out.push(Record::from_reals(
            format!("{prefix}.{layer}.running_mean"),
            &[c],
            &stats.mean,
        ));
        out.push(Record::from_reals(
            format!("{prefix}.{layer}.running_var"),
            &[c],
            &stats.var,
        ));
    }
}

/// Serializes both networks and the iteration counter.
pub fn checkpoint_bytes(generator: &Network, discriminator: &Network, iteration: u64) -> Vec<u8> {
    let mut records = spec_records("g", &generator.spec);
    records.extend(spec_records("d", &discriminator.spec));
    records.push(Record::scalar(
        "meta.d.input_size",
        discriminator.input_size.unwrap_or(0) as Real,
    ));
    records.push(Record::scalar("meta.iteration", iteration as Real));
    let mut moments = Vec::new();
    network_records("g", generator, &mut records, &mut moments);
    network_records("d", discriminator, &mut records, &mut moments);
    records.extend(moments);
    encode(&records)
}

/// Writes a checkpoint. The networks are first rounded to `f32` in place so
/// the live state matches what [`load_checkpoint`] will return.
pub fn save_checkpoint(
    generator: &mut Network,
    discriminator: &mut Network,
    iteration: u64,
    path: &Path,
) -> Result<()> {
    generator.quantize_f32();
    discriminator.quantize_f32();
    let bytes = checkpoint_bytes(generator, discriminator, iteration);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// The double nearest the shortest decimal that round-trips through `v`, so
/// `0.2` stored as `f32` reads back as `0.2`.
fn shortest_decimal(v: f32) -> Real {
    v.to_string().parse().unwrap_or(Real::from(v))
}

fn spec_from_records(prefix: &str, map: &HashMap<&str, &Record>) -> Result<NetworkSpec> {
    let get = |key: &str| -> Result<&Record> {
        let name = format!("meta.{prefix}.{key}");
        map.get(name.as_str())
            .copied()
            .ok_or(Error::MissingTensor(name))
    };
    let list = |key: &str| -> Result<Vec<usize>> {
        Ok(get(key)?.data.iter().map(|&v| v as usize).collect())
    };
    let hyper = get("hyper")?;
    if hyper.data.len() != 5 {
        return Err(Error::Data(format!(
            "meta.{prefix}.hyper must hold 5 values"
        )));
    }
    Ok(NetworkSpec {
        encoder_filters: list("encoder_filters")?,
        decoder_filters: list("decoder_filters")?,
        dropout_blocks: list("dropout_blocks")?,
        kernel: hyper.data[0] as usize,
        stride: hyper.data[1] as usize,
        leak: shortest_decimal(hyper.data[2]),
        dropout_rate: shortest_decimal(hyper.data[3]),
        normalize_first_layer: hyper.data[4] != 0.0,
    })
}

fn fetch<'a>(map: &HashMap<&str, &'a Record>, name: &str, dims: &[usize]) -> Result<&'a Record> {
    let r = map
        .get(name)
        .copied()
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    if r.dims != dims {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: dims.to_vec(),
            found: r.dims.clone(),
        });
    }
    Ok(r)
}

fn fill_network(prefix: &str, net: &mut Network, map: &HashMap<&str, &Record>) -> Result<()> {
    for p in &mut net.parameters {
        let Parameter {
            name,
            value,
            first_moment,
            second_moment,
            step_count,
            ..
        } = p;
        let full = format!("{prefix}.{name}");
        let dims = value.shape().to_vec();
        let r = fetch(map, &full, &dims)?;
        value
            .data_mut()
            .iter_mut()
            .zip(&r.data)
            .for_each(|(d, &s)| *d = Real::from(s));
        *first_moment = fetch(map, &format!("{full}.m1"), &dims)?.reals();
        *second_moment = fetch(map, &format!("{full}.m2"), &dims)?.reals();
        *step_count = fetch(map, &format!("{full}.step"), &[])?.data[0] as u64;
    }
    for (layer, stats) in &mut net.buffers {
        let c = stats.mean.len();
        stats.mean = fetch(map, &format!("{prefix}.{layer}.running_mean"), &[c])?.reals();
        stats.var = fetch(map, &format!("{prefix}.{layer}.running_var"), &[c])?.reals();
    }
    Ok(())
}

/// Loads a checkpoint file. With `expected`, the networks are built from
/// those specs and every stored shape is checked against them; otherwise
/// the specs recorded in the file are used.
pub fn load_checkpoint(path: &Path, expected: Option<ExpectedSpecs<'_>>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, expected)
}

pub fn checkpoint_from_bytes(
    bytes: &[u8],
    expected: Option<ExpectedSpecs<'_>>,
) -> Result<Checkpoint> {
    let records = decode(bytes)?;
    let mut map = HashMap::with_capacity(records.len());
    for r in &records {
        if map.insert(r.name.as_str(), r).is_some() {
            return Err(Error::Data(format!(
                "duplicate checkpoint record `{}`",
                r.name
            )));
        }
    }
    let scalar = |name: &str| -> Result<f32> { Ok(fetch(&map, name, &[])?.data[0]) };
    let (g_spec, d_spec, size) = match expected {
        Some(e) => (e.generator.clone(), e.discriminator.clone(), e.input_size),
        None => (
            spec_from_records("g", &map)?,
            spec_from_records("d", &map)?,
            scalar("meta.d.input_size")? as usize,
        ),
    };
    let mut rng = crate::rng::seeded(0);
    let mut generator = build_generator(&g_spec, &mut rng)?;
    let mut discriminator = build_discriminator(&d_spec, size, &mut rng)?;
    fill_network("g", &mut generator, &map)?;
    fill_network("d", &mut discriminator, &map)?;
    Ok(Checkpoint {
        generator,
        discriminator,
        iteration: scalar("meta.iteration")? as u64,
    })
}
