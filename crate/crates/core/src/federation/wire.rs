//! Versioned little-endian payload format shared by client uploads and
//! server broadcasts.
//!
//! ```text
//! magic      4   b"PIPU" (client update) | b"PIPG" (global broadcast)
//! version    u16
//! flags      u16  bit 0: prototypes carry means only
//! sender     u32  client id (update) or round index (broadcast)
//! task       u32
//! omega      u64  aggregation weight (0 in broadcasts)
//! manifest   u32 count, then per tensor: u16 name_len, name, u32 rows, u32 cols
//! head       u32 n_classes, u32 D, n_classes × u32 class ids
//! tensors    f32 values of every manifest tensor, row-major, in manifest order
//! head       f32 weight (n_classes × D), f32 bias (n_classes)
//! protos     u32 count, then per record: u32 class, u32 D, D × f32 μ,
//!            D × f32 σ² (absent in mean-only mode), u32 support
//! ```

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::prompt::HeadParams;
use crate::prototypes::{GaussianPrototype, PrototypeSet};

pub const VERSION: u16 = 1;
pub const MAGIC_UPDATE: [u8; 4] = *b"PIPU";
pub const MAGIC_GLOBAL: [u8; 4] = *b"PIPG";
const FLAG_MEAN_ONLY: u16 = 1;

/// Fixed leading bytes: magic, version, flags, sender, task, omega.
pub const FIXED_HEADER_BYTES: usize = 4 + 2 + 2 + 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    Update,
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Payload {
    pub kind: PayloadKind,
    pub sender: u32,
    pub task: u32,
    pub omega: u64,
    pub mean_only: bool,
    pub tensors: Vec<(String, Mat)>,
    pub head: HeadParams,
    pub prototypes: PrototypeSet,
}

/// Bytes that are not parameter or prototype values.
pub fn header_bytes<'a>(names: impl IntoIterator<Item = &'a str>, n_classes: usize, n_protos: usize) -> usize {
    let manifest: usize = names.into_iter().map(|n| 2 + n.len() + 8).sum();
    FIXED_HEADER_BYTES + 4 + manifest + 8 + 4 * n_classes + 4 + n_protos * 12
}

/// Bytes of parameter and prototype values.
pub fn value_bytes(n_params: usize, n_classes: usize, dim: usize, n_protos: usize, mean_only: bool) -> usize {
    let per_proto = if mean_only { dim } else { 2 * dim };
    4 * (n_params + n_classes * dim + n_classes + n_protos * per_proto)
}

impl Payload {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn header_len(&self) -> usize {
        header_bytes(self.tensors.iter().map(|(n, _)| n.as_str()), self.head.classes.len(), self.prototypes.len())
    }

    /// Analytic encoded length.
    pub fn encoded_len(&self) -> usize {
        let n = self.head.classes.len();
        let hd = if n == 0 { 0 } else { self.head.weight.cols() };
        let per = if self.mean_only { 1 } else { 2 };
        let protos: usize = self.prototypes.iter().map(|z| 4 * per * z.dim()).sum();
        self.header_len() + 4 * (self.param_count() + n * hd + n) + protos
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} exceeds the wire range")))
}

pub fn encode(p: &Payload) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(p.encoded_len());
    out.extend_from_slice(match p.kind {
        PayloadKind::Update => &MAGIC_UPDATE,
        PayloadKind::Global => &MAGIC_GLOBAL,
    });
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(if p.mean_only { FLAG_MEAN_ONLY } else { 0 }).to_le_bytes());
    out.extend_from_slice(&p.sender.to_le_bytes());
    out.extend_from_slice(&p.task.to_le_bytes());
    out.extend_from_slice(&p.omega.to_le_bytes());

    out.extend_from_slice(&u32_of(p.tensors.len(), "tensor count")?.to_le_bytes());
    for (name, m) in &p.tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(m.rows(), "rows")?.to_le_bytes());
        out.extend_from_slice(&u32_of(m.cols(), "cols")?.to_le_bytes());
    }
    let h = &p.head;
    let n = h.classes.len();
    if h.weight.rows() != n || h.bias.len() != n {
        return Err(Error::Contract("head weight/bias do not match its class list".into()));
    }
    let hd = if n == 0 { 0 } else { h.weight.cols() };
    out.extend_from_slice(&u32_of(n, "class count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(hd, "head width")?.to_le_bytes());
    for c in &h.classes {
        out.extend_from_slice(&c.to_le_bytes());
    }

    let push_f32 = |out: &mut Vec<u8>, vals: &[f64]| {
        for &v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for (_, m) in &p.tensors {
        push_f32(&mut out, m.data());
    }
    push_f32(&mut out, h.weight.data());
    push_f32(&mut out, &h.bias);

    out.extend_from_slice(&u32_of(p.prototypes.len(), "prototype count")?.to_le_bytes());
    for z in p.prototypes.iter() {
        out.extend_from_slice(&z.class_id.to_le_bytes());
        out.extend_from_slice(&u32_of(z.dim(), "prototype width")?.to_le_bytes());
        push_f32(&mut out, &z.mean);
        if !p.mean_only {
            push_f32(&mut out, &z.var);
        }
        out.extend_from_slice(&u32_of(z.support as usize, "support")?.to_le_bytes());
    }
    debug_assert_eq!(out.len(), p.encoded_len());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Codec {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err_at(at, "length overflow"))?, what)?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(self.err_at(at + 4 * i, &format!("non-finite value in {what}")));
        }
        Ok(vals)
    }

    fn err_at(&self, offset: usize, msg: &str) -> Error {
        Error::Codec {
            offset,
            msg: msg.to_string(),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Payload> {
    let mut r = Reader { bytes, pos: 0 };
    let kind = match r.take(4, "magic")? {
        m if m == MAGIC_UPDATE => PayloadKind::Update,
        m if m == MAGIC_GLOBAL => PayloadKind::Global,
        _ => return Err(r.err_at(0, "bad magic")),
    };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.err_at(4, &format!("unsupported version {version}")));
    }
    let flags = r.u16("flags")?;
    if flags & !FLAG_MEAN_ONLY != 0 {
        return Err(r.err_at(6, &format!("unknown flags {flags:#x}")));
    }
    let mean_only = flags & FLAG_MEAN_ONLY != 0;
    let sender = r.u32("sender")?;
    let task = r.u32("task")?;
    let omega = r.u64("omega")?;

    let count = r.u32("tensor count")? as usize;
    let mut manifest = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| r.err_at(at, "tensor name is not UTF-8"))?
            .to_string();
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        manifest.push((name, rows, cols));
    }
    let n_classes = r.u32("class count")? as usize;
    let hd = r.u32("head width")? as usize;
    let mut classes = Vec::new();
    for _ in 0..n_classes {
        classes.push(r.u32("class id")?);
    }

    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, rows, cols) in manifest {
        let vals = r.f32s(rows * cols, &name)?;
        tensors.push((name, Mat::from_vec(rows, cols, vals)?));
    }
    let weight = Mat::from_vec(n_classes, hd, r.f32s(n_classes * hd, "head weight")?)?;
    let bias = r.f32s(n_classes, "head bias")?;

    let n_protos = r.u32("prototype count")? as usize;
    let mut prototypes = PrototypeSet::empty(task as usize);
    for _ in 0..n_protos {
        let at = r.pos;
        let class_id = r.u32("prototype class")?;
        let d = r.u32("prototype width")? as usize;
        let mean = r.f32s(d, "prototype mean")?;
        let var = if mean_only { vec![0.0; d] } else { r.f32s(d, "prototype variance")? };
        let support = r.u32("support")? as u64;
        if prototypes
            .insert(GaussianPrototype {
                class_id,
                mean,
                var,
                support,
            })
            .is_some()
        {
            return Err(r.err_at(at, &format!("duplicate prototype for class {class_id}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err_at(r.pos, "trailing bytes"));
    }
    Ok(Payload {
        kind,
        sender,
        task,
        omega,
        mean_only,
        tensors,
        head: HeadParams { classes, weight, bias },
        prototypes,
    })
}
