//! Checkpoint container: an ordered bag of named tensors in one file.
//!
//! Layout: a 7-byte magic, a little-endian `u32` entry count, then each
//! entry as a `u16` name length, the UTF-8 name, and a serialized tensor.
//! Helper functions pack and unpack the states that training accumulates —
//! network parameters, optimizer slots, and the feature dictionary — under
//! conventional name prefixes, so a resumed run continues bit for bit.
//!
//! Counters (iteration, step) are stored as single-element tensors; f32
//! holds integers exactly up to 2^24, far past any run length here.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::align::{AlignError, FeatureDictionary};
use crate::optim::{Adam, Sgd};
use crate::real::Real;
use crate::tensor::format::{self, FormatError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"FACKPT1";

/// Refuse checkpoints claiming more entries than this when reading.
const MAX_ENTRIES: u32 = 1 << 20;

#[derive(Debug)]
pub enum CheckpointError {
    Format(FormatError),
    Duplicate { name: String },
    Missing { name: String },
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    BadValue { name: String, detail: String },
    Align(AlignError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Format(e) => write!(f, "{e}"),
            CheckpointError::Duplicate { name } => write!(f, "duplicate entry {name:?}"),
            CheckpointError::Missing { name } => write!(f, "missing entry {name:?}"),
            CheckpointError::ShapeMismatch { name, expected, got } => {
                write!(f, "entry {name:?} has shape {got:?}, expected {expected:?}")
            }
            CheckpointError::BadValue { name, detail } => {
                write!(f, "entry {name:?}: {detail}")
            }
            CheckpointError::Align(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<FormatError> for CheckpointError {
    fn from(e: FormatError) -> Self {
        CheckpointError::Format(e)
    }
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Format(FormatError::Io(e))
    }
}

impl From<AlignError> for CheckpointError {
    fn from(e: AlignError) -> Self {
        CheckpointError::Align(e)
    }
}

/// Ordered collection of named tensors. Insertion order is the file order,
/// so writing the same states produces the same bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBag<T> {
    entries: Vec<(String, Vec<usize>, Vec<T>)>,
}

impl<T: Real> TensorBag<T> {
    pub fn new() -> Self {
        TensorBag { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<T>,
    ) -> Result<(), CheckpointError> {
        let name = name.into();
        assert!(name.len() <= u16::MAX as usize, "entry name too long");
        assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.get(&name).is_some() {
            return Err(CheckpointError::Duplicate { name });
        }
        self.entries.push((name, shape, data));
        Ok(())
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) -> Result<(), CheckpointError> {
        self.insert(name, vec![1], vec![T::from_f64(v)])
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[T])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    fn require(&self, name: &str) -> Result<(&[usize], &[T]), CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::Missing { name: name.into() })
    }

    pub fn scalar(&self, name: &str) -> Result<f64, CheckpointError> {
        let (shape, data) = self.require(name)?;
        if data.len() != 1 {
            return Err(CheckpointError::ShapeMismatch {
                name: name.into(),
                expected: vec![1],
                got: shape.to_vec(),
            });
        }
        Ok(data[0].as_f64())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(CHECKPOINT_MAGIC).map_err(FormatError::Io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())
            .map_err(FormatError::Io)?;
        for (name, shape, data) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes())
                .map_err(FormatError::Io)?;
            w.write_all(name.as_bytes()).map_err(FormatError::Io)?;
            format::write_raw(w, shape, data)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 7];
        format::read_exact_ctx(r, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                context: "checkpoint",
                found: magic.to_vec(),
            }
            .into());
        }
        let count = format::read_u32(r, "entry count")?;
        if count > MAX_ENTRIES {
            return Err(FormatError::Oversized {
                detail: format!("{count} checkpoint entries"),
            }
            .into());
        }
        let mut bag = TensorBag::new();
        for _ in 0..count {
            let name_len = format::read_u16(r, "entry name length")? as usize;
            let mut raw = vec![0u8; name_len];
            format::read_exact_ctx(r, &mut raw, "entry name")?;
            let name = String::from_utf8(raw).map_err(|_| FormatError::BadName)?;
            let (shape, data) = format::read_raw(r)?;
            let data = data.into_iter().map(|v| T::from_f64(v as f64)).collect();
            bag.insert(name, shape, data)?;
        }
        Ok(bag)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

// ---------------------------------------------------------------------------
// Packing conventions for the training states.

/// Store every `(name, tensor)` pair under its own name.
pub fn pack_parameters<T: Real>(
    bag: &mut TensorBag<T>,
    params: &[(String, Tensor<T>)],
) -> Result<(), CheckpointError> {
    for (name, t) in params {
        bag.insert(name.clone(), t.shape().to_vec(), t.to_vec())?;
    }
    Ok(())
}

/// Copy stored values back into live parameter tensors, shape-checked.
pub fn unpack_parameters<T: Real>(
    bag: &TensorBag<T>,
    params: &[(String, Tensor<T>)],
) -> Result<(), CheckpointError> {
    for (name, t) in params {
        let (shape, data) = bag.require(name)?;
        if shape != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: t.shape().to_vec(),
                got: shape.to_vec(),
            });
        }
        t.set_data(data).map_err(|e| CheckpointError::BadValue {
            name: name.clone(),
            detail: e.to_string(),
        })?;
    }
    Ok(())
}

/// Momentum buffers and the iteration counter, under `{prefix}/…`.
pub fn pack_sgd<T: Real>(
    bag: &mut TensorBag<T>,
    prefix: &str,
    opt: &Sgd<T>,
) -> Result<(), CheckpointError> {
    bag.insert_scalar(format!("{prefix}/iter"), opt.iteration() as f64)?;
    for (name, v) in opt.velocities() {
        bag.insert(format!("{prefix}/momentum/{name}"), vec![v.len()], v.to_vec())?;
    }
    Ok(())
}

/// Restore momentum and the iteration counter. Parameters that have no
/// stored buffer (never stepped) are simply left absent, matching the
/// optimizer's lazy initialization.
pub fn unpack_sgd<T: Real>(
    bag: &TensorBag<T>,
    prefix: &str,
    opt: &mut Sgd<T>,
) -> Result<(), CheckpointError> {
    let iter = bag.scalar(&format!("{prefix}/iter"))?;
    opt.set_iteration(iter as usize);
    let momentum_prefix = format!("{prefix}/momentum/");
    let names: Vec<String> = bag
        .names()
        .filter(|n| n.starts_with(&momentum_prefix))
        .map(|n| n.to_string())
        .collect();
    for full in names {
        let (_, data) = bag.require(&full)?;
        let param = full[momentum_prefix.len()..].to_string();
        opt.set_velocity(&param, data.to_vec());
    }
    Ok(())
}

/// Adam moments and the step counter, under `{prefix}/…`.
pub fn pack_adam<T: Real>(
    bag: &mut TensorBag<T>,
    prefix: &str,
    opt: &Adam<T>,
) -> Result<(), CheckpointError> {
    bag.insert_scalar(format!("{prefix}/steps"), opt.steps() as f64)?;
    for (name, m, v) in opt.moments() {
        bag.insert(format!("{prefix}/m/{name}"), vec![m.len()], m.to_vec())?;
        bag.insert(format!("{prefix}/v/{name}"), vec![v.len()], v.to_vec())?;
    }
    Ok(())
}

pub fn unpack_adam<T: Real>(
    bag: &TensorBag<T>,
    prefix: &str,
    opt: &mut Adam<T>,
) -> Result<(), CheckpointError> {
    let steps = bag.scalar(&format!("{prefix}/steps"))?;
    opt.set_steps(steps as usize);
    let m_prefix = format!("{prefix}/m/");
    let names: Vec<String> = bag
        .names()
        .filter(|n| n.starts_with(&m_prefix))
        .map(|n| n.to_string())
        .collect();
    for full in names {
        let param = full[m_prefix.len()..].to_string();
        let (_, m) = bag.require(&full)?;
        let (_, v) = bag.require(&format!("{prefix}/v/{param}"))?;
        opt.set_moments(&param, m.to_vec(), v.to_vec());
    }
    Ok(())
}

/// Dictionary rows as `{prefix}/<class>/<slot>` plus capacity and dimension.
pub fn pack_dictionary<T: Real>(
    bag: &mut TensorBag<T>,
    prefix: &str,
    dict: &FeatureDictionary<T>,
) -> Result<(), CheckpointError> {
    bag.insert_scalar(format!("{prefix}/capacity"), dict.capacity() as f64)?;
    bag.insert_scalar(format!("{prefix}/dim"), dict.dim() as f64)?;
    for (class, slot, row) in dict.entries() {
        bag.insert(format!("{prefix}/{class}/{slot}"), vec![row.len()], row.to_vec())?;
    }
    Ok(())
}

/// Rebuild a dictionary, preserving eviction order (slot 0 is oldest).
pub fn unpack_dictionary<T: Real>(
    bag: &TensorBag<T>,
    prefix: &str,
) -> Result<FeatureDictionary<T>, CheckpointError> {
    let capacity = bag.scalar(&format!("{prefix}/capacity"))? as usize;
    let dim = bag.scalar(&format!("{prefix}/dim"))? as usize;
    let mut dict = FeatureDictionary::new(capacity, dim)?;
    // Entries were written classes-ascending / slots-ascending; sorting by
    // (class, slot) reassembles each queue oldest-first regardless of the
    // order the names come back in.
    let row_prefix = format!("{prefix}/");
    let mut pending: Vec<(u8, usize, Vec<T>)> = Vec::new();
    for name in bag.names() {
        let Some(rest) = name.strip_prefix(&row_prefix) else { continue };
        let mut parts = rest.splitn(2, '/');
        let (Some(class), Some(slot)) = (parts.next(), parts.next()) else { continue };
        let (Ok(class), Ok(slot)) = (class.parse::<u8>(), slot.parse::<usize>()) else {
            continue;
        };
        let (_, data) = bag.require(name)?;
        pending.push((class, slot, data.to_vec()));
    }
    pending.sort_by_key(|(c, s, _)| (*c, *s));
    for (class, slot, row) in pending {
        let held = dict.enqueue(class, [row])?;
        if held != slot + 1 {
            return Err(CheckpointError::BadValue {
                name: format!("{prefix}/{class}/{slot}"),
                detail: format!("slot indices are not contiguous (bucket holds {held})"),
            });
        }
    }
    Ok(dict)
}
