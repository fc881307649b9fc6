//! Named-tensor archives in the safetensors layout, used both for
//! pre-trained backbone weights and for training checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::{Dtype, SafeTensors};

use crate::nn::Parameterized;
use crate::{Error, Result, Scalar};

/// An ordered name → tensor mapping plus string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive<T> {
    pub tensors: BTreeMap<String, ArrayD<T>>,
    pub metadata: BTreeMap<String, String>,
}

impl<T> Default for TensorArchive<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }
}

fn f16_to_f32(bits: u16) -> f32 {
    let sign = ((bits >> 15) & 1) as u32;
    let exp = ((bits >> 10) & 0x1f) as u32;
    let frac = (bits & 0x3ff) as u32;
    let out = match (exp, frac) {
        (0, 0) => sign << 31,
        (0, f) => {
            // subnormal: renormalise
            let mut e = 127 - 15 + 1;
            let mut f = f;
            while f & 0x400 == 0 {
                f <<= 1;
                e -= 1;
            }
            (sign << 31) | ((e as u32) << 23) | ((f & 0x3ff) << 13)
        }
        (0x1f, f) => (sign << 31) | (0xff << 23) | (f << 13),
        (e, f) => (sign << 31) | ((e + 127 - 15) << 23) | (f << 13),
    };
    f32::from_bits(out)
}

fn decode<T: Scalar>(dtype: Dtype, bytes: &[u8]) -> Result<Vec<T>> {
    Ok(match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap())))
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|b| {
                let bits = u16::from_le_bytes([b[0], b[1]]) as u32;
                T::lit(f32::from_bits(bits << 16) as f64)
            })
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|b| T::lit(f16_to_f32(u16::from_le_bytes([b[0], b[1]])) as f64))
            .collect(),
        other => {
            return Err(Error::Checkpoint(format!(
                "unsupported tensor dtype {other:?}"
            )))
        }
    })
}

impl<T: Scalar> TensorArchive<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: ArrayD<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.tensors.get(name)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Checkpoint(format!("malformed tensor archive: {e}")))?;
        let (_, meta) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("malformed archive header: {e}")))?;
        let mut out = Self::new();
        for (name, view) in st.tensors() {
            let data = decode::<T>(view.dtype(), view.data())?;
            let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), data)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            out.tensors.insert(name, arr);
        }
        if let Some(m) = meta.metadata() {
            out.metadata = m.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let mut bytes = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
                for &v in t.iter() {
                    v.write_le(&mut bytes);
                }
                (name.clone(), t.shape().to_vec(), bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                safetensors::tensor::TensorView::new(T::DTYPE, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Snapshot parameters and buffers of a module under `prefix`.
    pub fn capture(&mut self, prefix: &str, m: &dyn Parameterized<T>) {
        m.visit(prefix, &mut |name, v| {
            self.tensors.insert(name.to_string(), v.to_owned());
        });
        m.visit_buffers(prefix, &mut |name, v| {
            self.tensors.insert(name.to_string(), v.to_owned());
        });
    }

    /// Copy every parameter and buffer of `m` from the archive; all names
    /// must be present with matching shapes.
    pub fn restore(&self, prefix: &str, m: &mut dyn Parameterized<T>) -> Result<()> {
        let mut offending = Vec::new();
        let mut assign = |name: &str, mut v: ndarray::ArrayViewMutD<'_, T>| match self.tensors.get(name) {
            Some(t) if t.shape() == v.shape() => v.assign(t),
            Some(t) => offending.push(format!("{name} (archive {:?}, model {:?})", t.shape(), v.shape())),
            None => offending.push(format!("{name} (missing)")),
        };
        m.visit_mut(prefix, &mut assign);
        m.visit_buffers_mut(prefix, &mut assign);
        if offending.is_empty() {
            Ok(())
        } else {
            Err(Error::Load { offending })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_preserves_values_and_metadata() {
        let mut a = TensorArchive::<f32>::new();
        a.insert("w", ArrayD::from_shape_fn(IxDyn(&[2, 3]), |i| i[0] as f32 * 0.1 - i[1] as f32));
        a.insert("b", ArrayD::from_elem(IxDyn(&[4]), 1.5f32));
        a.metadata.insert("config".into(), "x = 1".into());
        let b = TensorArchive::<f32>::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        let widened = TensorArchive::<f64>::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(widened.get("b").unwrap()[[0]], 1.5);
    }

    #[test]
    fn half_precision_decoding() {
        assert_eq!(f16_to_f32(0x3c00), 1.0);
        assert_eq!(f16_to_f32(0xc000), -2.0);
        assert_eq!(f16_to_f32(0x0000), 0.0);
        assert!((f16_to_f32(0x0001) - 5.960_464_5e-8).abs() < 1e-12);
    }

    #[test]
    fn garbage_is_a_checkpoint_error() {
        assert!(matches!(
            TensorArchive::<f32>::from_bytes(b"not an archive"),
            Err(Error::Checkpoint(_))
        ));
    }
}
