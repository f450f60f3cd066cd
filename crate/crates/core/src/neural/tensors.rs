//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"WGTN"
//! version  u32 (= 1)
//! count    u32
//! count x { name_len u32, name utf-8, rows u32, cols u32, rows*cols f64 }
//! ```

use super::{Matrix, NeuralError, Parameters};

pub const TENSOR_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"WGTN";

pub fn write_tensors(tensors: &[(String, &Matrix)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| NeuralError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_tensors(bytes: &[u8]) -> Result<Vec<(String, Matrix)>, NeuralError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NeuralError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != TENSOR_FORMAT_VERSION {
        return Err(NeuralError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NeuralError::Format("tensor name is not utf-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| NeuralError::Format(format!("tensor {name} too large")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| NeuralError::Format("overflow".into()))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(NeuralError::Format("trailing bytes".into()));
    }
    Ok(out)
}

/// Copies tensors into `target`, requiring identical names, order and shapes.
pub fn load_tensors<P: Parameters>(target: &mut P, tensors: &[(String, Matrix)]) -> Result<(), NeuralError> {
    let names: Vec<(String, (usize, usize))> = target.tensors().into_iter().map(|(n, m)| (n, m.shape())).collect();
    if names.len() != tensors.len() {
        return Err(NeuralError::Format(format!(
            "expected {} tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for ((name, shape), (found, m)) in names.iter().zip(tensors) {
        if name != found || *shape != m.shape() {
            return Err(NeuralError::Format(format!(
                "tensor {found} {:?} does not match expected {name} {shape:?}",
                m.shape()
            )));
        }
    }
    for (dst, (_, src)) in target.tensors_mut().into_iter().zip(tensors) {
        dst.as_mut_slice().copy_from_slice(src.as_slice());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Activation, DenseLayer};
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(rows in 1usize..5, cols in 1usize..5, vals in proptest::collection::vec(any::<f64>(), 25)) {
            let m = Matrix::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap();
            let bytes = write_tensors(&[("t.W".into(), &m)]);
            let back = read_tensors(&bytes).unwrap();
            prop_assert_eq!(&back[0].0, "t.W");
            let a: Vec<u64> = back[0].1.as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = m.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn never_panics_on_garbage(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = read_tensors(&bytes);
        }
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = DenseLayer::new(3, 2, Activation::Linear, &mut rng);
        let mut b = DenseLayer::new(3, 2, Activation::Linear, &mut rng);
        let bytes = write_tensors(&a.tensors());
        load_tensors(&mut b, &read_tensors(&bytes).unwrap()).unwrap();
        assert_eq!(a, b);
        let mut c = DenseLayer::new(2, 2, Activation::Linear, &mut rng);
        assert!(load_tensors(&mut c, &read_tensors(&bytes).unwrap()).is_err());
        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(read_tensors(&truncated).is_err());
    }
}
