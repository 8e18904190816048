//! SHA-256 fingerprints of tensor collections, used for provenance headers
//! and the head/teacher immutability checks.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

fn update_with_tensor<T: Scalar>(h: &mut Sha256, name: &str, tensor: &Tensor<T>) {
    h.update(name.as_bytes());
    h.update([0u8]);
    for &d in tensor.shape() {
        h.update((d as u64).to_le_bytes());
    }
    match T::DTYPE {
        Dtype::F32 => {
            for &v in tensor.data() {
                h.update((v.to_f64x() as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in tensor.data() {
                h.update(v.to_f64x().to_le_bytes());
            }
        }
    }
}

pub fn hex_digest(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Hash one named tensor.
pub fn tensor_hash<T: Scalar>(name: &str, tensor: &Tensor<T>) -> String {
    let mut h = Sha256::new();
    update_with_tensor(&mut h, name, tensor);
    hex_digest(&h.finalize())
}

/// Hash a name -> tensor map in sorted name order.
pub fn tensor_map_hash<T: Scalar>(tensors: &BTreeMap<String, Tensor<T>>) -> String {
    let mut h = Sha256::new();
    for (name, tensor) in tensors {
        update_with_tensor(&mut h, name, tensor);
    }
    hex_digest(&h.finalize())
}

/// Per-tensor hashes, sorted by name; byte-for-byte comparisons between two
/// model states compare these maps.
pub fn per_tensor_hashes<T: Scalar>(tensors: &BTreeMap<String, Tensor<T>>) -> BTreeMap<String, String> {
    tensors
        .iter()
        .map(|(name, t)| (name.clone(), tensor_hash(name, t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_with_any_element() {
        let a = Tensor::<f32>::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = a.clone();
        b.data_mut()[1] = 2.0 + 2.0 * f32::EPSILON;
        assert_ne!(tensor_hash("w", &a), tensor_hash("w", &b));
        assert_eq!(tensor_hash("w", &a), tensor_hash("w", &a.clone()));
    }

    #[test]
    fn hash_depends_on_shape() {
        let a = Tensor::<f32>::from_vec(vec![2, 2], vec![0.0; 4]).unwrap();
        let b = Tensor::<f32>::from_vec(vec![4], vec![0.0; 4]).unwrap();
        assert_ne!(tensor_hash("w", &a), tensor_hash("w", &b));
    }
}
