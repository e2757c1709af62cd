//! Binary dump of one utterance's vectors.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "CPCSREPR"
//!      8     4  dims, u32 little-endian
//!     12     8  count, u64 little-endian
//!     20     4  dtype tag "f32l"
//!     24     …  count × dims float32 little-endian, row-major
//! ```

use cpcseg::diff::Tensor;

pub const MAGIC: &[u8; 8] = b"CPCSREPR";
pub const DTYPE: &[u8; 4] = b"f32l";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let (count, dims) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(24 + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims as u32).to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    out.extend_from_slice(DTYPE);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_then_row_major_values() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, -0.5]).unwrap();
        let b = encode(&t);
        assert_eq!(b.len(), 24 + 24);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(b[8..12], 3u32.to_le_bytes());
        assert_eq!(b[12..20], 2u64.to_le_bytes());
        assert_eq!(&b[20..24], DTYPE);
        assert_eq!(b[24..28], 1.0f32.to_le_bytes());
        assert_eq!(b[44..48], (-0.5f32).to_le_bytes());
    }
}
