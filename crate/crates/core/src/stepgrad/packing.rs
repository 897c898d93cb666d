use crate::error::{Error, Result};

/// Bit-packed segment codes, least-significant bits first within each byte.
///
/// Element `j` occupies bits `k·(j mod 8/k) ..` of byte `j·k / 8`. Unused
/// high bits of the final byte are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    bytes: Vec<u8>,
    num_elements: usize,
    bits: u8,
}

pub(crate) fn check_width(bits: u8) -> Result<()> {
    if matches!(bits, 1 | 2 | 4 | 8) {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("packed code width must be 1, 2, 4 or 8 bits, got {bits}")))
    }
}

impl PackedCodes {
    pub fn pack(codes: &[u8], bits: u8) -> Result<Self> {
        check_width(bits)?;
        let limit = 1u16 << bits;
        if let Some(&bad) = codes.iter().find(|&&c| u16::from(c) >= limit) {
            return Err(Error::Encoding { code: bad, bits });
        }
        let per_byte = 8 / usize::from(bits);
        let bytes = codes
            .chunks(per_byte)
            .map(|chunk| chunk.iter().enumerate().fold(0u8, |acc, (i, &c)| acc | (c << (i * usize::from(bits)))))
            .collect();
        Ok(Self { bytes, num_elements: codes.len(), bits })
    }

    /// Wraps an already packed buffer, validating length and padding bits.
    pub fn from_raw(bytes: Vec<u8>, num_elements: usize, bits: u8) -> Result<Self> {
        check_width(bits)?;
        let want = (num_elements * usize::from(bits)).div_ceil(8);
        if bytes.len() != want {
            return Err(Error::Shape(format!("{num_elements} codes of {bits} bits need {want} bytes, got {}", bytes.len())));
        }
        let used = (num_elements * usize::from(bits)) % 8;
        if used != 0 && bytes.last().is_some_and(|b| b >> used != 0) {
            return Err(Error::InvalidParams("trailing padding bits must be zero".into()));
        }
        Ok(Self { bytes, num_elements, bits })
    }

    pub fn unpack(&self) -> Vec<u8> {
        (0..self.num_elements).map(|j| self.get(j)).collect()
    }

    #[inline]
    pub fn get(&self, j: usize) -> u8 {
        let bits = usize::from(self.bits);
        let bit = j * bits;
        let mask = ((1u16 << bits) - 1) as u8;
        (self.bytes[bit / 8] >> (bit % 8)) & mask
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.num_elements
    }

    pub fn is_empty(&self) -> bool {
        self.num_elements == 0
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn storage_bytes(&self) -> u64 {
        self.bytes.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lsb_first_layout() {
        let p = PackedCodes::pack(&[0, 1, 2, 3], 2).unwrap();
        assert_eq!(p.bytes(), &[0xE4]);
        assert_eq!(p.len(), 4);
    }

    #[test]
    fn empty_input() {
        let p = PackedCodes::pack(&[], 2).unwrap();
        assert!(p.bytes().is_empty());
        assert_eq!(p.len(), 0);
    }

    #[test]
    fn partial_final_byte_is_zero_padded() {
        let p = PackedCodes::pack(&[3, 3, 3, 3, 1], 2).unwrap();
        assert_eq!(p.bytes(), &[0xFF, 0x01]);
        assert!(PackedCodes::from_raw(vec![0xFF, 0x11], 5, 2).is_err());
        assert!(PackedCodes::from_raw(vec![0xFF, 0x01], 5, 2).is_ok());
        assert!(PackedCodes::from_raw(vec![0xFF], 5, 2).is_err());
    }

    #[test]
    fn oversized_code_is_an_encoding_error() {
        assert_eq!(PackedCodes::pack(&[0, 4], 2), Err(Error::Encoding { code: 4, bits: 2 }));
        assert!(PackedCodes::pack(&[0], 3).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(codes in prop::collection::vec(0u8..4, 0..2000)) {
            let p = PackedCodes::pack(&codes, 2).unwrap();
            prop_assert_eq!(p.bytes().len(), (codes.len() * 2).div_ceil(8));
            prop_assert_eq!(p.unpack(), codes);
        }

        #[test]
        fn round_trip_other_widths(codes in prop::collection::vec(0u8..16, 0..300)) {
            let p = PackedCodes::pack(&codes, 4).unwrap();
            prop_assert_eq!(p.unpack(), codes.clone());
            let ones: Vec<u8> = codes.iter().map(|c| c & 1).collect();
            prop_assert_eq!(PackedCodes::pack(&ones, 1).unwrap().unpack(), ones);
        }
    }
}
