//! LSB-first bit packing of per-step latent vectors.

use crate::error::{Result, VredError};

pub fn bytes_per_step(latent_dim: usize) -> usize {
    latent_dim.div_ceil(8)
}

/// Packs each step into `ceil(D/8)` bytes; coordinate 0 is bit 0 of the
/// step's first byte. Unused high bits of the last byte are zero.
pub fn pack_bits(steps: &[Vec<bool>], latent_dim: usize) -> Result<Vec<u8>> {
    let per = bytes_per_step(latent_dim);
    let mut out = vec![0u8; per * steps.len()];
    for (t, bits) in steps.iter().enumerate() {
        if bits.len() != latent_dim {
            return Err(VredError::Format(format!(
                "step {t} has {} bits, expected {latent_dim}",
                bits.len()
            )));
        }
        let chunk = &mut out[t * per..(t + 1) * per];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                chunk[i / 8] |= 1 << (i % 8);
            }
        }
    }
    Ok(out)
}

pub fn unpack_bits(payload: &[u8], latent_dim: usize, steps: usize) -> Result<Vec<Vec<bool>>> {
    let per = bytes_per_step(latent_dim);
    if latent_dim == 0 || payload.len() != per * steps {
        return Err(VredError::Format(format!(
            "payload is {} bytes, expected {} for {steps} steps of {latent_dim} bits",
            payload.len(),
            per * steps
        )));
    }
    Ok(payload
        .chunks(per)
        .map(|chunk| {
            (0..latent_dim)
                .map(|i| chunk[i / 8] >> (i % 8) & 1 == 1)
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lsb_first() {
        let bits = vec![vec![true, false, true, false, false, false, false, false]];
        assert_eq!(pack_bits(&bits, 8).unwrap(), vec![0x05]);
        assert_eq!(pack_bits(&[vec![false; 13]], 13).unwrap(), vec![0, 0]);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(unpack_bits(&[0, 0, 0], 8, 2).is_err());
        assert!(pack_bits(&[vec![true; 7]], 8).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(d in 1usize..40, steps in prop::collection::vec(prop::collection::vec(any::<bool>(), 40), 0..6)) {
            let steps: Vec<Vec<bool>> = steps.into_iter().map(|s| s[..d].to_vec()).collect();
            let packed = pack_bits(&steps, d).unwrap();
            prop_assert_eq!(packed.len(), bytes_per_step(d) * steps.len());
            prop_assert_eq!(unpack_bits(&packed, d, steps.len()).unwrap(), steps);
        }
    }
}
