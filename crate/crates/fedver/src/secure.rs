//! Masking-based secure summation.
//!
//! Devices clip and fixed-point-encode their parameter vectors, add pairwise
//! pseudorandom masks that cancel in the sum, and submit only masked integer
//! shares. The aggregator learns the sum (and hence the unweighted mean) but
//! nothing about any individual submission. One-shot protocol: every
//! participant must submit; there is no dropout recovery.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{FedverError, Result};
use crate::param::{layout_len, Layout, ParamVector};
use crate::seeding::derive_seed;

/// Fixed-point clip/scale/round codec over a power-of-two modulus.
///
/// The modulus is `2^(bits + ceil(log2 n_devices))`, which guarantees the
/// sum of `n_devices` encoded values never wraps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointCodec {
    pub clip_range: f64,
    pub bits: u32,
    pub n_devices: usize,
}

impl FixedPointCodec {
    pub fn new(clip_range: f64, bits: u32, n_devices: usize) -> Result<Self> {
        let codec = FixedPointCodec {
            clip_range,
            bits,
            n_devices,
        };
        codec.validate()?;
        Ok(codec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_range > 0.0 && self.clip_range.is_finite()) {
            return Err(FedverError::config("codec.clip_range", "must be positive and finite"));
        }
        if self.bits < 1 {
            return Err(FedverError::config("codec.bits", "must be at least 1"));
        }
        if self.n_devices < 1 {
            return Err(FedverError::config("codec.n_devices", "must be at least 1"));
        }
        if self.bits + Self::log2_ceil(self.n_devices) > 63 {
            return Err(FedverError::config(
                "codec.bits",
                "bits + ceil(log2 n_devices) must not exceed 63",
            ));
        }
        Ok(())
    }

    fn log2_ceil(n: usize) -> u32 {
        (n.max(1) as u64).next_power_of_two().trailing_zeros()
    }

    pub fn modulus(&self) -> u64 {
        1u64 << (self.bits + Self::log2_ceil(self.n_devices))
    }

    /// Largest encoded value, `2^bits - 1`.
    pub fn max_code(&self) -> u64 {
        (1u64 << self.bits) - 1
    }

    /// Quantization step, `2R / (2^bits - 1)`.
    pub fn step(&self) -> f64 {
        2.0 * self.clip_range / self.max_code() as f64
    }

    /// Clips each coordinate to `[-R, R]` and maps it affinely onto
    /// `[0, 2^bits - 1]`, rounding to nearest.
    pub fn encode_values(&self, values: &[f64]) -> Result<Vec<u64>> {
        let r = self.clip_range;
        values
            .iter()
            .map(|&x| {
                if !x.is_finite() {
                    return Err(FedverError::invalid("cannot encode non-finite value"));
                }
                let clipped = x.clamp(-r, r);
                Ok((((clipped + r) / (2.0 * r)) * self.max_code() as f64).round() as u64)
            })
            .collect()
    }

    pub fn encode(&self, v: &ParamVector) -> Result<Vec<u64>> {
        self.encode_values(v.values())
    }

    pub fn decode_value(&self, code: u64) -> f64 {
        code as f64 / self.max_code() as f64 * 2.0 * self.clip_range - self.clip_range
    }

    /// Fraction of coordinates that the encoder would clip.
    pub fn clip_fraction(&self, values: &[f64]) -> f64 {
        if values.is_empty() {
            return 0.0;
        }
        let clipped = values
            .iter()
            .filter(|v| v.abs() > self.clip_range)
            .count();
        clipped as f64 / values.len() as f64
    }
}

/// Shared 64-bit seed per unordered device pair; a stand-in for key
/// agreement between mutually distrustful devices.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseSeedMatrix {
    seeds: BTreeMap<(u64, u64), u64>,
    device_ids: Vec<u64>,
}

impl PairwiseSeedMatrix {
    pub fn seed(&self, u: u64, v: u64) -> Option<u64> {
        self.seeds.get(&(u.min(v), u.max(v))).copied()
    }

    pub fn device_ids(&self) -> &[u64] {
        &self.device_ids
    }

    pub fn n_pairs(&self) -> usize {
        self.seeds.len()
    }

    pub fn contains_device(&self, device_id: u64) -> bool {
        self.device_ids.contains(&device_id)
    }
}

/// Derives the symmetric pair seeds for a round from the round seed.
pub fn setup_pairwise_seeds(device_ids: &[u64], round_seed: u64) -> Result<PairwiseSeedMatrix> {
    if device_ids.len() < 2 {
        return Err(FedverError::invalid(
            "secure aggregation needs at least 2 devices",
        ));
    }
    let mut sorted = device_ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != device_ids.len() {
        return Err(FedverError::invalid("duplicate device ids"));
    }
    let mut seeds = BTreeMap::new();
    for (i, &u) in sorted.iter().enumerate() {
        for &v in &sorted[i + 1..] {
            seeds.insert((u, v), derive_seed("fedver.pairseed.v1", &[round_seed, u, v]));
        }
    }
    Ok(PairwiseSeedMatrix {
        seeds,
        device_ids: sorted,
    })
}

/// Counter-mode keyed-hash PRG, fixed and versioned: block i of the stream
/// is SHA-256("fedver.prg.v1" || seed || i), consumed as little-endian u64
/// words reduced modulo the (power-of-two) modulus.
pub fn prg_stream(seed: u64, length: usize, modulus: u64) -> Vec<u64> {
    debug_assert!(modulus.is_power_of_two());
    let mask = modulus - 1;
    let mut out = Vec::with_capacity(length);
    let mut block: u64 = 0;
    while out.len() < length {
        let mut hasher = Sha256::new();
        hasher.update(b"fedver.prg.v1");
        hasher.update(seed.to_le_bytes());
        hasher.update(block.to_le_bytes());
        let digest = hasher.finalize();
        for chunk in digest.chunks_exact(8) {
            if out.len() == length {
                break;
            }
            out.push(u64::from_le_bytes(chunk.try_into().unwrap()) & mask);
        }
        block += 1;
    }
    out
}

/// Fixed-point-encoded, pairwise-masked submission.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedShare {
    pub device_id: u64,
    pub round_id: u64,
    pub masked_values: Vec<u64>,
}

impl MaskedShare {
    pub fn len(&self) -> usize {
        self.masked_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_values.is_empty()
    }

    /// Wire format: version, round id, device id, length, modulus, then the
    /// values little-endian at fixed width `ceil(modulus bits / 8)` bytes.
    pub fn to_bytes(&self, modulus: u64) -> Vec<u8> {
        let width = Self::value_width(modulus);
        let mut out = Vec::new();
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&self.round_id.to_le_bytes());
        out.extend_from_slice(&self.device_id.to_le_bytes());
        out.extend_from_slice(&(self.masked_values.len() as u64).to_le_bytes());
        out.extend_from_slice(&modulus.to_le_bytes());
        for &v in &self.masked_values {
            out.extend_from_slice(&v.to_le_bytes()[..width]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(MaskedShare, u64)> {
        let header = 2 + 8 + 8 + 8 + 8;
        if bytes.len() < header {
            return Err(FedverError::invalid("truncated masked share"));
        }
        let version = u16::from_le_bytes(bytes[0..2].try_into().unwrap());
        if version != 1 {
            return Err(FedverError::invalid("unsupported masked share version"));
        }
        let round_id = u64::from_le_bytes(bytes[2..10].try_into().unwrap());
        let device_id = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
        let length = u64::from_le_bytes(bytes[18..26].try_into().unwrap()) as usize;
        let modulus = u64::from_le_bytes(bytes[26..34].try_into().unwrap());
        if modulus < 2 || !modulus.is_power_of_two() {
            return Err(FedverError::invalid("masked share modulus must be a power of two"));
        }
        let width = Self::value_width(modulus);
        if bytes.len() != header + length * width {
            return Err(FedverError::invalid("masked share length mismatch"));
        }
        let mut masked_values = Vec::with_capacity(length);
        for i in 0..length {
            let mut buf = [0u8; 8];
            buf[..width].copy_from_slice(&bytes[header + i * width..header + (i + 1) * width]);
            let v = u64::from_le_bytes(buf);
            if v >= modulus {
                return Err(FedverError::invalid("masked share value exceeds modulus"));
            }
            masked_values.push(v);
        }
        Ok((
            MaskedShare {
                device_id,
                round_id,
                masked_values,
            },
            modulus,
        ))
    }

    fn value_width(modulus: u64) -> usize {
        let bits = 64 - (modulus - 1).leading_zeros() as usize;
        bits.div_ceil(8)
    }
}

/// Adds the device's net pairwise mask to its encoded vector:
/// `masked[i] = encoded[i] + Σ_{v>u} PRG(s_uv)[i] - Σ_{v<u} PRG(s_uv)[i]
/// (mod modulus)`.
pub fn mask(
    codec: &FixedPointCodec,
    encoded: &[u64],
    device_id: u64,
    seeds: &PairwiseSeedMatrix,
    round_id: u64,
) -> Result<MaskedShare> {
    if !seeds.contains_device(device_id) {
        return Err(FedverError::device(device_id, "absent from pairwise seed matrix"));
    }
    let modulus = codec.modulus();
    if let Some(&bad) = encoded.iter().find(|&&e| e > codec.max_code()) {
        return Err(FedverError::device(
            device_id,
            format!("encoded value {bad} exceeds 2^bits - 1"),
        ));
    }
    let mut masked: Vec<u64> = encoded.iter().map(|&e| e % modulus).collect();
    for &other in seeds.device_ids() {
        if other == device_id {
            continue;
        }
        let seed = seeds.seed(device_id, other).unwrap();
        let stream = prg_stream(seed, masked.len(), modulus);
        if other > device_id {
            for (m, s) in masked.iter_mut().zip(&stream) {
                *m = (*m + s) % modulus;
            }
        } else {
            for (m, s) in masked.iter_mut().zip(&stream) {
                *m = (*m + modulus - s) % modulus;
            }
        }
    }
    Ok(MaskedShare {
        device_id,
        round_id,
        masked_values: masked,
    })
}

/// Sums the shares modulo the modulus (masks cancel exactly), decodes the
/// fixed-point sum, and divides by the participant count: the unweighted
/// mean of the clipped inputs, within one quantization step per coordinate.
///
/// This function sees only [`MaskedShare`] values; raw or merely encoded
/// vectors never reach the aggregator.
pub fn aggregate(
    codec: &FixedPointCodec,
    shares: &[MaskedShare],
    layout: &Layout,
) -> Result<ParamVector> {
    if shares.len() != codec.n_devices {
        return Err(FedverError::invalid(format!(
            "expected shares from all {} participants, got {}",
            codec.n_devices,
            shares.len()
        )));
    }
    let expected_len = layout_len(layout);
    let mut seen = std::collections::BTreeSet::new();
    for share in shares {
        if share.len() != expected_len {
            return Err(FedverError::device(
                share.device_id,
                format!("share length {} does not match round parameter count {expected_len}", share.len()),
            ));
        }
        if !seen.insert(share.device_id) {
            return Err(FedverError::device(share.device_id, "duplicate share"));
        }
    }
    let modulus = codec.modulus();
    let n = shares.len() as f64;
    let mut sums = vec![0u64; expected_len];
    for share in shares {
        for (acc, &v) in sums.iter_mut().zip(&share.masked_values) {
            *acc = (*acc + v) % modulus;
        }
    }
    let values = sums
        .into_iter()
        .map(|s| {
            // Sum of n encoded values cannot wrap, so s is the exact
            // fixed-point sum. Mean = (s * step - n * R) / n.
            (s as f64 / codec.max_code() as f64 * 2.0 * codec.clip_range
                - n * codec.clip_range)
                / n
        })
        .collect();
    ParamVector::new(layout.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::LayoutEntry;
    use rand::Rng;

    fn codec16(n: usize) -> FixedPointCodec {
        FixedPointCodec::new(1.0, 16, n).unwrap()
    }

    fn vec_layout(n: usize) -> Layout {
        vec![LayoutEntry::new("w", vec![n])]
    }

    #[test]
    fn zeros_encode_to_midpoint() {
        let codec = codec16(2);
        let encoded = codec.encode_values(&[0.0; 5]).unwrap();
        assert!(encoded.iter().all(|&e| e == 32768));
        for &e in &encoded {
            assert!(codec.decode_value(e).abs() <= codec.step() / 2.0);
        }
    }

    #[test]
    fn clip_endpoints_hit_code_range() {
        let codec = codec16(2);
        assert_eq!(codec.encode_values(&[1.0]).unwrap()[0], 65535);
        assert_eq!(codec.encode_values(&[-1.0]).unwrap()[0], 0);
        assert_eq!(codec.encode_values(&[7.5]).unwrap()[0], 65535);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let codec = codec16(2);
        assert!(codec.encode_values(&[f64::INFINITY]).is_err());
        assert!(codec.encode_values(&[f64::NAN]).is_err());
    }

    #[test]
    fn roundtrip_error_within_half_step() {
        let codec = codec16(2);
        let mut rng = crate::seeding::stream_rng("secure.test.roundtrip", &[0]);
        let values: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let encoded = codec.encode_values(&values).unwrap();
        let bound = codec.step() / 2.0;
        for (&x, &e) in values.iter().zip(&encoded) {
            assert!((codec.decode_value(e) - x).abs() <= bound + 1e-15);
        }
    }

    #[test]
    fn modulus_leaves_room_for_the_sum() {
        for n in [2usize, 3, 5, 10, 100] {
            let codec = codec16(n);
            assert!((n as u64) * codec.max_code() < codec.modulus(), "n = {n}");
        }
    }

    #[test]
    fn seed_matrix_is_symmetric_with_correct_pair_count() {
        let seeds = setup_pairwise_seeds(&[0, 1], 42).unwrap();
        assert_eq!(seeds.n_pairs(), 1);
        assert_eq!(seeds.seed(0, 1), seeds.seed(1, 0));

        let seeds = setup_pairwise_seeds(&[0, 1, 2, 3, 4], 42).unwrap();
        assert_eq!(seeds.n_pairs(), 10);
        let mut values = Vec::new();
        for u in 0..5u64 {
            for v in (u + 1)..5 {
                assert_eq!(seeds.seed(u, v), seeds.seed(v, u));
                values.push(seeds.seed(u, v).unwrap());
            }
        }
        values.sort_unstable();
        values.dedup();
        assert_eq!(values.len(), 10, "pair seeds should all differ");
    }

    #[test]
    fn fewer_than_two_devices_is_an_error() {
        assert!(setup_pairwise_seeds(&[3], 1).is_err());
        assert!(setup_pairwise_seeds(&[], 1).is_err());
    }

    #[test]
    fn two_device_masks_cancel() {
        let codec = codec16(2);
        let seeds = setup_pairwise_seeds(&[0, 1], 7).unwrap();
        let mut rng = crate::seeding::stream_rng("secure.test.cancel", &[1]);
        let x0: Vec<u64> = (0..20).map(|_| rng.gen_range(0..=codec.max_code())).collect();
        let x1: Vec<u64> = (0..20).map(|_| rng.gen_range(0..=codec.max_code())).collect();
        let m0 = mask(&codec, &x0, 0, &seeds, 0).unwrap();
        let m1 = mask(&codec, &x1, 1, &seeds, 0).unwrap();
        let modulus = codec.modulus();
        for i in 0..20 {
            let masked_sum = (m0.masked_values[i] + m1.masked_values[i]) % modulus;
            assert_eq!(masked_sum, (x0[i] + x1[i]) % modulus);
        }
    }

    #[test]
    fn masking_is_reproducible() {
        let codec = codec16(3);
        let seeds = setup_pairwise_seeds(&[0, 1, 2], 9).unwrap();
        let encoded = vec![5u64; 8];
        assert_eq!(
            mask(&codec, &encoded, 1, &seeds, 4).unwrap(),
            mask(&codec, &encoded, 1, &seeds, 4).unwrap()
        );
    }

    #[test]
    fn net_masks_sum_to_zero() {
        for n in [2usize, 3, 7] {
            let codec = codec16(n);
            let ids: Vec<u64> = (0..n as u64).collect();
            let seeds = setup_pairwise_seeds(&ids, 31).unwrap();
            let modulus = codec.modulus();
            let zeros = vec![0u64; 12];
            // Masking a zero vector isolates each device's net mask.
            let mut total = [0u64; 12];
            for &id in &ids {
                let share = mask(&codec, &zeros, id, &seeds, 0).unwrap();
                for (t, &v) in total.iter_mut().zip(&share.masked_values) {
                    *t = (*t + v) % modulus;
                }
            }
            assert!(total.iter().all(|&t| t == 0), "n = {n}");
        }
    }

    #[test]
    fn unknown_device_cannot_mask() {
        let codec = codec16(2);
        let seeds = setup_pairwise_seeds(&[0, 1], 7).unwrap();
        assert!(mask(&codec, &[0, 0], 9, &seeds, 0).is_err());
    }

    fn plaintext_mean(inputs: &[Vec<f64>]) -> Vec<f64> {
        let n = inputs.len() as f64;
        let mut mean = vec![0.0; inputs[0].len()];
        for v in inputs {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        mean
    }

    fn run_protocol(codec: &FixedPointCodec, inputs: &[Vec<f64>], round_seed: u64) -> ParamVector {
        let ids: Vec<u64> = (0..inputs.len() as u64).collect();
        let seeds = setup_pairwise_seeds(&ids, round_seed).unwrap();
        let shares: Vec<MaskedShare> = inputs
            .iter()
            .zip(&ids)
            .map(|(v, &id)| {
                let encoded = codec.encode_values(v).unwrap();
                mask(codec, &encoded, id, &seeds, 0).unwrap()
            })
            .collect();
        aggregate(codec, &shares, &vec_layout(inputs[0].len())).unwrap()
    }

    #[test]
    fn identical_inputs_average_to_themselves() {
        let codec = codec16(4);
        let v = vec![0.25, -0.75, 0.0, 1.0, -1.0];
        let inputs = vec![v.clone(); 4];
        let out = run_protocol(&codec, &inputs, 5);
        for (o, x) in out.values().iter().zip(&v) {
            assert!((o - x).abs() <= codec.step() / 2.0 + 1e-12);
        }
    }

    #[test]
    fn aggregate_matches_plaintext_mean_within_step() {
        let mut rng = crate::seeding::stream_rng("secure.test.agg", &[2]);
        for n in [2usize, 3, 5, 10] {
            let codec = codec16(n);
            for trial in 0..10 {
                let inputs: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..16).map(|_| rng.gen_range(-1.0..=1.0)).collect())
                    .collect();
                let out = run_protocol(&codec, &inputs, trial);
                let mean = plaintext_mean(&inputs);
                for (o, m) in out.values().iter().zip(&mean) {
                    assert!(
                        (o - m).abs() <= codec.step(),
                        "n={n} trial={trial}: |{o} - {m}| > step {}",
                        codec.step()
                    );
                }
            }
        }
    }

    #[test]
    fn tampered_share_shifts_the_output() {
        // The protocol gives privacy, not integrity: a +1 tamper on one
        // coordinate moves the mean by step/n.
        let codec = codec16(3);
        let ids = [0u64, 1, 2];
        let seeds = setup_pairwise_seeds(&ids, 3).unwrap();
        let inputs: Vec<Vec<f64>> = vec![vec![0.1; 4], vec![-0.2; 4], vec![0.4; 4]];
        let mut shares: Vec<MaskedShare> = inputs
            .iter()
            .zip(&ids)
            .map(|(v, &id)| {
                mask(&codec, &codec.encode_values(v).unwrap(), id, &seeds, 0).unwrap()
            })
            .collect();
        let honest = aggregate(&codec, &shares, &vec_layout(4)).unwrap();
        shares[1].masked_values[2] = (shares[1].masked_values[2] + 1) % codec.modulus();
        let tampered = aggregate(&codec, &shares, &vec_layout(4)).unwrap();
        let shift = tampered.values()[2] - honest.values()[2];
        assert!((shift - codec.step() / 3.0).abs() < 1e-12);
        assert_eq!(tampered.values()[0], honest.values()[0]);
    }

    #[test]
    fn aggregate_rejects_missing_or_mismatched_shares() {
        let codec = codec16(3);
        let seeds = setup_pairwise_seeds(&[0, 1, 2], 1).unwrap();
        let encoded = codec.encode_values(&[0.0; 4]).unwrap();
        let shares: Vec<MaskedShare> = (0..2u64)
            .map(|id| mask(&codec, &encoded, id, &seeds, 0).unwrap())
            .collect();
        assert!(aggregate(&codec, &shares, &vec_layout(4)).is_err());

        let mut three: Vec<MaskedShare> = (0..3u64)
            .map(|id| mask(&codec, &encoded, id, &seeds, 0).unwrap())
            .collect();
        three[2].masked_values.pop();
        let err = aggregate(&codec, &three, &vec_layout(4)).unwrap_err();
        assert!(err.to_string().contains("device 2"));
    }

    #[test]
    fn share_wire_roundtrip_is_bit_exact() {
        let codec = codec16(2);
        let seeds = setup_pairwise_seeds(&[0, 1], 11).unwrap();
        let encoded = codec.encode_values(&[0.5, -0.5, 0.0]).unwrap();
        let share = mask(&codec, &encoded, 0, &seeds, 7).unwrap();
        let bytes = share.to_bytes(codec.modulus());
        // 17-bit modulus -> 3 bytes per value.
        assert_eq!(bytes.len(), 34 + 3 * 3);
        let (back, modulus) = MaskedShare::from_bytes(&bytes).unwrap();
        assert_eq!(back, share);
        assert_eq!(modulus, codec.modulus());
        assert_eq!(bytes, back.to_bytes(modulus));
    }

    #[test]
    fn prg_is_deterministic_and_spans_blocks() {
        let a = prg_stream(42, 9, 1 << 20);
        let b = prg_stream(42, 9, 1 << 20);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v < (1 << 20)));
        assert_ne!(prg_stream(43, 9, 1 << 20), a);
    }
}
