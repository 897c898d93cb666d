//! Step-derivative activation kernels: exact forward, segment codes, packed
//! backward state and the activation-level gradient gap.

mod packing;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::{ActivationKind, CombinationParams};
use crate::error::{Error, Result};

pub use packing::PackedCodes;

/// Elements per parallel work unit. A multiple of 8 so chunks never share a byte.
const CHUNK: usize = 1 << 14;

/// Floating-point element types accepted by the kernels.
pub trait Real: Copy + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Real for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

/// Thresholds `c` and cumulative slopes `s` of a step derivative.
///
/// `levels.len() == thresholds.len() + 1 == 2^k`, `s_0 = 0`, `s_last = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLevels {
    thresholds: Vec<f64>,
    levels: Vec<f64>,
}

impl StepLevels {
    pub fn new(thresholds: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        let n = levels.len();
        if n < 2 || !n.is_power_of_two() || n > 256 {
            return Err(Error::InvalidParams(format!("level count must be a power of two in 2..=256, got {n}")));
        }
        if thresholds.len() + 1 != n {
            return Err(Error::InvalidParams(format!(
                "{n} levels need {} thresholds, got {}",
                n - 1,
                thresholds.len()
            )));
        }
        if thresholds.iter().chain(&levels).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("thresholds and levels must be finite".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParams("thresholds must be strictly increasing".into()));
        }
        if levels[0] != 0.0 {
            return Err(Error::InvalidParams(format!("first level s_0 must be 0, got {}", levels[0])));
        }
        if levels[n - 1] != 1.0 {
            return Err(Error::InvalidParams(format!("last level s_last must be 1, got {}", levels[n - 1])));
        }
        Ok(Self { thresholds, levels })
    }

    pub fn from_params(params: &CombinationParams) -> Self {
        // CombinationParams already guarantees every invariant checked in `new`.
        Self { thresholds: params.c.clone(), levels: params.levels() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad levels file: {e}")))?;
        Self::new(raw.thresholds, raw.levels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Bit budget `k`.
    pub fn bits(&self) -> u8 {
        self.levels.len().trailing_zeros() as u8
    }

    /// Smallest packable width holding `k` bits.
    pub fn storage_width(&self) -> u8 {
        self.bits().next_power_of_two()
    }

    /// Number of thresholds strictly below `x`; NaN maps to 0.
    #[inline]
    pub fn code(&self, x: f64) -> u8 {
        self.thresholds.iter().filter(|&&c| x > c).count() as u8
    }
}

/// Result of [`forward_encode`].
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub output: Vec<T>,
    pub codes: PackedCodes,
    /// Inputs that were NaN or infinite.
    pub non_finite: usize,
}

/// The plain activation forward, used as the equivalence oracle.
pub fn plain_forward<T: Real>(kind: ActivationKind, input: &[T]) -> Vec<T> {
    input.par_iter().with_min_len(CHUNK).map(|&x| T::from_f64(kind.eval(x.to_f64()))).collect()
}

/// Exact forward plus packed segment codes. Non-finite inputs never fail; they
/// are counted and coded by the comparison rule.
pub fn forward_encode<T: Real>(kind: ActivationKind, levels: &StepLevels, input: &[T]) -> Result<Encoded<T>> {
    let width = levels.storage_width();
    let output = plain_forward(kind, input);
    let codes = encode_codes(levels, input);
    let non_finite = input.par_iter().with_min_len(CHUNK).filter(|x| !x.to_f64().is_finite()).count();
    let codes = PackedCodes::pack(&codes, width)?;
    Ok(Encoded { output, codes, non_finite })
}

/// Unpacked segment codes for every element.
pub fn encode_codes<T: Real>(levels: &StepLevels, input: &[T]) -> Vec<u8> {
    input.par_iter().with_min_len(CHUNK).map(|&x| levels.code(x.to_f64())).collect()
}

fn check_count(codes: usize, upstream: usize) -> Result<()> {
    if codes == upstream {
        Ok(())
    } else {
        Err(Error::Shape(format!("{codes} codes but {upstream} upstream gradients")))
    }
}

/// `grad_in[j] = s[code(j)] · upstream[j]` from packed codes.
pub fn backward<T: Real>(codes: &PackedCodes, levels: &StepLevels, upstream: &[T]) -> Result<Vec<T>> {
    check_count(codes.len(), upstream.len())?;
    let s = &levels.levels;
    if codes.bits() == 2 && s.len() == 4 {
        let table = [s[0], s[1], s[2], s[3]];
        let bytes = codes.bytes();
        let mut out = vec![T::from_f64(0.0); upstream.len()];
        out.par_chunks_mut(CHUNK).zip(upstream.par_chunks(CHUNK)).enumerate().for_each(|(ci, (o, g))| {
            let base = ci * CHUNK / 4;
            for (j, (oj, gj)) in o.iter_mut().zip(g).enumerate() {
                let code = (bytes[base + j / 4] >> (2 * (j % 4))) & 3;
                *oj = T::from_f64(table[usize::from(code)] * gj.to_f64());
            }
        });
        return Ok(out);
    }
    upstream
        .par_iter()
        .with_min_len(CHUNK)
        .enumerate()
        .map(|(j, g)| {
            let code = codes.get(j);
            s.get(usize::from(code))
                .map(|level| T::from_f64(level * g.to_f64()))
                .ok_or(Error::Encoding { code, bits: levels.bits() })
        })
        .collect()
}

/// Same as [`backward`] from an unpacked code vector.
pub fn backward_unpacked<T: Real>(codes: &[u8], levels: &StepLevels, upstream: &[T]) -> Result<Vec<T>> {
    check_count(codes.len(), upstream.len())?;
    let s = &levels.levels;
    if let Some(&bad) = codes.iter().find(|&&c| usize::from(c) >= s.len()) {
        return Err(Error::Encoding { code: bad, bits: levels.bits() });
    }
    Ok(codes
        .par_iter()
        .zip(upstream.par_iter())
        .with_min_len(CHUNK)
        .map(|(&c, g)| T::from_f64(s[usize::from(c)] * g.to_f64()))
        .collect())
}

/// `‖(s_code − h')(x) ⊙ g‖₂ / ‖h'(x) ⊙ g‖₂`, or `None` when the exact gradient is zero.
pub fn gradient_gap<T: Real>(
    kind: ActivationKind,
    levels: &StepLevels,
    input: &[T],
    upstream: &[T],
) -> Result<Option<f64>> {
    if input.len() != upstream.len() {
        return Err(Error::Shape(format!("{} inputs but {} upstream gradients", input.len(), upstream.len())));
    }
    let (num, den) = input
        .par_iter()
        .zip(upstream.par_iter())
        .with_min_len(CHUNK)
        .map(|(x, g)| {
            let (x, g) = (x.to_f64(), g.to_f64());
            let exact = kind.deriv(x) * g;
            let approx = levels.levels[usize::from(levels.code(x))] * g;
            ((approx - exact).powi(2), exact * exact)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    if den == 0.0 {
        Ok(None)
    } else {
        Ok(Some((num / den).sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::published;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gelu_levels() -> StepLevels {
        StepLevels::from_params(&published::gelu())
    }

    #[test]
    fn encode_examples() {
        let l = gelu_levels();
        let e = forward_encode(ActivationKind::Gelu, &l, &[0.0f64]).unwrap();
        assert_eq!(e.output, vec![0.0]);
        assert_eq!(e.codes.unpack(), vec![2]);
        let e = forward_encode(ActivationKind::Gelu, &l, &[-100.0f64, 100.0]).unwrap();
        assert_eq!(e.codes.unpack(), vec![0, 3]);
        assert_eq!(e.non_finite, 0);
    }

    #[test]
    fn non_finite_inputs_are_counted() {
        let l = gelu_levels();
        let e = forward_encode(ActivationKind::Gelu, &l, &[f64::NAN, f64::INFINITY, 1.0]).unwrap();
        assert_eq!(e.non_finite, 2);
        assert_eq!(e.codes.unpack(), vec![0, 3, 2]);
        assert!(e.output[0].is_nan());
    }

    #[test]
    fn f32_forward_matches_plain() {
        let l = StepLevels::from_params(&published::silu());
        let x: Vec<f32> = (0..1000).map(|i| (i as f32 - 500.0) / 50.0).collect();
        let e = forward_encode(ActivationKind::Silu, &l, &x).unwrap();
        assert_eq!(e.output, plain_forward(ActivationKind::Silu, &x));
    }

    #[test]
    fn backward_examples() {
        let l = gelu_levels();
        let g = [0.5f64, -2.0, 3.0];
        let zeros = PackedCodes::pack(&[0, 0, 0], 2).unwrap();
        assert_eq!(backward(&zeros, &l, &g).unwrap(), vec![0.0; 3]);
        let threes = PackedCodes::pack(&[3, 3, 3], 2).unwrap();
        assert_eq!(backward(&threes, &l, &g).unwrap(), g.to_vec());
        let two = PackedCodes::pack(&[2], 2).unwrap();
        let v = backward(&two, &l, &[2.0f64]).unwrap()[0];
        assert!((v - 2.0974811901711024).abs() < 1e-15);
        assert!(matches!(backward(&two, &l, &g), Err(Error::Shape(_))));
    }

    #[test]
    fn levels_validation_names_the_violation() {
        let err = StepLevels::new(vec![-1.0, 0.0, 1.0], vec![0.0, 0.3, 0.9, 0.99]).unwrap_err();
        assert!(err.to_string().contains("s_last"), "{err}");
        assert!(StepLevels::new(vec![0.0, -1.0, 1.0], vec![0.0, 0.3, 0.9, 1.0]).is_err());
        assert!(StepLevels::new(vec![0.0, 1.0], vec![0.0, 0.5, 1.0]).is_err());
        let ok = StepLevels::from_json(r#"{"thresholds": [-1, 0, 1], "levels": [0, 0.25, 0.5, 1]}"#).unwrap();
        assert_eq!(ok.bits(), 2);
        assert!(StepLevels::from_json(r#"{"thresholds": [-1, 0, 1], "levels": [0, 0.25, 0.5, 2]}"#).is_err());
    }

    #[test]
    fn gradient_gap_examples() {
        let l = gelu_levels();
        let ones = vec![1.0f64; 64];
        let gap = gradient_gap(ActivationKind::Gelu, &l, &vec![100.0; 64], &ones).unwrap().unwrap();
        assert!(gap < 1e-10);
        assert_eq!(gradient_gap(ActivationKind::Gelu, &l, &vec![-100.0; 64], &ones).unwrap(), None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let gap = gradient_gap(ActivationKind::Gelu, &l, &x, &vec![1.0; x.len()]).unwrap().unwrap();
        assert!(gap > 0.0 && gap < 0.5, "{gap}");
    }

    #[test]
    fn wider_codes_use_generic_path() {
        let params = crate::approximator::CombinationParams::new(
            3,
            vec![0.01, 0.02, 0.1, 0.3, 0.3, 0.2],
            vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0],
            crate::approximator::ObjectiveMode::PrimitiveL2,
            published::gelu().interval,
        )
        .unwrap();
        let l = StepLevels::from_params(&params);
        assert_eq!((l.bits(), l.storage_width()), (3, 4));
        let x = [-5.0f64, -0.5, 0.5, 5.0];
        let e = forward_encode(ActivationKind::Gelu, &l, &x).unwrap();
        let g = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(backward(&e.codes, &l, &g).unwrap(), backward_unpacked(&e.codes.unpack(), &l, &g).unwrap());
    }

    proptest! {
        #[test]
        fn packed_and_unpacked_backward_agree(
            pairs in prop::collection::vec((-8.0f64..8.0, -4.0f64..4.0), 0..40_000)
        ) {
            let l = gelu_levels();
            let (x, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let e = forward_encode(ActivationKind::Gelu, &l, &x).unwrap();
            let packed = backward(&e.codes, &l, &g).unwrap();
            prop_assert_eq!(&packed, &backward_unpacked(&e.codes.unpack(), &l, &g).unwrap());
            let p = published::gelu();
            for ((xi, gi), v) in x.iter().zip(&g).zip(&packed) {
                prop_assert_eq!(*v, gi * p.deriv(*xi).0);
            }
        }

        #[test]
        fn codes_are_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let l = gelu_levels();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(l.code(lo) <= l.code(hi));
        }
    }
}
