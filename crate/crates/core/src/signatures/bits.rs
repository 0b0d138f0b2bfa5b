use crate::error::{Error, Result};

/// A `bits`-wide code packed LSB-first into 64-bit words.
///
/// Bit `j` lives in word `j / 64` at position `j % 64`. Bits past `bits` in
/// the last word are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Signature {
    bits: usize,
    words: Vec<u64>,
}

#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

#[inline]
pub(crate) fn tail_mask(bits: usize) -> u64 {
    match bits % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl Signature {
    pub fn zeros(bits: usize) -> Self {
        Self {
            bits,
            words: vec![0; words_for(bits)],
        }
    }

    /// Wraps raw words, rejecting stray bits above `bits`.
    pub fn from_words(bits: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(bits) {
            return Err(Error::DimensionMismatch {
                context: "signature word count",
                expected: words_for(bits),
                actual: words.len(),
            });
        }
        if let Some(&last) = words.last() {
            if last & !tail_mask(bits) != 0 {
                return Err(Error::Format(format!(
                    "signature of {bits} bits has bits set past its width"
                )));
            }
        }
        Ok(Self { bits, words })
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut sig = Self::zeros(bits.len());
        for (j, &b) in bits.iter().enumerate() {
            if b {
                sig.set(j);
            }
        }
        sig
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, j: usize) -> bool {
        debug_assert!(j < self.bits);
        self.words[j / 64] >> (j % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, j: usize) {
        debug_assert!(j < self.bits);
        self.words[j / 64] |= 1u64 << (j % 64);
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

pub fn pack_bits(bits: &[bool], width: usize) -> Result<Signature> {
    if bits.len() != width {
        return Err(Error::DimensionMismatch {
            context: "pack_bits length",
            expected: width,
            actual: bits.len(),
        });
    }
    Ok(Signature::from_bits(bits))
}

pub fn unpack_bits(sig: &Signature) -> Vec<bool> {
    (0..sig.bits()).map(|j| sig.get(j)).collect()
}

#[inline]
pub(crate) fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Number of differing bits, `popcount(a XOR b)` summed over words.
pub fn hamming(a: &Signature, b: &Signature) -> Result<u32> {
    if a.bits() != b.bits() {
        return Err(Error::DimensionMismatch {
            context: "hamming signature width",
            expected: a.bits(),
            actual: b.bits(),
        });
    }
    Ok(hamming_words(a.words(), b.words()))
}
