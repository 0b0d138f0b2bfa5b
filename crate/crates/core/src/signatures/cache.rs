use std::io::{Read, Write};

use crate::attention::{forced_union, topk, IndexSet};
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{Matrix, Scalar};

use super::bits::{hamming_words, tail_mask, words_for, Signature};
use super::network::MappingNetwork;

pub const CACHE_MAGIC: &[u8; 5] = b"HASG1";
pub const CACHE_VERSION: u8 = 0x01;

/// Per-token signatures stored contiguously, one fixed-width slot per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureCache {
    bits: usize,
    words: Vec<u64>,
}

impl SignatureCache {
    pub fn new(bits: usize) -> Self {
        Self {
            bits,
            words: Vec::new(),
        }
    }

    pub fn from_signatures(bits: usize, sigs: &[Signature]) -> Result<Self> {
        let mut cache = Self::new(bits);
        for s in sigs {
            cache.push(s)?;
        }
        Ok(cache)
    }

    pub fn push(&mut self, sig: &Signature) -> Result<()> {
        ensure_dim("cache signature width", self.bits, sig.bits())?;
        self.words.extend_from_slice(sig.words());
        Ok(())
    }

    pub fn len(&self) -> usize {
        match self.words_per_token() {
            0 => 0,
            w => self.words.len() / w,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    /// Auxiliary memory per token, in bits of signature payload.
    pub fn bits_per_token(&self) -> usize {
        self.bits
    }

    pub fn words_per_token(&self) -> usize {
        words_for(self.bits)
    }

    pub fn token_words(&self, i: usize) -> &[u64] {
        let w = self.words_per_token();
        &self.words[i * w..(i + 1) * w]
    }

    pub fn signature(&self, i: usize) -> Signature {
        Signature::from_words(self.bits, self.token_words(i).to_vec())
            .expect("cache slots hold well-formed signatures")
    }

    pub fn raw_words(&self) -> &[u64] {
        &self.words
    }

    /// `score_i = -hamming(cache[i], q)`; larger is closer.
    pub fn hash_score(&self, q: &Signature) -> Result<Vec<i32>> {
        ensure_dim("query signature width", self.bits, q.bits())?;
        let mut out = Vec::with_capacity(self.len());
        self.hash_score_into(q, &mut out);
        Ok(out)
    }

    /// Scores into a reusable buffer. Widths must already agree.
    pub fn hash_score_into(&self, q: &Signature, out: &mut Vec<i32>) {
        out.clear();
        match q.words() {
            [w0] => out.extend(self.words.iter().map(|k| -((k ^ w0).count_ones() as i32))),
            qw => out.extend(
                self.words
                    .chunks_exact(qw.len())
                    .map(|k| -(hamming_words(k, qw) as i32)),
            ),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let n = u32::try_from(self.len())
            .map_err(|_| Error::Format("cache too large for u32 token count".into()))?;
        let bits = u32::try_from(self.bits)
            .map_err(|_| Error::Format("bit width too large for u32".into()))?;
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&[CACHE_VERSION])?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&bits.to_le_bytes())?;
        for word in &self.words {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic[..5] != CACHE_MAGIC {
            return Err(Error::Format("not a signature cache (bad magic)".into()));
        }
        if magic[5] != CACHE_VERSION {
            return Err(Error::Format(format!(
                "unsupported signature cache version {}",
                magic[5]
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let bits = u32::from_le_bytes(u32buf) as usize;
        let per = words_for(bits);
        let mut words = Vec::with_capacity(n * per);
        let mut wbuf = [0u8; 8];
        for _ in 0..n * per {
            r.read_exact(&mut wbuf)?;
            words.push(u64::from_le_bytes(wbuf));
        }
        if per > 0 {
            let mask = tail_mask(bits);
            if words.chunks_exact(per).any(|s| s[per - 1] & !mask != 0) {
                return Err(Error::Format("cache signature has bits past its width".into()));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after signature cache".into()));
        }
        Ok(Self { bits, words })
    }
}

/// Row-wise `phi_bits` over a key matrix.
pub fn build_cache<T: Scalar>(net_kv: &MappingNetwork<T>, keys: &Matrix<T>) -> Result<SignatureCache> {
    let mut cache = SignatureCache::new(net_kv.out_bits());
    if keys.rows() == 0 {
        return Ok(cache);
    }
    ensure_dim("cache key width", net_kv.input_dim(), keys.cols())?;
    for k in keys.iter_rows() {
        cache.push(&net_kv.phi_bits(k)?)?;
    }
    Ok(cache)
}

/// Top-`budget` tokens by Hamming closeness to the query signature, plus
/// forced sink and recent windows.
pub fn select_pivotal<T: Scalar>(
    cache: &SignatureCache,
    net_q: &MappingNetwork<T>,
    q: &[T],
    budget: usize,
    sink: usize,
    recent: usize,
) -> Result<IndexSet> {
    let q_sig = net_q.phi_bits(q)?;
    let scores = cache.hash_score(&q_sig)?;
    let heavy = topk(&scores, budget)?;
    forced_union(&heavy, cache.len(), sink, recent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, Rng};
    use crate::signatures::hamming;

    fn random_sig(rng: &mut Rng, bits: usize) -> Signature {
        let b: Vec<bool> = (0..bits).map(|_| rng.next_u64() & 1 == 1).collect();
        Signature::from_bits(&b)
    }

    #[test]
    fn exact_match_wins() {
        let mut rng = Rng::new(5);
        let sigs: Vec<Signature> = (0..20).map(|_| random_sig(&mut rng, 40)).collect();
        let cache = SignatureCache::from_signatures(40, &sigs).unwrap();
        let s = cache.hash_score(&sigs[13]).unwrap();
        assert_eq!(s[13], 0);
        assert_eq!(topk(&s, 1).unwrap().as_slice(), &[13]);
    }

    #[test]
    fn identical_cache_gives_constant_scores() {
        let sig = Signature::from_bits(&[true, false, true]);
        let cache = SignatureCache::from_signatures(3, &vec![sig; 9]).unwrap();
        let s = cache.hash_score(&Signature::zeros(3)).unwrap();
        assert!(s.iter().all(|&x| x == -2));
    }

    #[test]
    fn scores_match_per_token_loop() {
        let mut rng = Rng::new(6);
        for bits in [1, 63, 64, 65, 130, 257] {
            let sigs: Vec<Signature> = (0..30).map(|_| random_sig(&mut rng, bits)).collect();
            let cache = SignatureCache::from_signatures(bits, &sigs).unwrap();
            let q = random_sig(&mut rng, bits);
            let s = cache.hash_score(&q).unwrap();
            for (i, sig) in sigs.iter().enumerate() {
                assert_eq!(s[i], -(hamming(sig, &q).unwrap() as i32));
            }
            assert!(cache.hash_score(&Signature::zeros(bits + 1)).is_err());
        }
    }

    #[test]
    fn build_cache_cases() {
        let mut rng = Rng::new(7);
        let net = MappingNetwork::<f64>::random(&[4, 8, 12], &mut rng).unwrap();
        assert!(build_cache(&net, &Matrix::zeros(0, 4)).unwrap().is_empty());

        let keys = gaussian::<f64>(&mut rng, 10, 4, 0.0, 1.0).unwrap();
        let cache = build_cache(&net, &keys).unwrap();
        assert_eq!(cache.len(), 10);
        for i in 0..10 {
            assert_eq!(cache.signature(i), net.phi_bits(keys.row(i)).unwrap());
        }
        let dup = Matrix::from_rows(&[keys.row(3), keys.row(3)]).unwrap();
        let c2 = build_cache(&net, &dup).unwrap();
        assert_eq!(c2.signature(0), c2.signature(1));
        assert!(build_cache(&net, &Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn memory_accounting_32_bits() {
        let cache = SignatureCache::from_signatures(32, &vec![Signature::zeros(32); 5]).unwrap();
        assert_eq!(cache.words_per_token(), 1);
        assert_eq!(cache.bits_per_token(), 32);
        assert_eq!(cache.raw_words().len(), 5);
    }

    #[test]
    fn select_pivotal_cases() {
        let mut rng = Rng::new(8);
        let net = MappingNetwork::<f64>::random(&[4, 16, 24], &mut rng).unwrap();
        let keys = gaussian::<f64>(&mut rng, 50, 4, 0.0, 1.0).unwrap();
        let cache = build_cache(&net, &keys).unwrap();
        let q = [0.3, -1.0, 2.0, 0.1];
        assert_eq!(
            select_pivotal(&cache, &net, &q, 50, 0, 0).unwrap(),
            IndexSet::full(50)
        );

        // query equal to a key: its signature is an exact match
        let q7 = keys.row(7).to_vec();
        let scores = cache.hash_score(&net.phi_bits(&q7).unwrap()).unwrap();
        let unique_best = scores.iter().filter(|&&s| s == 0).count() == 1;
        if unique_best {
            assert_eq!(select_pivotal(&cache, &net, &q7, 1, 0, 0).unwrap().as_slice(), &[7]);
        }

        let got = select_pivotal(&cache, &net, &q, 5, 2, 3).unwrap();
        let by_hand = forced_union(&topk(&cache.hash_score(&net.phi_bits(&q).unwrap()).unwrap(), 5).unwrap(), 50, 2, 3).unwrap();
        assert_eq!(got, by_hand);
        assert!(select_pivotal(&cache, &net, &q, 0, 0, 0).is_err());
    }

    #[test]
    fn file_round_trip_and_layout() {
        let mut rng = Rng::new(9);
        let sigs: Vec<Signature> = (0..3).map(|_| random_sig(&mut rng, 70)).collect();
        let cache = SignatureCache::from_signatures(70, &sigs).unwrap();
        let mut buf = Vec::new();
        cache.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..6], b"HASG1\x01");
        assert_eq!(&buf[6..10], &3u32.to_le_bytes());
        assert_eq!(&buf[10..14], &70u32.to_le_bytes());
        assert_eq!(buf.len(), 14 + 3 * 2 * 8);
        assert_eq!(&buf[14..22], &sigs[0].words()[0].to_le_bytes());
        let back = SignatureCache::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, cache);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn file_rejects_corruption() {
        let cache = SignatureCache::from_signatures(8, &[Signature::zeros(8)]).unwrap();
        let mut buf = Vec::new();
        cache.write_to(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(SignatureCache::read_from(bad_magic.as_slice()).is_err());

        let mut bad_version = buf.clone();
        bad_version[5] = 2;
        assert!(SignatureCache::read_from(bad_version.as_slice()).is_err());

        let mut stray = buf.clone();
        stray[14 + 1] = 0xFF; // bit 8+ of an 8-bit signature
        assert!(SignatureCache::read_from(stray.as_slice()).is_err());

        assert!(SignatureCache::read_from(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(SignatureCache::read_from(extra.as_slice()).is_err());
    }
}
