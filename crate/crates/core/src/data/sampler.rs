use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::ReidSample;
use crate::error::{Error, Result};

/// Draws batches of `P` identities × `K` images.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_identity: BTreeMap<usize, Vec<usize>>,
    pub p: usize,
    pub k: usize,
}

impl PkSampler {
    pub fn new(samples: &[ReidSample], p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Config(format!("P and K must be positive, got P={p}, K={k}")));
        }
        let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_identity.entry(s.identity).or_default().push(i);
        }
        if by_identity.len() < p {
            return Err(Error::Data(format!("P×K sampling needs {p} identities, dataset has {}", by_identity.len())));
        }
        if p < 2 {
            return Err(Error::Config("triplet mining needs P ≥ 2".into()));
        }
        Ok(Self { by_identity, p, k })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    /// Sample indices, identity-major. Identities with fewer than `K` images
    /// are drawn with replacement.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        let ids: Vec<&Vec<usize>> = self.by_identity.values().collect();
        let chosen: Vec<&&Vec<usize>> = ids.choose_multiple(rng, self.p).collect();
        let mut out = Vec::with_capacity(self.batch_size());
        for members in chosen {
            if members.len() >= self.k {
                let mut pool = members.to_vec();
                pool.shuffle(rng);
                out.extend_from_slice(&pool[..self.k]);
            } else {
                out.extend((0..self.k).map(|_| *members.choose(rng).expect("non-empty identity")));
            }
        }
        out
    }
}

/// One P×K batch drawn from `samples`.
pub fn pk_sample_batch(samples: &[ReidSample], p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<ReidSample>> {
    let sampler = PkSampler::new(samples, p, k)?;
    Ok(sampler.sample(rng).into_iter().map(|i| samples[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn samples(counts: &[usize]) -> Vec<ReidSample> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(id, &n)| {
                (0..n).map(move |j| ReidSample {
                    name: format!("{id}_{j}"),
                    image: Tensor::zeros(&[3, 1, 1]),
                    identity: id,
                    camera: 0,
                    track: None,
                })
            })
            .collect()
    }

    #[test]
    fn batch_sizes_match_presets() {
        let s = samples(&[4; 12]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pk_sample_batch(&s, 7, 4, &mut rng).unwrap().len(), 28);
        assert_eq!(pk_sample_batch(&s, 10, 4, &mut rng).unwrap().len(), 40);
    }

    #[test]
    fn small_identities_sample_with_replacement() {
        let s = samples(&[2, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = pk_sample_batch(&s, 3, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 12);
        let ids: BTreeSet<_> = b.iter().map(|x| x.identity).collect();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn too_few_identities() {
        let s = samples(&[4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(pk_sample_batch(&s, 3, 4, &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn every_batch_has_p_distinct_identities() {
        let s = samples(&[1, 3, 5, 4, 2, 6]);
        let sampler = PkSampler::new(&s, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let b = sampler.sample(&mut rng);
            assert_eq!(b.len(), 12);
            let ids: BTreeSet<_> = b.iter().map(|&i| s[i].identity).collect();
            assert_eq!(ids.len(), 4);
            for chunk in b.chunks(3) {
                assert!(chunk.iter().all(|&i| s[i].identity == s[chunk[0]].identity));
            }
        }
    }
}
