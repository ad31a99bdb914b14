//! Evaluation suite: sequence perplexity under a smoothed n-gram language
//! model, the min-over-generated RMSD protocol, validity rate, pairwise
//! sequence similarity via longest common subsequence, and diversity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::CdrLoop;
use crate::error::{Error, Result};
use crate::geometry::{check_validity, rmsd, Coordinates, DistanceMatrix, ValiditySpec};

/// Context symbol padding the start of a sequence.
const BEGIN: usize = usize::MAX;

/// Add-k smoothed n-gram language model over the 20-letter alphabet.
/// Contexts are begin-padded; the event space is exactly the alphabet, so
/// an untrained model with any positive smoothing is uniform (probability
/// 1/20 per symbol).
#[derive(Debug, Clone)]
pub struct SequenceLM {
    pub order: usize,
    pub smoothing: f64,
    counts: BTreeMap<Vec<usize>, [f64; 20]>,
}

impl SequenceLM {
    /// Train on index sequences with the given n-gram order (1 = unigram).
    pub fn train(sequences: &[&[usize]], order: usize, smoothing: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if smoothing < 0.0 {
            return Err(Error::Config(format!("smoothing must be nonnegative, got {smoothing}")));
        }
        let mut counts: BTreeMap<Vec<usize>, [f64; 20]> = BTreeMap::new();
        for seq in sequences {
            for (t, &sym) in seq.iter().enumerate() {
                if sym >= 20 {
                    return Err(Error::Data(format!("symbol index {sym} outside the alphabet")));
                }
                let ctx = context_at(seq, t, order);
                counts.entry(ctx).or_insert([0.0; 20])[sym] += 1.0;
            }
        }
        Ok(Self { order, smoothing, counts })
    }

    /// The uniform model: no counts, positive smoothing.
    pub fn uniform() -> Self {
        Self { order: 1, smoothing: 1.0, counts: BTreeMap::new() }
    }

    /// Conditional probability of `sym` after `ctx`.
    fn prob(&self, ctx: &[usize], sym: usize) -> Result<f64> {
        let (count, total) = match self.counts.get(ctx) {
            Some(row) => (row[sym], row.iter().sum::<f64>()),
            None => (0.0, 0.0),
        };
        if self.smoothing == 0.0 {
            if count == 0.0 {
                return Err(Error::Domain(format!(
                    "unseen symbol {sym} in context {ctx:?} with zero smoothing"
                )));
            }
            return Ok(count / total);
        }
        Ok((count + self.smoothing) / (total + 20.0 * self.smoothing))
    }
}

fn context_at(seq: &[usize], t: usize, order: usize) -> Vec<usize> {
    let want = order - 1;
    let mut ctx = Vec::with_capacity(want);
    for back in (1..=want).rev() {
        if t >= back {
            ctx.push(seq[t - back]);
        } else {
            ctx.push(BEGIN);
        }
    }
    ctx
}

/// Perplexity: exponential of the mean negative log-probability per residue.
pub fn perplexity(lm: &SequenceLM, seq: &[usize]) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::Contract("perplexity of an empty sequence".into()));
    }
    let mut log_sum = 0.0;
    for (t, &sym) in seq.iter().enumerate() {
        if sym >= 20 {
            return Err(Error::Data(format!("symbol index {sym} outside the alphabet")));
        }
        let ctx = context_at(seq, t, lm.order);
        log_sum += lm.prob(&ctx, sym)?.ln();
    }
    Ok((-log_sum / seq.len() as f64).exp())
}

/// Mean and population standard deviation of the min-over-generated Kabsch
/// RMSD, matched by loop length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsdReport {
    pub mean: f64,
    pub std: f64,
    pub matched: usize,
    /// Test loops with no equal-length generated loop, excluded from the
    /// statistics but reported.
    pub unmatched: usize,
}

/// For each test conformation, the smallest RMSD against any generated
/// conformation of equal length.
pub fn rmsd_protocol(generated: &[Coordinates], test: &[Coordinates]) -> Result<RmsdReport> {
    if generated.is_empty() || test.is_empty() {
        return Err(Error::Contract("rmsd protocol needs nonempty sets".into()));
    }
    let mut mins = Vec::new();
    let mut unmatched = 0usize;
    for t in test {
        let mut best: Option<f64> = None;
        for g in generated {
            if g.len() != t.len() {
                continue;
            }
            let r = rmsd(t, g)?;
            best = Some(best.map_or(r, |b: f64| b.min(r)));
        }
        match best {
            Some(b) => mins.push(b),
            None => unmatched += 1,
        }
    }
    if mins.is_empty() {
        return Err(Error::Contract(format!(
            "no test loop had an equal-length generated loop ({unmatched} unmatched)"
        )));
    }
    let mean = mins.iter().sum::<f64>() / mins.len() as f64;
    let var = mins.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mins.len() as f64;
    Ok(RmsdReport { mean, std: var.sqrt(), matched: mins.len(), unmatched })
}

/// Fraction of matrices passing the hard validity check.
pub fn validity_rate(generated: &[DistanceMatrix], spec: &ValiditySpec) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Contract("validity rate of an empty set".into()));
    }
    let valid = generated.iter().filter(|d| check_validity(d, spec).valid).count();
    Ok(valid as f64 / generated.len() as f64)
}

/// Longest-common-subsequence length by dynamic programming.
fn lcs_length(a: &[usize], b: &[usize]) -> usize {
    let (m, n) = (a.len(), b.len());
    let mut prev = vec![0usize; n + 1];
    let mut cur = vec![0usize; n + 1];
    for i in 1..=m {
        for j in 1..=n {
            cur[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur[0] = 0;
    }
    prev[n]
}

/// Sequence similarity: `|LCS(s1, s2)| / max(|s1|, |s2|)`.
pub fn similarity(s1: &[usize], s2: &[usize]) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::Contract("similarity of an empty sequence".into()));
    }
    Ok(lcs_length(s1, s2) as f64 / s1.len().max(s2.len()) as f64)
}

/// One minus the mean pairwise similarity over ordered distinct pairs.
pub fn diversity(seqs: &[&[usize]]) -> Result<f64> {
    if seqs.len() < 2 {
        return Err(Error::Contract(format!(
            "diversity needs at least 2 sequences, got {}",
            seqs.len()
        )));
    }
    let n = seqs.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += similarity(seqs[i], seqs[j])?;
            }
        }
    }
    Ok(1.0 - acc / (n * (n - 1)) as f64)
}

/// The assembled metric suite for one generated set against one test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_count: usize,
    pub ppl_mean: f64,
    pub ppl_std: f64,
    pub rmsd: Option<RmsdReport>,
    pub validity_rate: f64,
    pub diversity: f64,
    /// Which language model produced the perplexities.
    pub lm_descriptor: String,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let rmsd = match &self.rmsd {
            Some(r) => format!(
                "{:.4} +- {:.4} (matched {}, unmatched {})",
                r.mean, r.std, r.matched, r.unmatched
            ),
            None => "n/a".into(),
        };
        format!(
            "samples      {}\nppl          {:.4} +- {:.4}  [{}]\nrmsd         {}\nvalidity     {:.4}\ndiversity    {:.4}",
            self.sample_count, self.ppl_mean, self.ppl_std, self.lm_descriptor, rmsd, self.validity_rate, self.diversity
        )
    }
}

/// Score a generated set against a test set: perplexity and diversity on
/// sequences, validity on distance matrices, RMSD on coordinates (loops
/// without coordinates only participate where they have them). A loop that
/// carries coordinates is scored on the matrix realized by those
/// coordinates, so validity reflects the actual 3D structure; loops
/// without coordinates fall back to their stored matrix.
pub fn evaluate_sets(
    lm: &SequenceLM,
    lm_descriptor: &str,
    generated: &[CdrLoop],
    test: &[CdrLoop],
    spec: &ValiditySpec,
) -> Result<EvalReport> {
    if generated.is_empty() {
        return Err(Error::Contract("evaluation needs generated loops".into()));
    }
    let mut ppls = Vec::with_capacity(generated.len());
    for l in generated {
        ppls.push(perplexity(lm, &l.sequence)?);
    }
    let ppl_mean = ppls.iter().sum::<f64>() / ppls.len() as f64;
    let ppl_var =
        ppls.iter().map(|v| (v - ppl_mean) * (v - ppl_mean)).sum::<f64>() / ppls.len() as f64;

    let matrices: Vec<DistanceMatrix> = generated
        .iter()
        .map(|l| match &l.coords {
            Some(c) => Ok(crate::geometry::distance_matrix(c)),
            None => l.distance_matrix(),
        })
        .collect::<Result<_>>()?;
    let vr = validity_rate(&matrices, spec)?;

    let div = if generated.len() >= 2 {
        let seqs: Vec<&[usize]> = generated.iter().map(|l| l.sequence.as_slice()).collect();
        diversity(&seqs)?
    } else {
        0.0
    };

    let gen_coords: Vec<Coordinates> =
        generated.iter().filter_map(|l| l.coords.clone()).collect();
    let test_coords: Vec<Coordinates> = test.iter().filter_map(|l| l.coords.clone()).collect();
    let rmsd_report = if !gen_coords.is_empty() && !test_coords.is_empty() {
        Some(rmsd_protocol(&gen_coords, &test_coords)?)
    } else {
        None
    };

    Ok(EvalReport {
        sample_count: generated.len(),
        ppl_mean,
        ppl_std: ppl_var.sqrt(),
        rmsd: rmsd_report,
        validity_rate: vr,
        diversity: div,
        lm_descriptor: lm_descriptor.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::aa_index;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn idx(s: &str) -> Vec<usize> {
        s.chars().map(|c| aa_index(c).unwrap()).collect()
    }

    #[test]
    fn uniform_lm_perplexity_is_twenty() {
        let lm = SequenceLM::uniform();
        for s in ["A", "VTDAFMI", "ACDEFGHIKLMNPQRSTVWY"] {
            let ppl = perplexity(&lm, &idx(s)).unwrap();
            assert_abs_diff_eq!(ppl, 20.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn deterministic_lm_perplexity_is_one() {
        // A corpus whose bigram transitions are all deterministic.
        let train = idx("ACDEF");
        let lm = SequenceLM::train(&[&train], 2, 0.0).unwrap();
        let ppl = perplexity(&lm, &train).unwrap();
        assert_abs_diff_eq!(ppl, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_smoothing_unseen_symbol_is_domain_error() {
        let train = idx("ACDEF");
        let lm = SequenceLM::train(&[&train], 2, 0.0).unwrap();
        assert!(matches!(perplexity(&lm, &idx("AW")), Err(Error::Domain(_))));
    }

    #[test]
    fn bigram_lm_matches_hand_computed_probabilities() {
        // Corpus: "AC", "AD", "CC". Smoothing k = 0.1.
        let corpus = [idx("AC"), idx("AD"), idx("CC")];
        let refs: Vec<&[usize]> = corpus.iter().map(|v| v.as_slice()).collect();
        let k = 0.1;
        let lm = SequenceLM::train(&refs, 2, k).unwrap();
        let (a, c, d) = (aa_index('A').unwrap(), aa_index('C').unwrap(), aa_index('D').unwrap());

        // Hand-computed: begin context saw A twice, C once (total 3);
        // context A saw C once and D once (total 2); context C saw C once.
        let p_begin_a = (2.0 + k) / (3.0 + 20.0 * k);
        let p_a_c = (1.0 + k) / (2.0 + 20.0 * k);
        let p_a_d = (1.0 + k) / (2.0 + 20.0 * k);
        let p_c_c = (1.0 + k) / (1.0 + 20.0 * k);
        let _ = (d, p_a_d);

        let seq = [a, c, c];
        let expected = -(p_begin_a.ln() + p_a_c.ln() + p_c_c.ln()) / 3.0;
        let got = perplexity(&lm, &seq).unwrap();
        assert_abs_diff_eq!(got, expected.exp(), epsilon = 1e-12);
    }

    #[test]
    fn lm_conditionals_sum_to_one() {
        let corpus = [idx("ACDEFG"), idx("GAC"), idx("WWY")];
        let refs: Vec<&[usize]> = corpus.iter().map(|v| v.as_slice()).collect();
        let lm = SequenceLM::train(&refs, 3, 0.1).unwrap();
        // Observed contexts and a few unseen ones.
        let mut contexts: Vec<Vec<usize>> = lm.counts.keys().cloned().collect();
        contexts.push(vec![BEGIN, BEGIN]);
        contexts.push(vec![3, 4]);
        for ctx in contexts {
            let total: f64 = (0..20).map(|s| lm.prob(&ctx, s).unwrap()).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    fn chain(points: &[[f64; 3]]) -> Coordinates {
        Coordinates::new(points.to_vec()).unwrap()
    }

    #[test]
    fn rmsd_protocol_exact_copies_and_singletons() {
        let mut rng = StdRng::seed_from_u64(3);
        let make = |rng: &mut StdRng, n: usize| {
            chain(
                &(0..n)
                    .map(|_| {
                        [
                            rng.gen_range(-5.0..5.0),
                            rng.gen_range(-5.0..5.0),
                            rng.gen_range(-5.0..5.0),
                        ]
                    })
                    .collect::<Vec<_>>(),
            )
        };
        let tests = vec![make(&mut rng, 5), make(&mut rng, 6)];
        // Rigid copies of each test loop.
        let rot = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let generated: Vec<Coordinates> =
            tests.iter().map(|t| t.transformed(&rot, &[3.0, -1.0, 2.0])).collect();
        let report = rmsd_protocol(&generated, &tests).unwrap();
        assert!(report.mean < 1e-9);
        assert_eq!(report.matched, 2);
        assert_eq!(report.unmatched, 0);

        // Singletons reduce to plain rmsd.
        let a = make(&mut rng, 5);
        let b = make(&mut rng, 5);
        let single = rmsd_protocol(&[a.clone()], &[b.clone()]).unwrap();
        assert_abs_diff_eq!(single.mean, rmsd(&b, &a).unwrap(), epsilon = 1e-12);
        assert_eq!(single.std, 0.0);
    }

    #[test]
    fn rmsd_protocol_matches_min_over_pairs_oracle() {
        let mut rng = StdRng::seed_from_u64(9);
        let make = |rng: &mut StdRng| {
            chain(
                &(0..5)
                    .map(|_| {
                        [
                            rng.gen_range(-4.0..4.0),
                            rng.gen_range(-4.0..4.0),
                            rng.gen_range(-4.0..4.0),
                        ]
                    })
                    .collect::<Vec<_>>(),
            )
        };
        let generated: Vec<Coordinates> = (0..5).map(|_| make(&mut rng)).collect();
        let tests: Vec<Coordinates> = (0..3).map(|_| make(&mut rng)).collect();
        let report = rmsd_protocol(&generated, &tests).unwrap();
        let mut mins = Vec::new();
        for t in &tests {
            let best = generated
                .iter()
                .map(|g| rmsd(t, g).unwrap())
                .fold(f64::INFINITY, f64::min);
            mins.push(best);
        }
        let mean = mins.iter().sum::<f64>() / mins.len() as f64;
        assert_abs_diff_eq!(report.mean, mean, epsilon = 1e-12);
    }

    #[test]
    fn rmsd_protocol_counts_unmatched_lengths() {
        let mut rng = StdRng::seed_from_u64(5);
        let make = |rng: &mut StdRng, n: usize| {
            chain(
                &(0..n)
                    .map(|_| {
                        [
                            rng.gen_range(-4.0..4.0),
                            rng.gen_range(-4.0..4.0),
                            rng.gen_range(-4.0..4.0),
                        ]
                    })
                    .collect::<Vec<_>>(),
            )
        };
        let generated = vec![make(&mut rng, 5)];
        let tests = vec![make(&mut rng, 5), make(&mut rng, 9)];
        let report = rmsd_protocol(&generated, &tests).unwrap();
        assert_eq!(report.matched, 1);
        assert_eq!(report.unmatched, 1);
    }

    #[test]
    fn validity_rate_counts_fraction() {
        use crate::data::synthesize_loop;
        use crate::geometry::LoopClass;
        let spec = ValiditySpec::preset(LoopClass::H3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut matrices = Vec::new();
        for i in 0..4 {
            let l = synthesize_loop(&spec, 6, &format!("v{i}"), LoopClass::H3, &mut rng).unwrap();
            matrices.push(l.distance_matrix().unwrap());
        }
        assert_eq!(validity_rate(&matrices, &spec).unwrap(), 1.0);
        // Break half of them.
        for d in matrices.iter_mut().take(2) {
            let n = d.n();
            let mut values = d.values().to_vec();
            values[1] = 5.5;
            values[n] = 5.5;
            *d = DistanceMatrix::from_values(n, values).unwrap();
        }
        assert_eq!(validity_rate(&matrices, &spec).unwrap(), 0.5);
    }

    #[test]
    fn similarity_case_study_vector() {
        let s1 = idx("VTDAFMI");
        let s2 = idx("VTDAFDI");
        let sim = similarity(&s1, &s2).unwrap();
        assert_abs_diff_eq!(sim, 6.0 / 7.0, epsilon = 1e-15);
        assert_eq!(similarity(&s1, &s1).unwrap(), 1.0);
        assert_eq!(similarity(&idx("AAA"), &idx("WWW")).unwrap(), 0.0);
    }

    #[test]
    fn diversity_vectors_and_brute_force() {
        let all_same = [idx("ACD"), idx("ACD"), idx("ACD")];
        let refs: Vec<&[usize]> = all_same.iter().map(|v| v.as_slice()).collect();
        assert_eq!(diversity(&refs).unwrap(), 0.0);

        let disjoint = [idx("AAAA"), idx("WWWW")];
        let refs: Vec<&[usize]> = disjoint.iter().map(|v| v.as_slice()).collect();
        assert_eq!(diversity(&refs).unwrap(), 1.0);

        let mixed = [idx("ACDE"), idx("ACDF"), idx("WYWY"), idx("ACDE")];
        let refs: Vec<&[usize]> = mixed.iter().map(|v| v.as_slice()).collect();
        let got = diversity(&refs).unwrap();
        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    acc += similarity(refs[i], refs[j]).unwrap();
                }
            }
        }
        assert_abs_diff_eq!(got, 1.0 - acc / 12.0, epsilon = 1e-12);

        assert!(matches!(diversity(&refs[..1]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn prop_similarity_symmetric_unit_range(seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n1 = rng.gen_range(1..12);
            let n2 = rng.gen_range(1..12);
            let s1: Vec<usize> = (0..n1).map(|_| rng.gen_range(0..20)).collect();
            let s2: Vec<usize> = (0..n2).map(|_| rng.gen_range(0..20)).collect();
            let ab = similarity(&s1, &s2).unwrap();
            let ba = similarity(&s2, &s1).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(similarity(&s1, &s1).unwrap(), 1.0);
        }

        #[test]
        fn prop_diversity_permutation_invariant(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = StdRng::seed_from_u64(seed);
            let count = rng.gen_range(2..6);
            let seqs: Vec<Vec<usize>> = (0..count)
                .map(|_| (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..20)).collect())
                .collect();
            let refs: Vec<&[usize]> = seqs.iter().map(|v| v.as_slice()).collect();
            let base = diversity(&refs).unwrap();
            let mut shuffled = refs.clone();
            shuffled.shuffle(&mut rng);
            let perm = diversity(&shuffled).unwrap();
            prop_assert!((base - perm).abs() < 1e-12);
        }

        #[test]
        fn prop_perplexity_at_least_one(seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let corpus: Vec<Vec<usize>> = (0..rng.gen_range(1..5))
                .map(|_| (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..20)).collect())
                .collect();
            let refs: Vec<&[usize]> = corpus.iter().map(|v| v.as_slice()).collect();
            let lm = SequenceLM::train(&refs, rng.gen_range(1..4), 0.1).unwrap();
            let probe: Vec<usize> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..20)).collect();
            prop_assert!(perplexity(&lm, &probe).unwrap() >= 1.0);
        }

        #[test]
        fn prop_rmsd_protocol_monotone_in_generated_set(seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let make = |rng: &mut StdRng| {
                Coordinates::new(
                    (0..4)
                        .map(|_| {
                            [
                                rng.gen_range(-3.0..3.0),
                                rng.gen_range(-3.0..3.0),
                                rng.gen_range(-3.0..3.0),
                            ]
                        })
                        .collect(),
                )
                .unwrap()
            };
            let tests: Vec<Coordinates> = (0..3).map(|_| make(&mut rng)).collect();
            let mut generated: Vec<Coordinates> = (0..2).map(|_| make(&mut rng)).collect();
            let before = rmsd_protocol(&generated, &tests).unwrap();
            generated.push(make(&mut rng));
            let after = rmsd_protocol(&generated, &tests).unwrap();
            prop_assert!(after.mean <= before.mean + 1e-12);
        }
    }
}
