//! Semantic cues per answer option: agreement with the input, spread over
//! paraphrase variants, and the resulting uncertainty.
//!
//! Agreement is `max(0, cos(v, c⁺) − cos(v, c⁻))`, variance is the unbiased
//! sample variance of `cos(v, variant)`, and uncertainty is
//! `variance / (1 + agreement)`. A cue set whose uncertainty exceeds the
//! configured threshold is regenerated from a seeded generator.

mod file;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_dims, cosine, Embedding, SeededRng, Vector};

pub use file::{load_cue_table, save_cue_table, CUE_FILE_VERSION};

/// Positive/negative cue embeddings for one option, plus paraphrase
/// variants and the scores derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueSet {
    pub positive: Embedding,
    pub negative: Embedding,
    pub variants: Vec<Embedding>,
    pub agreement: Option<f64>,
    pub variance: Option<f64>,
    pub uncertainty: Option<f64>,
}

/// How uncertainty combines its two terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    /// `Var / (1 + Agr)`
    #[default]
    Full,
    /// Agreement disabled: `unc = Var`.
    OnlyVariance,
}

impl CueSet {
    pub fn new(positive: Embedding, negative: Embedding, variants: Vec<Embedding>) -> Result<Self> {
        check_dims("cue negative", positive.dim(), negative.dim())?;
        for v in &variants {
            check_dims("cue variant", positive.dim(), v.dim())?;
        }
        Ok(CueSet {
            positive,
            negative,
            variants,
            agreement: None,
            variance: None,
            uncertainty: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.positive.dim()
    }

    /// `c⁺ − c⁻` in embedding space.
    pub fn difference(&self) -> Vector {
        self.positive
            .sub(&self.negative)
            .expect("cue set dims are validated on construction")
    }

    /// Uncertainty against `image` under `mode`, reusing stored agreement
    /// and variance when present.
    pub fn uncertainty_under(&self, image: &Embedding, mode: UncertaintyMode) -> Result<f64> {
        let agr = match self.agreement {
            Some(a) => a,
            None => agreement(image, &self.positive, &self.negative)?,
        };
        let var = match self.variance {
            Some(v) => v,
            None => cue_variance(image, &self.variants)?,
        };
        match mode {
            UncertaintyMode::Full => uncertainty(agr, var),
            UncertaintyMode::OnlyVariance => Ok(var),
        }
    }

    pub fn is_scored(&self) -> bool {
        self.uncertainty.is_some()
    }

    /// Recomputes agreement, variance and uncertainty against `image`.
    pub fn scored(mut self, image: &Embedding, mode: UncertaintyMode) -> Result<Self> {
        let agr = agreement(image, &self.positive, &self.negative)?;
        let var = cue_variance(image, &self.variants)?;
        let unc = match mode {
            UncertaintyMode::Full => uncertainty(agr, var)?,
            UncertaintyMode::OnlyVariance => var,
        };
        self.agreement = Some(agr);
        self.variance = Some(var);
        self.uncertainty = Some(unc);
        Ok(self)
    }
}

/// `max(0, cos(image, positive) − cos(image, negative))`, in `[0, 2]`.
pub fn agreement(image: &[f64], positive: &[f64], negative: &[f64]) -> Result<f64> {
    let pos = cosine(image, positive)?;
    let neg = cosine(image, negative)?;
    Ok((pos - neg).max(0.0))
}

/// Unbiased sample variance of the cue–image cosines over `variants`.
pub fn cue_variance(image: &[f64], variants: &[Embedding]) -> Result<f64> {
    if variants.len() < 2 {
        return Err(Error::InsufficientVariants(variants.len()));
    }
    let sims = variants
        .iter()
        .map(|v| cosine(image, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(sample_variance(&sims))
}

/// Shifted by the first element so identical inputs give exactly zero.
pub(crate) fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let shift = xs[0];
    let (sum, sum_sq) = xs.iter().fold((0.0, 0.0), |(s, q), x| {
        let d = x - shift;
        (s + d, q + d * d)
    });
    ((sum_sq - sum * sum / n) / (n - 1.0)).max(0.0)
}

/// `variance / (1 + agreement)`.
pub fn uncertainty(agreement: f64, variance: f64) -> Result<f64> {
    if !(agreement >= 0.0) || !(variance >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "uncertainty needs agreement >= 0 and variance >= 0, got ({agreement}, {variance})"
        )));
    }
    Ok(variance / (1.0 + agreement))
}

/// Result of [`regenerate_if_uncertain`].
#[derive(Clone, Debug)]
pub struct Regenerated {
    pub cues: CueSet,
    /// Generator calls made; zero when the input already passed.
    pub rounds: usize,
}

/// Regenerates `cues` until its uncertainty drops to `threshold`, keeping the
/// lowest-uncertainty candidate if `max_rounds` runs out first.
pub fn regenerate_if_uncertain<G>(
    cues: CueSet,
    image: &Embedding,
    threshold: f64,
    mode: UncertaintyMode,
    max_rounds: usize,
    mut generator: G,
) -> Result<Regenerated>
where
    G: FnMut() -> Result<CueSet>,
{
    if !(threshold > 0.0) {
        return Err(Error::InvalidInput("regeneration threshold must be positive".into()));
    }
    if max_rounds == 0 {
        return Err(Error::InvalidInput("max_rounds must be at least 1".into()));
    }
    let cues = if cues.is_scored() {
        cues
    } else {
        cues.scored(image, mode)?
    };
    let mut best = cues;
    if unc_of(&best) <= threshold {
        return Ok(Regenerated {
            cues: best,
            rounds: 0,
        });
    }
    for round in 1..=max_rounds {
        let candidate = generator()
            .and_then(|c| c.scored(image, mode))
            .map_err(|e| Error::RegenerationFailed {
                reason: e.to_string(),
                best: Box::new(best.clone()),
            })?;
        if unc_of(&candidate) <= threshold {
            return Ok(Regenerated {
                cues: candidate,
                rounds: round,
            });
        }
        if unc_of(&candidate) < unc_of(&best) {
            best = candidate;
        }
    }
    Ok(Regenerated {
        cues: best,
        rounds: max_rounds,
    })
}

fn unc_of(c: &CueSet) -> f64 {
    c.uncertainty.expect("cue set is scored before comparison")
}

/// Synthetic stand-in for generated cues: the positive cue sits near
/// `centroid`, the negative near `distractor`, and each variant perturbs the
/// positive cue. Scores are left unset.
pub fn synthesize_cues(
    centroid: &Embedding,
    distractor: &Embedding,
    noise_scale: f64,
    variant_count: usize,
    rng: &mut SeededRng,
) -> Result<CueSet> {
    if !(noise_scale >= 0.0) {
        return Err(Error::InvalidInput("noise_scale must be >= 0".into()));
    }
    if variant_count < 2 {
        return Err(Error::InsufficientVariants(variant_count));
    }
    let d = centroid.dim();
    let jitter = |base: &[f64], rng: &mut SeededRng| -> Result<Vector> {
        let noise = rng.normal_vec(d, noise_scale);
        Vector::new(base.iter().zip(noise).map(|(b, n)| b + n).collect())
    };
    let positive = jitter(centroid, rng)?;
    let negative = jitter(distractor, rng)?;
    let variants = (0..variant_count)
        .map(|_| jitter(&positive, rng))
        .collect::<Result<Vec<_>>>()?;
    CueSet::new(positive, negative, variants)
}

/// Cue sets keyed by `(sample_id, option_id)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CueTable {
    dim: usize,
    entries: BTreeMap<(String, usize), CueSet>,
}

impl CueTable {
    pub fn new(dim: usize) -> Self {
        CueTable {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, sample_id: impl Into<String>, option: usize, cues: CueSet) -> Result<()> {
        let sample_id = sample_id.into();
        if cues.dim() != self.dim {
            return Err(Error::Consistency(format!(
                "cue set for ({sample_id}, {option}) has dim {}, table dim is {}",
                cues.dim(),
                self.dim
            )));
        }
        if self.entries.contains_key(&(sample_id.clone(), option)) {
            return Err(Error::Consistency(format!(
                "duplicate cue entry for ({sample_id}, {option})"
            )));
        }
        self.entries.insert((sample_id, option), cues);
        Ok(())
    }

    pub fn get(&self, sample_id: &str, option: usize) -> Option<&CueSet> {
        self.entries.get(&(sample_id.to_string(), option))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, &CueSet)> {
        self.entries.iter().map(|((s, o), c)| (s.as_str(), *o, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn agreement_cases() {
        let img = [1.0, 0.0];
        assert!((agreement(&img, &img, &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(agreement(&img, &[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        // cos⁺ = 0.8 and cos⁻ = 0.3 through unit vectors at those angles
        let pos = [0.8, (1.0f64 - 0.64).sqrt()];
        let neg = [0.3, -(1.0f64 - 0.09).sqrt()];
        assert!((agreement(&img, &pos, &neg).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            agreement(&[0.0, 0.0], &pos, &neg),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn variance_cases() {
        let img = v(&[1.0, 0.0]);
        let same = vec![v(&[1.0, 2.0]); 3];
        assert_eq!(cue_variance(&img, &same).unwrap(), 0.0);
        // unit vectors at cosines 0.4 and 0.6: variance ((0.1)² · 2) / 1
        let a = v(&[0.4, (1.0f64 - 0.16).sqrt()]);
        let b = v(&[0.6, (1.0f64 - 0.36).sqrt()]);
        let var = cue_variance(&img, &[a.clone(), b.clone()]).unwrap();
        assert!((var - 0.02).abs() < 1e-12);
        assert_eq!(var, cue_variance(&img, &[b, a.clone()]).unwrap());
        assert!(matches!(
            cue_variance(&img, &[a]),
            Err(Error::InsufficientVariants(1))
        ));
    }

    #[test]
    fn uncertainty_cases() {
        assert_eq!(uncertainty(1.3, 0.0).unwrap(), 0.0);
        assert!((uncertainty(1.0, 0.2).unwrap() - 0.1).abs() < 1e-15);
        assert!(uncertainty(-0.1, 0.2).is_err());
        assert!(uncertainty(0.1, -0.2).is_err());
        assert!(uncertainty(f64::NAN, 0.2).is_err());
        let mut last = f64::INFINITY;
        for i in 0..50 {
            let u = uncertainty(i as f64 * 0.04, 0.3).unwrap();
            assert!(u < last);
            last = u;
        }
    }

    #[test]
    fn only_variance_mode_ignores_agreement() {
        let mut rng = seeded_rng(9);
        let centroid = v(&rng.normal_vec(8, 1.0));
        let other = v(&rng.normal_vec(8, 1.0));
        let cues = synthesize_cues(&centroid, &other, 0.3, 4, &mut rng).unwrap();
        let scored = cues.scored(&centroid, UncertaintyMode::OnlyVariance).unwrap();
        assert_eq!(scored.uncertainty, scored.variance);
        assert!(scored.agreement.unwrap() > 0.0);
    }

    fn noisy(seed: u64, noise: f64) -> (Embedding, CueSet) {
        let mut rng = seeded_rng(seed);
        let centroid = v(&rng.normal_vec(6, 1.0));
        let other = v(&rng.normal_vec(6, 1.0));
        let cues = synthesize_cues(&centroid, &other, noise, 4, &mut rng).unwrap();
        (centroid, cues)
    }

    #[test]
    fn regeneration_is_noop_below_threshold() {
        let (img, cues) = noisy(1, 0.0);
        let scored = cues.scored(&img, UncertaintyMode::Full).unwrap();
        let out = regenerate_if_uncertain(scored.clone(), &img, 0.5, UncertaintyMode::Full, 3, || {
            panic!("generator must not run")
        })
        .unwrap();
        assert_eq!(out.rounds, 0);
        assert_eq!(out.cues, scored);
    }

    #[test]
    fn regeneration_keeps_lowest_candidate() {
        let (img, first) = noisy(2, 2.0);
        let (_, second) = noisy(3, 2.0);
        let first = first.scored(&img, UncertaintyMode::Full).unwrap();
        let second_scored = second.clone().scored(&img, UncertaintyMode::Full).unwrap();
        let threshold = 1e-9;
        let mut calls = 0;
        let out = regenerate_if_uncertain(first.clone(), &img, threshold, UncertaintyMode::Full, 1, || {
            calls += 1;
            Ok(second.clone())
        })
        .unwrap();
        assert_eq!(calls, 1);
        let expected = if second_scored.uncertainty < first.uncertainty {
            second_scored
        } else {
            first
        };
        assert_eq!(out.cues, expected);
    }

    #[test]
    fn regeneration_returns_first_passing_candidate() {
        let (img, bad) = noisy(4, 2.0);
        let good = synthesize_cues(&img, &v(&[1.0; 6]), 0.0, 4, &mut seeded_rng(0)).unwrap();
        let bad = bad.scored(&img, UncertaintyMode::Full).unwrap();
        assert!(bad.uncertainty.unwrap() > 1e-3);
        let out = regenerate_if_uncertain(bad, &img, 1e-3, UncertaintyMode::Full, 3, || Ok(good.clone())).unwrap();
        assert_eq!(out.rounds, 1);
        assert_eq!(out.cues.variance, Some(0.0));
    }

    #[test]
    fn regeneration_failure_carries_best() {
        let (img, bad) = noisy(5, 2.0);
        let err = regenerate_if_uncertain(bad, &img, 1e-12, UncertaintyMode::Full, 3, || {
            Err(Error::InvalidInput("generator offline".into()))
        })
        .unwrap_err();
        match err {
            Error::RegenerationFailed { best, .. } => assert!(best.is_scored()),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn synthesis_without_noise_is_exact() {
        let mut rng = seeded_rng(0);
        let c = v(&[0.5, -0.5, 1.0]);
        let d = v(&[1.0, 1.0, 0.0]);
        let cues = synthesize_cues(&c, &d, 0.0, 4, &mut rng).unwrap();
        assert_eq!(cues.positive, c);
        assert_eq!(cues.negative, d);
        assert!(cues.variants.iter().all(|x| *x == c));
        assert_eq!(cue_variance(&d, &cues.variants).unwrap(), 0.0);
        assert!(!cues.is_scored());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let c = v(&[0.5, -0.5, 1.0]);
        let d = v(&[1.0, 1.0, 0.0]);
        let a = synthesize_cues(&c, &d, 0.1, 4, &mut seeded_rng(8)).unwrap();
        let b = synthesize_cues(&c, &d, 0.1, 4, &mut seeded_rng(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_variance_is_positive_and_finite() {
        let mut rng = seeded_rng(21);
        let mut total = 0.0;
        for _ in 0..1000 {
            let c = v(&rng.normal_vec(32, 1.0 / 32f64.sqrt()));
            let d = v(&rng.normal_vec(32, 1.0 / 32f64.sqrt()));
            let cues = synthesize_cues(&c, &d, 0.1, 4, &mut rng).unwrap();
            total += cue_variance(&c, &cues.variants).unwrap();
        }
        let mean = total / 1000.0;
        assert!(mean.is_finite() && mean > 0.0);
    }

    #[test]
    fn table_rejects_duplicates_and_dim_mismatch() {
        let mut t = CueTable::new(2);
        let cues = CueSet::new(v(&[1.0, 0.0]), v(&[0.0, 1.0]), vec![v(&[1.0, 0.0]); 2]).unwrap();
        t.insert("s0", 0, cues.clone()).unwrap();
        assert!(matches!(t.insert("s0", 0, cues), Err(Error::Consistency(_))));
        let wide = CueSet::new(v(&[1.0; 3]), v(&[1.0; 3]), vec![v(&[1.0; 3]); 2]).unwrap();
        assert!(matches!(t.insert("s1", 0, wide), Err(Error::Consistency(_))));
    }
}
