use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit_lda, fit_plda, BackendConfig, LabeledRep, LdaProjector, PldaModel, RepresentationVector};
use crate::corpus::LanguageRegistry;
use crate::error::{LidError, Result};

/// Counts representation vectors currently held in memory and the peak.
#[derive(Debug, Default)]
pub struct ResidencyMeter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

pub struct ResidencyGuard<'a> {
    meter: &'a ResidencyMeter,
    n: usize,
}

impl ResidencyMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn acquire(&self, n: usize) -> ResidencyGuard<'_> {
        let now = self.current.fetch_add(n, Ordering::SeqCst) + n;
        self.peak.fetch_max(now, Ordering::SeqCst);
        ResidencyGuard { meter: self, n }
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Drop for ResidencyGuard<'_> {
    fn drop(&mut self) {
        self.meter.current.fetch_sub(self.n, Ordering::SeqCst);
    }
}

/// Loads labeled representations on demand so that only one batch is
/// resident at a time.
pub trait BatchSource {
    /// Every fittable segment as `(segment id, label)`.
    fn catalog(&self) -> Result<Vec<(String, String)>>;
    fn load(&mut self, ids: &[String]) -> Result<Vec<LabeledRep>>;
    /// Makes newly enrolled examples loadable by id. Sources backed by
    /// persistent storage may already hold them.
    fn store(&mut self, _items: &[LabeledRep]) -> Result<()> {
        Ok(())
    }
}

/// In-memory source, mainly for tests and bindings.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    items: BTreeMap<String, LabeledRep>,
    /// Largest single `load` request served.
    pub max_request: usize,
}

impl MemorySource {
    pub fn new(items: Vec<LabeledRep>) -> Self {
        MemorySource {
            items: items.into_iter().map(|i| (i.rep.segment_id.clone(), i)).collect(),
            max_request: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl BatchSource for MemorySource {
    fn catalog(&self) -> Result<Vec<(String, String)>> {
        Ok(self.items.values().map(|i| (i.rep.segment_id.clone(), i.label.clone())).collect())
    }

    fn load(&mut self, ids: &[String]) -> Result<Vec<LabeledRep>> {
        self.max_request = self.max_request.max(ids.len());
        ids.iter()
            .map(|id| {
                self.items
                    .get(id)
                    .cloned()
                    .ok_or_else(|| LidError::EmptyInput(format!("unknown segment {id}")))
            })
            .collect()
    }

    fn store(&mut self, items: &[LabeledRep]) -> Result<()> {
        for i in items {
            self.items.insert(i.rep.segment_id.clone(), i.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub lda: LdaProjector,
    pub plda: PldaModel,
}

impl EnsembleMember {
    /// The member's best class (lexicographically first on ties) and its
    /// posterior.
    pub fn vote(&self, rep: &RepresentationVector) -> Result<(String, f64)> {
        let x: Vec<f64> = rep.values.iter().map(|&v| v as f64).collect();
        let y = self.lda.project(&x)?;
        let post = self.plda.posteriors(&y)?;
        let mut best = 0;
        for (i, &p) in post.iter().enumerate() {
            if p > post[best] {
                best = i;
            }
        }
        Ok((self.plda.classes[best].clone(), post[best]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PldaEnsemble {
    pub config: BackendConfig,
    pub members: Vec<EnsembleMember>,
    /// Segment ids each member was fit on.
    pub batch_manifest: Vec<Vec<String>>,
    /// All class labels, sorted.
    pub labels: Vec<String>,
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: String,
    pub confidence: f64,
    pub novel: bool,
    pub votes: usize,
    pub members: usize,
}

/// Modal vote over members; confidence is the mean posterior of the voters
/// for the winning label.
pub fn classify(ensemble: &PldaEnsemble, rep: &RepresentationVector) -> Result<Classification> {
    if ensemble.members.is_empty() {
        return Err(LidError::EmptyInput("ensemble has no members".into()));
    }
    let votes = ensemble
        .members
        .iter()
        .map(|m| m.vote(rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(tally(&votes, ensemble.config.novelty_threshold))
}

pub(crate) fn tally(votes: &[(String, f64)], novelty_threshold: f64) -> Classification {
    let mut counts: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (label, p) in votes {
        let e = counts.entry(label).or_default();
        e.0 += 1;
        e.1 += p;
    }
    let (label, (n, sum)) = counts
        .iter()
        .fold(None::<(&str, (usize, f64))>, |best, (&l, &v)| match best {
            Some((_, (bn, _))) if bn >= v.0 => best,
            _ => Some((l, v)),
        })
        .expect("at least one vote");
    let confidence = sum / n as f64;
    Classification {
        label: label.to_string(),
        confidence,
        novel: confidence < novelty_threshold,
        votes: n,
        members: votes.len(),
    }
}

/// Deals each class's segments round-robin over `ceil(N / batch_segments)`
/// batches after a seeded shuffle.
pub fn plan_batches(catalog: &[(String, String)], cfg: &BackendConfig) -> Result<Vec<Vec<String>>> {
    if catalog.is_empty() {
        return Err(LidError::EmptyInput("no segments to fit the back end on".into()));
    }
    let n_batches = catalog.len().div_ceil(cfg.batch_segments);
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, label) in catalog {
        by_class.entry(label).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batches: Vec<Vec<String>> = vec![Vec::new(); n_batches];
    let mut labels_in: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); n_batches];
    let mut slot = 0usize;
    for (label, ids) in by_class.iter_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            batches[slot % n_batches].push(id.to_string());
            labels_in[slot % n_batches].insert(label);
            slot += 1;
        }
    }
    for (b, present) in labels_in.iter().enumerate() {
        let missing: Vec<&str> = by_class.keys().filter(|l| !present.contains(*l)).copied().collect();
        if !missing.is_empty() {
            return Err(LidError::Stratification {
                batch: b,
                missing: missing.iter().map(|s| s.to_string()).collect(),
            });
        }
    }
    for b in &mut batches {
        b.sort();
    }
    Ok(batches)
}

/// Fits one (LDA, pLDA) pair on a resident batch.
pub fn fit_member(batch: &[LabeledRep], k: usize) -> Result<EnsembleMember> {
    let n = batch.len();
    let d = batch.first().map_or(0, |b| b.rep.values.len());
    if batch.iter().any(|b| b.rep.values.len() != d) || d == 0 {
        return Err(LidError::Shape("representations in a batch differ in length".into()));
    }
    let labels: Vec<String> = batch.iter().map(|b| b.label.clone()).collect();
    let x = DMatrix::from_fn(n, d, |i, j| batch[i].rep.values[j] as f64);
    let lda = fit_lda(&x, &labels, k)?;
    let mut y = DMatrix::zeros(n, lda.output_dim());
    for i in 0..n {
        let xi: Vec<f64> = batch[i].rep.values.iter().map(|&v| v as f64).collect();
        y.set_row(i, &lda.project(&xi)?.transpose());
    }
    let plda = fit_plda(&y, &labels)?;
    Ok(EnsembleMember { lda, plda })
}

/// One member per planned batch; batches are loaded, fit and released in
/// turn so at most one batch is resident.
pub fn fit_ensemble(
    source: &mut dyn BatchSource,
    cfg: &BackendConfig,
    meter: &ResidencyMeter,
) -> Result<PldaEnsemble> {
    cfg.validate()?;
    let catalog = source.catalog()?;
    let plan = plan_batches(&catalog, cfg)?;
    let mut members = Vec::with_capacity(plan.len());
    for (b, ids) in plan.iter().enumerate() {
        let batch = source.load(ids)?;
        let _resident = meter.acquire(batch.len());
        log::info!("fitting back-end member {b} on {} segments", batch.len());
        members.push(fit_member(&batch, cfg.k)?);
    }
    let labels: BTreeSet<String> = catalog.into_iter().map(|(_, l)| l).collect();
    Ok(PldaEnsemble {
        config: cfg.clone(),
        members,
        batch_manifest: plan,
        labels: labels.into_iter().collect(),
        provenance: serde_json::Value::Null,
    })
}

/// Adds a class by refitting every member on its original batch plus an
/// equal share of `examples`. The TDNN is not involved.
pub fn enroll_language(
    ensemble: &PldaEnsemble,
    new_code: &str,
    examples: Vec<RepresentationVector>,
    registry: &LanguageRegistry,
    source: &mut dyn BatchSource,
    meter: &ResidencyMeter,
) -> Result<(PldaEnsemble, LanguageRegistry)> {
    let mut registry = registry.clone();
    registry.enroll(new_code)?;
    if examples.len() < ensemble.config.min_enroll {
        return Err(LidError::InsufficientExamples {
            required: ensemble.config.min_enroll,
            got: examples.len(),
        });
    }
    let m = ensemble.members.len();
    let labeled: Vec<LabeledRep> = examples
        .into_iter()
        .map(|rep| LabeledRep {
            rep,
            label: new_code.to_string(),
        })
        .collect();
    source.store(&labeled)?;
    let mut shares: Vec<Vec<LabeledRep>> = vec![Vec::new(); m];
    for (i, ex) in labeled.into_iter().enumerate() {
        shares[i % m].push(ex);
    }
    let mut next = ensemble.clone();
    for (b, share) in shares.into_iter().enumerate() {
        let mut batch = source.load(&ensemble.batch_manifest[b])?;
        batch.extend(share);
        let _resident = meter.acquire(batch.len());
        next.members[b] = fit_member(&batch, ensemble.config.k)?;
        let mut ids: Vec<String> = batch.iter().map(|x| x.rep.segment_id.clone()).collect();
        ids.sort();
        next.batch_manifest[b] = ids;
    }
    next.labels.push(new_code.to_string());
    next.labels.sort();
    Ok((next, registry))
}

impl PldaEnsemble {
    pub fn input_dim(&self) -> usize {
        self.members.first().map_or(0, |m| m.lda.input_dim())
    }

    /// Classifies a batch of representations in parallel.
    pub fn classify_many(&self, reps: &[RepresentationVector]) -> Result<Vec<Classification>> {
        use rayon::prelude::*;
        reps.par_iter().map(|r| classify(self, r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    /// Gaussian clusters, one per label, in `d` dimensions.
    pub(crate) fn clusters(labels: &[&str], per_class: usize, d: usize, seed: u64) -> Vec<LabeledRep> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut out = Vec::new();
        for label in labels {
            let key = label.bytes().fold(1000u64, |h, b| h.wrapping_mul(257).wrapping_add(b as u64));
            let mut crng = ChaCha8Rng::seed_from_u64(key);
            let center: Vec<f64> = (0..d).map(|_| 2.0 * normal.sample(&mut crng)).collect();
            for s in 0..per_class {
                out.push(LabeledRep {
                    rep: RepresentationVector {
                        segment_id: format!("{label}/{s:04}"),
                        values: center.iter().map(|c| (c + normal.sample(&mut rng)) as f32).collect(),
                    },
                    label: label.to_string(),
                });
            }
        }
        out
    }

    fn cfg(batch: usize) -> BackendConfig {
        BackendConfig {
            batch_segments: batch,
            k: 18,
            min_enroll: 20,
            seed: 3,
            ..BackendConfig::default()
        }
    }

    #[test]
    fn member_count_and_memory_bound() {
        let data = clusters(&["aaa", "bbb", "ccc"], 40, 30, 1);
        let mut src = MemorySource::new(data);
        let meter = ResidencyMeter::new();
        let ens = fit_ensemble(&mut src, &cfg(40), &meter).unwrap();
        assert_eq!(ens.members.len(), 3);
        assert!(meter.peak() <= 40, "peak {}", meter.peak());
        assert!(src.max_request <= 40);
        assert_eq!(meter.current(), 0);
        assert_eq!(ens.labels, vec!["aaa", "bbb", "ccc"]);
    }

    #[test]
    fn plan_arithmetic() {
        let catalog: Vec<(String, String)> =
            (0..12_000).map(|i| (format!("s{i:05}"), format!("l{}", i % 19))).collect();
        let plan = plan_batches(&catalog, &BackendConfig::default()).unwrap();
        assert_eq!(plan.len(), 3);
        assert!(plan.iter().all(|b| b.len() <= 4000));
        assert_eq!(plan.iter().map(Vec::len).sum::<usize>(), 12_000);
    }

    #[test]
    fn missing_class_is_stratification_error() {
        let mut catalog: Vec<(String, String)> = (0..10).map(|i| (format!("a{i}"), "aaa".into())).collect();
        catalog.push(("b0".into(), "bbb".into()));
        let err = plan_batches(&catalog, &cfg(4)).unwrap_err();
        assert!(matches!(err, LidError::Stratification { batch: 0, .. }), "{err:?}");
    }

    #[test]
    fn deterministic_given_seed() {
        let data = clusters(&["aaa", "bbb", "ccc"], 30, 10, 2);
        let meter = ResidencyMeter::new();
        let a = fit_ensemble(&mut MemorySource::new(data.clone()), &cfg(45), &meter).unwrap();
        let b = fit_ensemble(&mut MemorySource::new(data.clone()), &cfg(45), &meter).unwrap();
        assert_eq!(a, b);
        let c = fit_ensemble(&mut MemorySource::new(data), &BackendConfig { seed: 9, ..cfg(45) }, &meter).unwrap();
        assert_ne!(a.batch_manifest, c.batch_manifest);
    }

    #[test]
    fn vote_examples() {
        let v = |l: &str, p: f64| (l.to_string(), p);
        let c = tally(&[v("A", 0.9), v("A", 0.8), v("B", 0.6)], 0.5);
        assert_eq!(c.label, "A");
        assert!((c.confidence - 0.85).abs() < 1e-12);
        assert_eq!((c.votes, c.members), (2, 3));
        let tie = tally(&[v("B", 0.5), v("A", 0.5)], 0.6);
        assert_eq!(tie.label, "A");
        assert!(tie.novel);
    }

    #[test]
    fn single_member_matches_direct_fit() {
        let data = clusters(&["aaa", "bbb", "ccc", "ddd"], 25, 12, 5);
        let meter = ResidencyMeter::new();
        let ens = fit_ensemble(&mut MemorySource::new(data.clone()), &cfg(1000), &meter).unwrap();
        assert_eq!(ens.members.len(), 1);
        let mut sorted = data.clone();
        sorted.sort_by(|a, b| a.rep.segment_id.cmp(&b.rep.segment_id));
        let direct = fit_member(&sorted, 18).unwrap();
        for probe in clusters(&["aaa", "ddd"], 5, 12, 77) {
            let (label, p) = direct.vote(&probe.rep).unwrap();
            let c = classify(&ens, &probe.rep).unwrap();
            assert_eq!(c.label, label);
            assert_eq!(c.confidence, p);
        }
    }

    #[test]
    fn classification_accuracy_on_separated_clusters() {
        let labels = ["aaa", "bbb", "ccc", "ddd"];
        let ens = fit_ensemble(
            &mut MemorySource::new(clusters(&labels, 40, 20, 8)),
            &cfg(80),
            &ResidencyMeter::new(),
        )
        .unwrap();
        let probes = clusters(&labels, 20, 20, 99);
        let correct = probes
            .iter()
            .filter(|p| classify(&ens, &p.rep).unwrap().label == p.label)
            .count();
        assert!(correct as f64 / probes.len() as f64 > 0.8);
    }

    #[test]
    fn enrollment_refits_without_forgetting() {
        let labels = ["aaa", "bbb", "ccc"];
        let mut src = MemorySource::new(clusters(&labels, 40, 20, 4));
        let meter = ResidencyMeter::new();
        let ens = fit_ensemble(&mut src, &cfg(60), &meter).unwrap();
        let registry = LanguageRegistry::new(vec!["xin".into()], labels.iter().map(|s| s.to_string()).collect()).unwrap();
        let probes = clusters(&labels, 20, 20, 50);
        let acc = |e: &PldaEnsemble, ps: &[LabeledRep]| {
            ps.iter().filter(|p| classify(e, &p.rep).unwrap().label == p.label).count() as f64 / ps.len() as f64
        };
        let before = acc(&ens, &probes);

        let new: Vec<LabeledRep> = clusters(&["eee"], 60, 20, 6);
        let (train, test) = new.split_at(40);
        let reps: Vec<RepresentationVector> = train.iter().map(|l| l.rep.clone()).collect();
        let (after_ens, after_reg) =
            enroll_language(&ens, "eee", reps.clone(), &registry, &mut src, &meter).unwrap();
        assert!(after_reg.is_backend_label("eee"));
        assert_eq!(after_ens.labels, vec!["aaa", "bbb", "ccc", "eee"]);
        assert!(after_ens.members.iter().all(|m| m.plda.classes.contains(&"eee".to_string())));
        assert!(acc(&after_ens, test) > 0.6);
        assert!(before - acc(&after_ens, &probes) < 0.1);

        assert!(matches!(
            enroll_language(&ens, "aaa", reps.clone(), &registry, &mut src, &meter),
            Err(LidError::DuplicateCode(_))
        ));
        assert!(matches!(
            enroll_language(&ens, "fff", reps[..10].to_vec(), &registry, &mut src, &meter),
            Err(LidError::InsufficientExamples { required: 20, got: 10 })
        ));
    }
}
