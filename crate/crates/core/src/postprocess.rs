//! Test-time pipeline: per-pixel anomaly scoring against the descriptor bank,
//! dual 1-sigma unknown decisions fused by AND, incremental discovery of new
//! classes with evolving descriptors, offset clustering into instances, and
//! semantic-consistency filtering.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::hdbscan;
use crate::model::{
    canonicalize_instances, BinaryMask, FeatureMap, InstanceMask, ModelError, OffsetField,
    SemanticMask,
};
use crate::scalar::{real, Real};
use crate::stats::{DescriptorBank, StatsError, VAR_FLOOR};

/// Unit variance prior for evolving classes: their shell never shrinks below
/// the contrastive decoder's unit-scale geometry, so pixels of an already
/// discovered class keep joining it instead of seeding duplicates.
pub const EVOLVING_VAR_PRIOR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum PostprocessError {
    EmptyBank,
    ShapeMismatch,
    DimMismatch { expected: usize, got: usize },
    Stats(StatsError),
    Model(ModelError),
}

impl fmt::Display for PostprocessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PostprocessError::EmptyBank => write!(f, "descriptor bank has no usable class"),
            PostprocessError::ShapeMismatch => write!(f, "raster shapes do not match"),
            PostprocessError::DimMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            PostprocessError::Stats(e) => write!(f, "{e}"),
            PostprocessError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PostprocessError {}

impl From<StatsError> for PostprocessError {
    fn from(e: StatsError) -> Self {
        PostprocessError::Stats(e)
    }
}

impl From<ModelError> for PostprocessError {
    fn from(e: ModelError) -> Self {
        PostprocessError::Model(e)
    }
}

/// Per-pixel best class over a bank with the squared-exponential kernel
/// score and the underlying squared Mahalanobis distance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyScores<T> {
    height: usize,
    width: usize,
    best_class: Vec<u32>,
    mahal_sq: Vec<T>,
    score: Vec<T>,
}

impl<T: Real> AnomalyScores<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn best_class(&self, h: usize, w: usize) -> u32 {
        self.best_class[h * self.width + w]
    }

    /// Kernel value of the best class, in `(0, 1]` up to underflow.
    pub fn score(&self, h: usize, w: usize) -> T {
        self.score[h * self.width + w]
    }

    /// Squared Mahalanobis distance to the best class.
    pub fn mahal_sq(&self, h: usize, w: usize) -> T {
        self.mahal_sq[h * self.width + w]
    }
}

/// Mean and floored variance of one usable class, ready for scoring.
struct PreparedClass<T> {
    index: usize,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Scoring variance: frozen classes are floored at `VAR_FLOOR`, evolving
/// classes at the unit prior.
fn scoring_variance<T: Real>(bank: &DescriptorBank<T>, class: usize) -> Option<Vec<T>> {
    let var = bank.variance(class)?;
    let floor = if bank.is_frozen(class) {
        real::<T>(VAR_FLOOR)
    } else {
        real::<T>(EVOLVING_VAR_PRIOR)
    };
    Some(var.into_iter().map(|v| v.max(floor)).collect())
}

fn prepare_classes<T: Real>(
    bank: &DescriptorBank<T>,
    classes: impl Iterator<Item = usize>,
) -> Vec<PreparedClass<T>> {
    classes
        .filter_map(|k| {
            let mean = bank.mean(k)?.to_vec();
            let var = scoring_variance(bank, k)?;
            Some(PreparedClass {
                index: k,
                mean,
                var,
            })
        })
        .collect()
}

fn mahal_sq<T: Real>(feat: &[T], mean: &[T], var: &[T]) -> T {
    let mut acc = T::zero();
    for d in 0..feat.len() {
        let delta = feat[d] - mean[d];
        acc = acc + delta * delta / var[d];
    }
    acc
}

/// Best (lowest squared Mahalanobis) class; ties go to the lowest index.
fn best_class<T: Real>(feat: &[T], classes: &[PreparedClass<T>]) -> (usize, T) {
    let mut best = usize::MAX;
    let mut best_m = T::infinity();
    for c in classes {
        let m = mahal_sq(feat, &c.mean, &c.var);
        if m < best_m {
            best_m = m;
            best = c.index;
        }
    }
    (best, best_m)
}

fn score_with<T: Real>(
    prelogits: &FeatureMap<T>,
    bank: &DescriptorBank<T>,
    classes: &[PreparedClass<T>],
) -> Result<AnomalyScores<T>, PostprocessError> {
    if prelogits.dim() != bank.dim() {
        return Err(PostprocessError::DimMismatch {
            expected: bank.dim(),
            got: prelogits.dim(),
        });
    }
    if classes.is_empty() {
        return Err(PostprocessError::EmptyBank);
    }
    let half = real::<T>(0.5);
    let n = prelogits.height() * prelogits.width();
    let mut best_classes = Vec::with_capacity(n);
    let mut mahals = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for h in 0..prelogits.height() {
        for w in 0..prelogits.width() {
            let (k, m) = best_class(prelogits.pixel(h, w), classes);
            best_classes.push(k as u32);
            mahals.push(m);
            scores.push((-half * m).exp());
        }
    }
    Ok(AnomalyScores {
        height: prelogits.height(),
        width: prelogits.width(),
        best_class: best_classes,
        mahal_sq: mahals,
        score: scores,
    })
}

/// Scores every pixel against every usable class of the bank and keeps the
/// highest kernel value. At test time this overrides argmax-of-softmax.
pub fn score_against_bank<T: Real>(
    prelogits: &FeatureMap<T>,
    bank: &DescriptorBank<T>,
) -> Result<AnomalyScores<T>, PostprocessError> {
    let classes = prepare_classes(bank, 0..bank.num_classes());
    score_with(prelogits, bank, &classes)
}

/// Semantic-branch 1-sigma rule: a pixel is unknown when its best-class
/// squared Mahalanobis distance exceeds the feature dimension D
/// (equivalently, score < exp(-D/2)); the boundary counts as known.
pub fn decide_unknown_semantic<T: Real>(
    scores: &AnomalyScores<T>,
    bank: &DescriptorBank<T>,
) -> BinaryMask {
    let bound = real::<T>(bank.dim() as f64);
    BinaryMask::from_fn(scores.height(), scores.width(), |h, w| {
        scores.mahal_sq(h, w) > bound
    })
}

/// Contrastive-branch 1-sigma rule: unknown norms are modeled as N(0, 1), so
/// a pixel is unknown when its pre-logit norm is at most 1; the boundary
/// counts as unknown.
pub fn decide_unknown_contrastive<T: Real>(prelogits: &FeatureMap<T>) -> BinaryMask {
    BinaryMask::from_fn(prelogits.height(), prelogits.width(), |h, w| {
        let norm_sq = prelogits
            .pixel(h, w)
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v);
        norm_sq <= T::one()
    })
}

/// A pixel is anomalous only if both branches flag it.
pub fn fuse_unknown(sem: &BinaryMask, con: &BinaryMask) -> Result<BinaryMask, PostprocessError> {
    if sem.shape() != con.shape() {
        return Err(PostprocessError::ShapeMismatch);
    }
    Ok(BinaryMask::from_fn(sem.height(), sem.width(), |h, w| {
        sem.get(h, w) && con.get(h, w)
    }))
}

/// Frozen training-time descriptors plus the evolving classes discovered so
/// far. Frozen classes never change; the class count only grows.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryState<T> {
    bank: DescriptorBank<T>,
    num_frozen: usize,
}

impl<T: Real> DiscoveryState<T> {
    /// Starts a stream from a training bank; all its classes are frozen.
    pub fn new(mut bank: DescriptorBank<T>) -> Self {
        bank.freeze_all();
        let num_frozen = bank.num_classes();
        Self { bank, num_frozen }
    }

    /// Restores a previously persisted state; frozen classes must form a
    /// prefix of the bank.
    pub fn from_bank(bank: DescriptorBank<T>) -> Result<Self, PostprocessError> {
        let num_frozen = (0..bank.num_classes())
            .take_while(|&k| bank.is_frozen(k))
            .count();
        for k in num_frozen..bank.num_classes() {
            if bank.is_frozen(k) {
                return Err(PostprocessError::Model(ModelError::InvalidParameter(
                    "frozen classes must form a contiguous prefix",
                )));
            }
        }
        Ok(Self { bank, num_frozen })
    }

    pub fn bank(&self) -> &DescriptorBank<T> {
        &self.bank
    }

    pub fn num_frozen(&self) -> usize {
        self.num_frozen
    }

    pub fn num_discovered(&self) -> usize {
        self.bank.num_classes() - self.num_frozen
    }

    /// Scores against the frozen classes only, as the anomaly branch does.
    pub fn score_frozen(
        &self,
        prelogits: &FeatureMap<T>,
    ) -> Result<AnomalyScores<T>, PostprocessError> {
        let classes = prepare_classes(&self.bank, 0..self.num_frozen);
        score_with(prelogits, &self.bank, &classes)
    }

    /// Assigns every pixel of one image a class id over the current bank.
    ///
    /// Known pixels keep their best frozen class. Anomalous pixels are scored
    /// against the full bank in row-major order: if the best class is an
    /// evolving one within its 1-sigma shell the pixel joins it and updates
    /// its running statistics, otherwise the pixel seeds a new class. Output
    /// labels are bank indices: `0..K` frozen, `K..` discovered.
    pub fn discover_image(
        &mut self,
        prelogits: &FeatureMap<T>,
        anomaly: &BinaryMask,
    ) -> Result<SemanticMask, PostprocessError> {
        if prelogits.shape() != anomaly.shape() {
            return Err(PostprocessError::ShapeMismatch);
        }
        if prelogits.dim() != self.bank.dim() {
            return Err(PostprocessError::DimMismatch {
                expected: self.bank.dim(),
                got: prelogits.dim(),
            });
        }
        let frozen = prepare_classes(&self.bank, 0..self.num_frozen);
        if frozen.is_empty() {
            return Err(PostprocessError::EmptyBank);
        }
        let bound = real::<T>(self.bank.dim() as f64);
        let mut labels = Vec::with_capacity(prelogits.height() * prelogits.width());
        for h in 0..prelogits.height() {
            for w in 0..prelogits.width() {
                let feat = prelogits.pixel(h, w);
                if !anomaly.get(h, w) {
                    labels.push(best_class(feat, &frozen).0 as u32);
                    continue;
                }
                // Best over the full bank; evolving statistics move between
                // pixels, so their shells are rebuilt on the fly.
                let (mut best, mut best_m) = best_class(feat, &frozen);
                for k in self.num_frozen..self.bank.num_classes() {
                    let mean = self.bank.mean(k).expect("evolving classes are seeded");
                    let var = scoring_variance(&self.bank, k).expect("seeded");
                    let m = mahal_sq(feat, mean, &var);
                    if m < best_m {
                        best_m = m;
                        best = k;
                    }
                }
                let label = if best >= self.num_frozen && best_m <= bound {
                    self.bank.update(best, &[feat])?;
                    best
                } else {
                    self.bank.push_class_with_sample(feat, false)?
                };
                labels.push(label as u32);
            }
        }
        Ok(SemanticMask::new(prelogits.height(), prelogits.width(), labels).expect("sized above"))
    }

    /// Converts a full-form mask from [`Self::discover_image`] into the
    /// open-world task encoding: 0 for known, `1..` for discovered classes.
    pub fn to_open_world_labels(&self, semantic: &SemanticMask) -> SemanticMask {
        let k = self.num_frozen as u32;
        SemanticMask::from_fn(semantic.height(), semantic.width(), |h, w| {
            let label = semantic.label(h, w);
            if label < k {
                0
            } else {
                label - k + 1
            }
        })
    }
}

/// Streams several images through discovery, yielding one mask per image.
pub fn discover_classes<T: Real>(
    stream: &[(FeatureMap<T>, BinaryMask)],
    state: &mut DiscoveryState<T>,
) -> Result<Vec<SemanticMask>, PostprocessError> {
    stream
        .iter()
        .map(|(prelogits, anomaly)| state.discover_image(prelogits, anomaly))
        .collect()
}

/// Offset-clustering parameters. `eta` is the clustering-radius
/// hyperparameter carried by the loss-side geometry; the density clustering
/// itself is scale-adaptive and is parameterized by `min_cluster_size` only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams<T> {
    pub min_cluster_size: usize,
    pub eta: T,
}

impl<T: Real> Default for ClusterParams<T> {
    fn default() -> Self {
        Self {
            min_cluster_size: 32,
            eta: T::one(),
        }
    }
}

/// Embeds each thing pixel at its pointed-to location and clusters the
/// embeddings density-based; each cluster becomes an instance, noise and
/// non-thing pixels get id 0.
pub fn cluster_offsets<T: Real>(
    field: &OffsetField<T>,
    thing: &BinaryMask,
    params: &ClusterParams<T>,
) -> Result<InstanceMask, PostprocessError> {
    if field.shape() != thing.shape() {
        return Err(PostprocessError::ShapeMismatch);
    }
    let mut pixels = Vec::new();
    let mut embeddings = Vec::new();
    for h in 0..field.height() {
        for w in 0..field.width() {
            if thing.get(h, w) {
                pixels.push((h, w));
                embeddings.push(field.pointed(h, w));
            }
        }
    }
    let labels = hdbscan::cluster(&embeddings, params.min_cluster_size);
    let mut ids = vec![0u32; field.height() * field.width()];
    for ((h, w), label) in pixels.into_iter().zip(labels) {
        ids[h * field.width() + w] = label;
    }
    let mask = InstanceMask::new(field.height(), field.width(), ids).expect("sized above");
    Ok(canonicalize_instances(&mask))
}

/// Splits every instance along semantic boundaries: output instances are the
/// nonempty (instance, class) intersections, re-canonicalized. The semantic
/// prediction is trusted over the instance grouping.
pub fn filter_instances_by_semantics(
    inst: &InstanceMask,
    sem: &SemanticMask,
) -> Result<InstanceMask, PostprocessError> {
    if inst.shape() != sem.shape() {
        return Err(PostprocessError::ShapeMismatch);
    }
    let mut map: HashMap<(u32, u32), u32> = HashMap::new();
    let mut next = 1u32;
    let ids = inst
        .ids()
        .iter()
        .zip(sem.labels())
        .map(|(&id, &class)| {
            if id == 0 {
                0
            } else {
                *map.entry((id, class)).or_insert_with(|| {
                    let v = next;
                    next += 1;
                    v
                })
            }
        })
        .collect();
    Ok(InstanceMask::new(inst.height(), inst.width(), ids).expect("same size"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams<T> {
    /// Known classes (bank indices) that have instances; discovered classes
    /// are always treated as things.
    pub thing_classes: BTreeSet<u32>,
    pub cluster: ClusterParams<T>,
}

impl<T: Real> Default for PipelineParams<T> {
    fn default() -> Self {
        Self {
            thing_classes: BTreeSet::new(),
            cluster: ClusterParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Per-pixel bank indices: `0..K` frozen classes, `K..` discovered.
    pub semantic: SemanticMask,
    /// Open-world task encoding: 0 known, `1..` discovered classes.
    pub open_world_semantic: SemanticMask,
    /// Instances over the whole thing area (known things included),
    /// consistent with `semantic`.
    pub instances: InstanceMask,
    /// Fused anomaly mask.
    pub anomaly: BinaryMask,
}

impl PipelineOutput {
    /// Instances restricted to the discovered classes, re-canonicalized:
    /// the instance mask in the open-set / open-world task encoding, where
    /// id 0 covers known and no-object areas.
    pub fn open_world_instances(&self) -> InstanceMask {
        let masked =
            InstanceMask::from_fn(self.instances.height(), self.instances.width(), |h, w| {
                if self.open_world_semantic.label(h, w) >= 1 {
                    self.instances.id(h, w)
                } else {
                    0
                }
            });
        canonicalize_instances(&masked)
    }
}

/// Full test-time composition: score, decide, fuse, discover, cluster,
/// filter. Deterministic for identical inputs and state.
pub fn run_pipeline<T: Real>(
    sem_prelogits: &FeatureMap<T>,
    con_prelogits: &FeatureMap<T>,
    offsets: &OffsetField<T>,
    state: &mut DiscoveryState<T>,
    params: &PipelineParams<T>,
) -> Result<PipelineOutput, PostprocessError> {
    if sem_prelogits.shape() != con_prelogits.shape() || sem_prelogits.shape() != offsets.shape() {
        return Err(PostprocessError::ShapeMismatch);
    }
    let scores = state.score_frozen(sem_prelogits)?;
    let unk_sem = decide_unknown_semantic(&scores, state.bank());
    let unk_con = decide_unknown_contrastive(con_prelogits);
    let anomaly = fuse_unknown(&unk_sem, &unk_con)?;

    let semantic = state.discover_image(sem_prelogits, &anomaly)?;

    let num_frozen = state.num_frozen() as u32;
    let thing = BinaryMask::from_fn(semantic.height(), semantic.width(), |h, w| {
        let label = semantic.label(h, w);
        label >= num_frozen || params.thing_classes.contains(&label)
    });
    let clustered = cluster_offsets(offsets, &thing, &params.cluster)?;
    let instances = filter_instances_by_semantics(&clustered, &semantic)?;
    let open_world_semantic = state.to_open_world_labels(&semantic);

    Ok(PipelineOutput {
        semantic,
        open_world_semantic,
        instances,
        anomaly,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_pair;
    use crate::synth::rng::SplitMix64;

    fn bank_2d() -> DescriptorBank<f64> {
        DescriptorBank::from_moments(
            2,
            vec![
                (vec![0.0, 0.0], vec![1.0, 1.0], 100, true),
                (vec![10.0, 10.0], vec![1.0, 1.0], 100, true),
            ],
        )
        .unwrap()
    }

    #[test]
    fn score_is_one_at_the_descriptor() {
        let bank = bank_2d();
        let prelogits = FeatureMap::new(1, 1, 2, vec![10.0, 10.0]).unwrap();
        let scores = score_against_bank(&prelogits, &bank).unwrap();
        assert_eq!(scores.best_class(0, 0), 1);
        assert_eq!(scores.score(0, 0), 1.0);
    }

    #[test]
    fn unit_offset_scores_e_minus_one() {
        let bank = bank_2d();
        let prelogits = FeatureMap::new(1, 1, 2, vec![1.0, 1.0]).unwrap();
        let scores = score_against_bank(&prelogits, &bank).unwrap();
        assert_eq!(scores.best_class(0, 0), 0);
        assert!((scores.score(0, 0) - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn scores_match_per_class_oracle() {
        let mut rng = SplitMix64::new(13);
        let moments: Vec<(Vec<f64>, Vec<f64>, u64, bool)> = (0..3)
            .map(|_| {
                (
                    (0..4).map(|_| rng.next_f64() * 4.0 - 2.0).collect(),
                    (0..4).map(|_| rng.next_f64() + 0.2).collect(),
                    50,
                    true,
                )
            })
            .collect();
        let bank = DescriptorBank::from_moments(4, moments.clone()).unwrap();
        let prelogits = FeatureMap::from_fn(3, 3, 4, |_, _, _| rng.next_f64() * 6.0 - 3.0);
        let scores = score_against_bank(&prelogits, &bank).unwrap();
        for h in 0..3 {
            for w in 0..3 {
                let feat = prelogits.pixel(h, w);
                let mut best = 0usize;
                let mut best_m = f64::INFINITY;
                for (k, m) in moments.iter().enumerate() {
                    let mut acc = 0.0;
                    for d in 0..4 {
                        acc += (feat[d] - m.0[d]).powi(2) / m.1[d].max(VAR_FLOOR);
                    }
                    if acc < best_m {
                        best_m = acc;
                        best = k;
                    }
                }
                assert_eq!(scores.best_class(h, w), best as u32);
                assert!((scores.score(h, w) - (-0.5 * best_m).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_bank_is_rejected() {
        let bank = DescriptorBank::<f64>::new(2, 2);
        let prelogits = FeatureMap::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            score_against_bank(&prelogits, &bank),
            Err(PostprocessError::EmptyBank)
        ));
    }

    #[test]
    fn semantic_decision_boundary_is_known() {
        let bank = bank_2d();
        // Mahalanobis^2 = 2 = D exactly: boundary counts as known.
        let at_boundary = FeatureMap::new(1, 1, 2, vec![1.0, 1.0]).unwrap();
        let scores = score_against_bank(&at_boundary, &bank).unwrap();
        let unknown = decide_unknown_semantic(&scores, &bank);
        assert!(!unknown.get(0, 0));

        // Mahalanobis^2 = 8 > D: unknown.
        let far = FeatureMap::new(1, 1, 2, vec![2.0, 2.0]).unwrap();
        let scores = score_against_bank(&far, &bank).unwrap();
        let unknown = decide_unknown_semantic(&scores, &bank);
        assert!(unknown.get(0, 0));
    }

    #[test]
    fn contrastive_decision_boundary_is_unknown() {
        let prelogits = FeatureMap::new(1, 3, 2, vec![0.0, 0.0, 1.5, 0.0, 1.0, 0.0]).unwrap();
        let unknown = decide_unknown_contrastive(&prelogits);
        assert!(unknown.get(0, 0)); // zero vector
        assert!(!unknown.get(0, 1)); // norm 1.5
        assert!(unknown.get(0, 2)); // norm exactly 1
    }

    #[test]
    fn fusion_is_logical_and() {
        let a = BinaryMask::new(1, 3, vec![true, true, false]).unwrap();
        let b = BinaryMask::new(1, 3, vec![true, false, false]).unwrap();
        let fused = fuse_unknown(&a, &b).unwrap();
        assert_eq!(fused.values(), &[true, false, false]);
        // AND-dominance: fused set is contained in both inputs.
        for i in 0..3 {
            assert!(!fused.values()[i] || a.values()[i]);
            assert!(!fused.values()[i] || b.values()[i]);
        }
        let c = BinaryMask::filled(2, 2, true);
        assert!(matches!(
            fuse_unknown(&a, &c),
            Err(PostprocessError::ShapeMismatch)
        ));
    }

    #[test]
    fn first_anomalous_pixel_seeds_a_class() {
        let mut state = DiscoveryState::new(bank_2d());
        let prelogits = FeatureMap::new(1, 1, 2, vec![5.0, -5.0]).unwrap();
        let anomaly = BinaryMask::filled(1, 1, true);
        let out = state.discover_image(&prelogits, &anomaly).unwrap();
        assert_eq!(out.label(0, 0), 2);
        assert_eq!(state.num_discovered(), 1);
        assert_eq!(state.bank().count(2), 1);
        assert_eq!(state.bank().mean(2).unwrap(), &[5.0, -5.0]);
    }

    #[test]
    fn identical_anomalous_pixels_share_a_class() {
        let mut state = DiscoveryState::new(bank_2d());
        let prelogits = FeatureMap::new(1, 2, 2, vec![5.0, -5.0, 5.0, -5.0]).unwrap();
        let anomaly = BinaryMask::filled(1, 2, true);
        let out = state.discover_image(&prelogits, &anomaly).unwrap();
        assert_eq!(out.label(0, 0), 2);
        assert_eq!(out.label(0, 1), 2);
        assert_eq!(state.num_discovered(), 1);
        assert_eq!(state.bank().count(2), 2);
        assert_eq!(state.bank().mean(2).unwrap(), &[5.0, -5.0]);
    }

    #[test]
    fn well_separated_streams_discover_two_classes() {
        let mut state = DiscoveryState::new(bank_2d());
        let mut rng = SplitMix64::new(21);
        let mu_a = [30.0, -30.0];
        let mu_b = [-30.0, 30.0];
        let n = 120;
        let prelogits = FeatureMap::from_fn(2, n, 2, |h, _, d| {
            let mu = if h == 0 { mu_a } else { mu_b };
            mu[d] + 0.2 * rng.next_normal()
        });
        let anomaly = BinaryMask::filled(2, n, true);
        let out = state.discover_image(&prelogits, &anomaly).unwrap();
        assert_eq!(state.num_discovered(), 2);
        for w in 0..n {
            assert_eq!(out.label(0, w), 2);
            assert_eq!(out.label(1, w), 3);
        }
        let mean_a = state.bank().mean(2).unwrap();
        assert!((mean_a[0] - 30.0).abs() < 0.1);
    }

    #[test]
    fn frozen_classes_stay_bit_identical() {
        let bank = bank_2d();
        let frozen_before: Vec<(Vec<f64>, Vec<f64>, u64)> = (0..2)
            .map(|k| {
                (
                    bank.mean(k).unwrap().to_vec(),
                    bank.variance(k).unwrap(),
                    bank.count(k),
                )
            })
            .collect();
        let mut state = DiscoveryState::new(bank);
        let mut rng = SplitMix64::new(9);
        let prelogits = FeatureMap::from_fn(4, 4, 2, |_, _, _| rng.next_f64() * 60.0 - 30.0);
        let anomaly = BinaryMask::from_fn(4, 4, |h, w| (h + w) % 2 == 0);
        state.discover_image(&prelogits, &anomaly).unwrap();
        for k in 0..2 {
            assert_eq!(state.bank().mean(k).unwrap(), frozen_before[k].0.as_slice());
            assert_eq!(state.bank().variance(k).unwrap(), frozen_before[k].1);
            assert_eq!(state.bank().count(k), frozen_before[k].2);
        }
        assert!(state.bank().is_frozen(0) && state.bank().is_frozen(1));
    }

    #[test]
    fn empty_thing_mask_clusters_to_all_zeros() {
        let field = OffsetField::from_fn(4, 4, |_, _| [0.0, 0.0]);
        let thing = BinaryMask::filled(4, 4, false);
        let out = cluster_offsets(&field, &thing, &ClusterParams::default()).unwrap();
        assert!(out.ids().iter().all(|&id| id == 0));
    }

    #[test]
    fn two_noisy_sinks_cluster_into_two_instances() {
        let mut rng = SplitMix64::new(33);
        let height = 30;
        let width = 30;
        // Two 10x10 squares of thing pixels sinking to distinct centers.
        let thing = BinaryMask::from_fn(height, width, |h, w| {
            (h < 10 && w < 10) || (h >= 20 && w >= 20)
        });
        let field = OffsetField::from_fn(height, width, |h, w| {
            let target: [f64; 2] = if h < 10 && w < 10 {
                [5.0, 5.0]
            } else {
                [25.0, 25.0]
            };
            [
                target[0] - h as f64 + 0.5 * rng.next_normal(),
                target[1] - w as f64 + 0.5 * rng.next_normal(),
            ]
        });
        let params = ClusterParams {
            min_cluster_size: 10,
            eta: 1.0,
        };
        let out = cluster_offsets(&field, &thing, &params).unwrap();
        let distinct: BTreeSet<u32> = out.ids().iter().copied().filter(|&i| i != 0).collect();
        assert_eq!(distinct.len(), 2);
        // First square got instance 1, second instance 2 (row-major order).
        let mut agree = 0;
        let mut total = 0;
        for h in 0..height {
            for w in 0..width {
                if !thing.get(h, w) {
                    assert_eq!(out.id(h, w), 0);
                    continue;
                }
                total += 1;
                let expected = if h < 10 { 1 } else { 2 };
                if out.id(h, w) == expected {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 >= 0.99 * total as f64);
    }

    #[test]
    fn filtering_splits_straddling_instances() {
        let sem = SemanticMask::new(1, 4, vec![1, 1, 2, 2]).unwrap();
        let inst = InstanceMask::new(1, 4, vec![1, 1, 1, 0]).unwrap();
        let out = filter_instances_by_semantics(&inst, &sem).unwrap();
        assert_eq!(out.ids(), &[1, 1, 2, 0]);
        validate_pair(&sem, &out).unwrap();

        let inside = InstanceMask::new(1, 4, vec![3, 3, 0, 0]).unwrap();
        let kept = filter_instances_by_semantics(&inside, &sem).unwrap();
        assert_eq!(kept.ids(), &[1, 1, 0, 0]);
    }

    #[test]
    fn filtered_output_is_always_panoptic_consistent() {
        let mut rng = SplitMix64::new(55);
        for _ in 0..50 {
            let sem = SemanticMask::from_fn(6, 6, |_, _| (rng.next_u64() % 3) as u32);
            let inst = InstanceMask::from_fn(6, 6, |_, _| (rng.next_u64() % 4) as u32);
            let out = filter_instances_by_semantics(&inst, &sem).unwrap();
            validate_pair(&sem, &out).unwrap();
            // Fixpoint: filtering again changes nothing.
            assert_eq!(filter_instances_by_semantics(&out, &sem).unwrap(), out);
        }
    }
}
