//! The full model: structural embeddings, per-modality projection and expert
//! networks, MI heads, and the fused joint embedding fed to RotatE.
//!
//! Every non-structural modality goes through
//! `raw → projection MLP → K experts → intra-modality fusion`. The learnable
//! structural row is its own (single) view. The fused modality embeddings
//! are then combined per entity by inter-modality fusion; modalities an
//! entity lacks are left out and the weights renormalize over the rest.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, AutodiffError, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::fusion::{
    complementarity_weights, mutual_information_rows, pair_index, symmetric_from_pairs, ComplementarityWeights,
    FusionError, MutualInformation,
};
use crate::kgdata::{ModalityFeatureTable, Triple};
use crate::sampling::{self, EgnsConfig, NegativeSample, Side};
use crate::scoring::{self, Norm, RotateDistance, ScoringError};

/// Name under which the structural modality appears in weights and logs.
pub const STRUCTURE: &str = "structure";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("modality '{modality}' expects {expected}-dimensional input, got {got}")]
    InputDimension { modality: String, expected: usize, got: usize },
    #[error("unknown modality '{0}'")]
    UnknownModality(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Expert networks per modality.
    pub experts: usize,
    /// Bins of the categorical distributions used for MI estimation.
    pub mi_bins: usize,
    /// Let gradients flow through the fusion weights into the MI heads.
    pub grad_through_weights: bool,
    /// MI-based weighting of expert views; uniform weights when off.
    pub intra_weighting: bool,
    /// MI-based weighting of modalities; uniform over present ones when off.
    pub inter_weighting: bool,
    /// Entities used to estimate fusion weights at evaluation time.
    pub mi_ref_batch: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            experts: 3,
            mi_bins: 16,
            grad_through_weights: false,
            intra_weighting: true,
            inter_weighting: true,
            mi_ref_batch: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub norm: Norm,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            norm: Norm::L2,
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(ModelError::Config(format!(
                "embedding dimension must be a positive even number, got {}",
                self.dim
            )));
        }
        if self.fusion.experts == 0 {
            return Err(ModelError::Config("at least one expert per modality is required".into()));
        }
        if self.fusion.mi_bins < 2 {
            return Err(ModelError::Config(format!("mi_bins must be at least 2, got {}", self.fusion.mi_bins)));
        }
        if self.fusion.mi_ref_batch == 0 {
            return Err(ModelError::Config("mi_ref_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Two affine layers with a ReLU in between.
#[derive(Debug, Clone, Copy)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Affine map into `c` logits followed by a softmax.
#[derive(Debug, Clone, Copy)]
struct MiHead {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ModalityBlock {
    table: ModalityFeatureTable,
    proj: Mlp,
    experts: Vec<Mlp>,
    view_heads: Vec<MiHead>,
    head: MiHead,
}

/// Fusion weights in effect for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    /// Per non-structural modality, the `K` view weights.
    pub intra: Vec<Vec<f64>>,
    /// Symmetric `M×M` inter-modality MI matrix, structure first.
    pub inter_mi: Vec<f64>,
}

/// Where the fusion weights of a forward pass come from.
#[derive(Debug, Clone, Copy)]
pub enum WeightSource<'a> {
    /// Estimated from the entities of the current batch.
    Batch,
    /// Fixed values, e.g. from a reference batch or a previous step.
    Frozen(&'a FusionWeights),
}

#[derive(Debug, Clone)]
pub struct JointOutput {
    /// `[n × d]` joint embeddings, one row per requested entity.
    pub joint: NodeId,
    pub weights: FusionWeights,
    /// `[n × M]` inter-modality weights actually applied.
    pub inter: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    num_entities: usize,
    num_relations: usize,
    entity: ParamId,
    phase: ParamId,
    structure_head: MiHead,
    modalities: Vec<ModalityBlock>,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("shape matches data")
}

fn affine(x: &[f32], n: usize, din: usize, w: &Tensor, b: &Tensor) -> Vec<f32> {
    let dout = w.cols();
    let mut out = vec![0.0f32; n * dout];
    for i in 0..n {
        for j in 0..dout {
            let mut acc = b.data()[j] as f64;
            for k in 0..din {
                acc += x[i * din + k] as f64 * w.data()[k * dout + j] as f64;
            }
            out[i * dout + j] = acc as f32;
        }
    }
    out
}

impl Model {
    /// Builds a Xavier-initialized model. Modality tables must be indexed by
    /// the same entity vocabulary as the graph.
    pub fn new(
        config: ModelConfig,
        num_entities: usize,
        num_relations: usize,
        modalities: Vec<ModalityFeatureTable>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut names = BTreeSet::new();
        for t in &modalities {
            if t.name == STRUCTURE || !names.insert(t.name.clone()) {
                return Err(ModelError::Config(format!("duplicate or reserved modality name '{}'", t.name)));
            }
            if t.num_entities() != num_entities {
                return Err(ModelError::Config(format!(
                    "modality '{}' covers {} entities, the graph has {}",
                    t.name,
                    t.num_entities(),
                    num_entities
                )));
            }
            if t.dim == 0 {
                return Err(ModelError::Config(format!("modality '{}' has zero-length features", t.name)));
            }
        }
        let d = config.dim;
        let c = config.fusion.mi_bins;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        let entity = params.insert("entity", xavier(num_entities, d, &mut rng));
        let phase_dist = Uniform::new_inclusive(-std::f32::consts::PI, std::f32::consts::PI);
        let phases = (0..num_relations * d / 2).map(|_| phase_dist.sample(&mut rng)).collect();
        let phase = params.insert("relation.phase", Tensor::matrix(num_relations, d / 2, phases)?);

        let head = |params: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| MiHead {
            w: params.insert(format!("{prefix}.w"), xavier(d, c, rng)),
            b: params.insert(format!("{prefix}.b"), Tensor::zeros(vec![c])),
        };
        let structure_head = head(&mut params, "structure.mi", &mut rng);

        let mlp = |params: &mut ParamStore, prefix: &str, din: usize, rng: &mut ChaCha8Rng| Mlp {
            w1: params.insert(format!("{prefix}.w1"), xavier(din, d, rng)),
            b1: params.insert(format!("{prefix}.b1"), Tensor::zeros(vec![d])),
            w2: params.insert(format!("{prefix}.w2"), xavier(d, d, rng)),
            b2: params.insert(format!("{prefix}.b2"), Tensor::zeros(vec![d])),
        };
        let mut blocks = Vec::with_capacity(modalities.len());
        for table in modalities {
            let m = table.name.clone();
            let proj = mlp(&mut params, &format!("{m}.proj"), table.dim, &mut rng);
            let experts = (0..config.fusion.experts)
                .map(|i| mlp(&mut params, &format!("{m}.expert{i}"), d, &mut rng))
                .collect();
            let view_heads = (0..config.fusion.experts)
                .map(|i| head(&mut params, &format!("{m}.view{i}.mi"), &mut rng))
                .collect();
            let fused_head = head(&mut params, &format!("{m}.mi"), &mut rng);
            blocks.push(ModalityBlock {
                table,
                proj,
                experts,
                view_heads,
                head: fused_head,
            });
        }
        Ok(Self {
            config,
            params,
            num_entities,
            num_relations,
            entity,
            phase,
            structure_head,
            modalities: blocks,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Structure first, then the other modalities in construction order.
    pub fn modality_names(&self) -> Vec<&str> {
        std::iter::once(STRUCTURE)
            .chain(self.modalities.iter().map(|b| b.table.name.as_str()))
            .collect()
    }

    pub fn modality_tables(&self) -> impl Iterator<Item = &ModalityFeatureTable> {
        self.modalities.iter().map(|b| &b.table)
    }

    pub fn entity_block(&self) -> ParamId {
        self.entity
    }

    pub fn phase_block(&self) -> ParamId {
        self.phase
    }

    pub fn phases(&self, relation: usize) -> &[f32] {
        self.params.get(self.phase).row(relation)
    }

    fn block(&self, modality: &str) -> Result<&ModalityBlock, ModelError> {
        self.modalities
            .iter()
            .find(|b| b.table.name == modality)
            .ok_or_else(|| ModelError::UnknownModality(modality.to_string()))
    }

    fn mlp_values(&self, x: &[f32], n: usize, din: usize, mlp: &Mlp) -> Vec<f32> {
        let p = &self.params;
        let mut h = affine(x, n, din, p.get(mlp.w1), p.get(mlp.b1));
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        affine(&h, n, self.config.dim, p.get(mlp.w2), p.get(mlp.b2))
    }

    fn head_values(&self, x: &[f32], n: usize, head: &MiHead) -> Vec<f32> {
        let logits = affine(x, n, self.config.dim, self.params.get(head.w), self.params.get(head.b));
        let c = self.config.fusion.mi_bins;
        logits.chunks(c).flat_map(softmax_row).collect()
    }

    /// Projects one raw feature vector into the shared embedding space.
    pub fn project(&self, raw: &[f32], modality: &str) -> Result<Vec<f32>, ModelError> {
        let b = self.block(modality)?;
        if raw.len() != b.table.dim {
            return Err(ModelError::InputDimension {
                modality: modality.to_string(),
                expected: b.table.dim,
                got: raw.len(),
            });
        }
        Ok(self.mlp_values(raw, 1, b.table.dim, &b.proj))
    }

    /// The `K` expert views of a projected embedding.
    pub fn expert_views(&self, v: &[f32], modality: &str) -> Result<Vec<Vec<f32>>, ModelError> {
        let b = self.block(modality)?;
        if v.len() != self.config.dim {
            return Err(ModelError::InputDimension {
                modality: modality.to_string(),
                expected: self.config.dim,
                got: v.len(),
            });
        }
        Ok(b.experts.iter().map(|e| self.mlp_values(v, 1, self.config.dim, e)).collect())
    }

    fn mlp_node(&self, g: &mut Graph, x: NodeId, mlp: &Mlp) -> Result<NodeId, AutodiffError> {
        let p = &self.params;
        let (w1, b1, w2, b2) = (g.param(p, mlp.w1)?, g.param(p, mlp.b1)?, g.param(p, mlp.w2)?, g.param(p, mlp.b2)?);
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, w2)?;
        g.add(o, b2)
    }

    fn head_node(&self, g: &mut Graph, x: NodeId, head: &MiHead) -> Result<NodeId, AutodiffError> {
        let w = g.param(&self.params, head.w)?;
        let b = g.param(&self.params, head.b)?;
        let l = g.matmul(x, w)?;
        let l = g.add(l, b)?;
        g.softmax(l)
    }

    /// Joint embeddings for `entities` (all distinct) on the tape.
    pub fn joint_embeddings(
        &self,
        g: &mut Graph,
        entities: &[usize],
        source: WeightSource<'_>,
    ) -> Result<JointOutput, ModelError> {
        let n = entities.len();
        if n == 0 {
            return Err(ModelError::Config("joint embeddings of an empty entity set".into()));
        }
        let fc = &self.config.fusion;
        let (d, c, k) = (self.config.dim, fc.mi_bins, fc.experts);
        let m_total = 1 + self.modalities.len();
        let grad_through = fc.grad_through_weights && matches!(source, WeightSource::Batch);

        let structural = g.gather_param(&self.params, self.entity, entities)?;
        // Per modality: full-height embedding node, compact node, and the
        // compact row of each local entity.
        let mut full = vec![structural];
        let mut compact: Vec<Option<NodeId>> = vec![Some(structural)];
        let mut positions: Vec<Vec<Option<usize>>> = vec![(0..n).map(Some).collect()];
        let mut intra = Vec::with_capacity(self.modalities.len());

        for (mi, block) in self.modalities.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| block.table.has(entities[i])).collect();
            let mut pos = vec![None; n];
            for (p, &i) in rows.iter().enumerate() {
                pos[i] = Some(p);
            }
            positions.push(pos);
            if rows.is_empty() {
                intra.push(match source {
                    WeightSource::Frozen(fw) => fw.intra[mi].clone(),
                    WeightSource::Batch => vec![1.0 / k as f64; k],
                });
                compact.push(None);
                full.push(g.constant(Tensor::zeros(vec![n, d]))?);
                continue;
            }
            let din = block.table.dim;
            let mut raw = Vec::with_capacity(rows.len() * din);
            for &i in &rows {
                raw.extend_from_slice(block.table.get(entities[i]).expect("row is present"));
            }
            let x = g.constant(Tensor::matrix(rows.len(), din, raw)?)?;
            let v = self.mlp_node(g, x, &block.proj)?;
            let views = block
                .experts
                .iter()
                .map(|e| self.mlp_node(g, v, e))
                .collect::<Result<Vec<_>, _>>()?;

            let weight_node = match source {
                WeightSource::Frozen(fw) => {
                    let w = &fw.intra[mi];
                    if w.len() != k {
                        return Err(ModelError::Config(format!(
                            "frozen weights hold {} views for '{}', the model has {k}",
                            w.len(),
                            block.table.name
                        )));
                    }
                    intra.push(w.clone());
                    g.constant(Tensor::vector(w.iter().map(|&x| x as f32).collect()))?
                }
                WeightSource::Batch if k == 1 || !fc.intra_weighting => {
                    let w = vec![1.0 / k as f64; k];
                    intra.push(w.clone());
                    g.constant(Tensor::vector(w.iter().map(|&x| x as f32).collect()))?
                }
                WeightSource::Batch if grad_through => {
                    let dists = views
                        .iter()
                        .zip(&block.view_heads)
                        .map(|(&v, h)| self.head_node(g, v, h))
                        .collect::<Result<Vec<_>, _>>()?;
                    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
                    for i in 0..k {
                        for j in i + 1..k {
                            pairs.push(g.apply(MutualInformation, &[dists[i], dists[j]])?);
                        }
                    }
                    let w = g.apply(ComplementarityWeights::all_present(k), &pairs)?;
                    intra.push(g.value(w).data().iter().map(|&x| x as f64).collect());
                    w
                }
                WeightSource::Batch => {
                    let dists: Vec<Vec<f32>> = views
                        .iter()
                        .zip(&block.view_heads)
                        .map(|(&v, h)| self.head_values(g.value(v).data(), rows.len(), h))
                        .collect();
                    let mut pairs = vec![0.0; k * (k - 1) / 2];
                    for i in 0..k {
                        for j in i + 1..k {
                            pairs[pair_index(i, j, k)] = mutual_information_rows(&dists[i], &dists[j], c)?;
                        }
                    }
                    let w = complementarity_weights(&symmetric_from_pairs(&pairs, k), &vec![true; k])?;
                    intra.push(w.clone());
                    g.constant(Tensor::vector(w.iter().map(|&x| x as f32).collect()))?
                }
            };
            let fused = g.row_weighted_sum(&views, weight_node)?;
            compact.push(Some(fused));
            full.push(g.scatter_rows(fused, &rows, n)?);
        }

        let mut mask = vec![false; n * m_total];
        for (m, pos) in positions.iter().enumerate() {
            for i in 0..n {
                mask[i * m_total + m] = pos[i].is_some();
            }
        }
        let common = |a: usize, b: usize| -> (Vec<usize>, Vec<usize>) {
            (0..n)
                .filter_map(|i| Some((positions[a][i]?, positions[b][i]?)))
                .unzip()
        };
        let heads: Vec<&MiHead> = std::iter::once(&self.structure_head)
            .chain(self.modalities.iter().map(|b| &b.head))
            .collect();

        let (inter_mi, weight_node) = match source {
            WeightSource::Frozen(fw) => {
                if fw.inter_mi.len() != m_total * m_total {
                    return Err(FusionError::MiShape {
                        expected: m_total,
                        got: fw.inter_mi.len(),
                    }
                    .into());
                }
                (fw.inter_mi.clone(), None)
            }
            WeightSource::Batch if m_total == 1 || !fc.inter_weighting => (vec![0.0; m_total * m_total], None),
            WeightSource::Batch if grad_through => {
                let dists = compact
                    .iter()
                    .zip(&heads)
                    .map(|(node, h)| node.map(|x| self.head_node(g, x, h)).transpose())
                    .collect::<Result<Vec<_>, _>>()?;
                let mut pairs = Vec::new();
                let mut values = vec![0.0; m_total * (m_total - 1) / 2];
                for a in 0..m_total {
                    for b in a + 1..m_total {
                        let (ra, rb) = common(a, b);
                        let node = match (dists[a], dists[b]) {
                            (Some(da), Some(db)) if !ra.is_empty() => {
                                let sa = g.select_rows(da, &ra)?;
                                let sb = g.select_rows(db, &rb)?;
                                g.apply(MutualInformation, &[sa, sb])?
                            }
                            _ => g.constant(Tensor::scalar(0.0))?,
                        };
                        values[pair_index(a, b, m_total)] = g.value(node).item() as f64;
                        pairs.push(node);
                    }
                }
                let w = g.apply(ComplementarityWeights::new(m_total, mask.clone()), &pairs)?;
                (symmetric_from_pairs(&values, m_total), Some(w))
            }
            WeightSource::Batch => {
                let dists: Vec<Option<Vec<f32>>> = compact
                    .iter()
                    .zip(&heads)
                    .map(|(node, h)| node.map(|x| self.head_values(g.value(x).data(), g.value(x).rows(), h)))
                    .collect();
                let mut values = vec![0.0; m_total * (m_total - 1) / 2];
                for a in 0..m_total {
                    for b in a + 1..m_total {
                        let (ra, rb) = common(a, b);
                        if let (Some(da), Some(db)) = (&dists[a], &dists[b]) {
                            if !ra.is_empty() {
                                let sa: Vec<f32> = ra.iter().flat_map(|&r| da[r * c..(r + 1) * c].iter().copied()).collect();
                                let sb: Vec<f32> = rb.iter().flat_map(|&r| db[r * c..(r + 1) * c].iter().copied()).collect();
                                values[pair_index(a, b, m_total)] = mutual_information_rows(&sa, &sb, c)?;
                            }
                        }
                    }
                }
                (symmetric_from_pairs(&values, m_total), None)
            }
        };

        let (weight_node, inter) = match weight_node {
            Some(w) => {
                let vals = g.value(w).data().iter().map(|&x| x as f64).collect();
                (w, vals)
            }
            None => {
                let mut vals = Vec::with_capacity(n * m_total);
                for row in mask.chunks(m_total) {
                    vals.extend(complementarity_weights(&inter_mi, row)?);
                }
                let t = Tensor::matrix(n, m_total, vals.iter().map(|&x| x as f32).collect())?;
                (g.constant(t)?, vals)
            }
        };
        let joint = g.row_weighted_sum(&full, weight_node)?;
        Ok(JointOutput {
            joint,
            weights: FusionWeights { intra, inter_mi },
            inter,
        })
    }

    /// Fusion weights estimated over `entities` (no gradients).
    pub fn fusion_weights(&self, entities: &[usize]) -> Result<FusionWeights, ModelError> {
        let mut g = Graph::new();
        Ok(self.joint_embeddings(&mut g, entities, WeightSource::Batch)?.weights)
    }

    /// Fusion weights from the evaluation reference batch: the first
    /// `mi_ref_batch` entity indices.
    pub fn reference_weights(&self) -> Result<FusionWeights, ModelError> {
        let n = self.config.fusion.mi_ref_batch.min(self.num_entities);
        let ents: Vec<usize> = (0..n).collect();
        self.fusion_weights(&ents)
    }

    /// Joint embeddings of every entity under fixed weights, `[|E| × d]` row-major.
    pub fn all_joint_embeddings(&self, weights: &FusionWeights) -> Result<Vec<f32>, ModelError> {
        const CHUNK: usize = 1024;
        let mut out = Vec::with_capacity(self.num_entities * self.config.dim);
        let ents: Vec<usize> = (0..self.num_entities).collect();
        for chunk in ents.chunks(CHUNK) {
            let mut g = Graph::new();
            let j = self.joint_embeddings(&mut g, chunk, WeightSource::Frozen(weights))?;
            out.extend_from_slice(g.value(j.joint).data());
        }
        Ok(out)
    }

    /// Frozen scoring tables (joint embeddings + phases) for ranking.
    pub fn scoring_tables(&self) -> Result<ScoringTables, ModelError> {
        let weights = self.reference_weights()?;
        Ok(ScoringTables {
            dim: self.config.dim,
            norm: self.config.norm,
            entities: self.all_joint_embeddings(&weights)?,
            phases: self.params.get(self.phase).data().to_vec(),
        })
    }

    /// Builds the weighted loss of one batch on the tape.
    ///
    /// `negatives` holds `N` corruptions per positive, grouped by positive.
    /// The per-negative loss weights λ come from the entropy classes of the
    /// current scores unless `lambdas` overrides them.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        positives: &[Triple],
        negatives: &[(Triple, Side)],
        egns: &EgnsConfig,
        source: WeightSource<'_>,
        lambdas: Option<&[f64]>,
    ) -> Result<BatchLoss, ModelError> {
        if positives.is_empty() || negatives.is_empty() || negatives.len() % positives.len() != 0 {
            return Err(ModelError::Config(format!(
                "{} negatives cannot be split evenly over {} positives",
                negatives.len(),
                positives.len()
            )));
        }
        let ents: Vec<usize> = positives
            .iter()
            .chain(negatives.iter().map(|(t, _)| t))
            .flat_map(|t| [t.head, t.tail])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let local = |e: usize| ents.binary_search(&e).expect("entity collected above");
        let fused = self.joint_embeddings(g, &ents, source)?;

        let score = |g: &mut Graph, triples: &mut dyn Iterator<Item = &Triple>| -> Result<NodeId, ModelError> {
            let (mut h, mut r, mut t) = (Vec::new(), Vec::new(), Vec::new());
            for x in triples {
                h.push(local(x.head));
                r.push(x.relation);
                t.push(local(x.tail));
            }
            let hn = g.select_rows(fused.joint, &h)?;
            let tn = g.select_rows(fused.joint, &t)?;
            let pn = g.gather_param(&self.params, self.phase, &r)?;
            let dist = g.apply(RotateDistance { norm: self.config.norm }, &[hn, pn, tn])?;
            Ok(g.neg(dist)?)
        };
        let pos = score(g, &mut positives.iter())?;
        let neg = score(g, &mut negatives.iter().map(|(t, _)| t))?;

        let neg_scores = g.value(neg).data().to_vec();
        let annotated: Vec<NegativeSample> = negatives
            .iter()
            .zip(&neg_scores)
            .map(|(&(t, side), &s)| NegativeSample::annotate(t, side, s, egns))
            .collect();
        let weights: Vec<f32> = match lambdas {
            Some(l) => l.iter().map(|&x| x as f32).collect(),
            None => annotated.iter().map(|n| n.weight as f32).collect(),
        };
        let loss = sampling::weighted_loss(g, pos, neg, &weights, egns.margin as f32, positives.len())?;
        Ok(BatchLoss {
            loss,
            positive_scores: pos,
            negatives: annotated,
            weights: fused.weights,
        })
    }

    /// Copies parameter values from `other`, which must have identical blocks.
    pub fn copy_params_from(&mut self, other: &ParamStore) {
        for id in self.params.ids().collect::<Vec<_>>() {
            let src = other.get(id).data().to_vec();
            self.params.get_mut(id).data_mut().copy_from_slice(&src);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: NodeId,
    pub positive_scores: NodeId,
    pub negatives: Vec<NegativeSample>,
    pub weights: FusionWeights,
}

/// Everything needed to rank candidates: frozen joint embeddings and
/// relation phases.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringTables {
    pub dim: usize,
    pub norm: Norm,
    /// `[|E| × d]`
    pub entities: Vec<f32>,
    /// `[|R| × d/2]`
    pub phases: Vec<f32>,
}

impl ScoringTables {
    pub fn num_entities(&self) -> usize {
        self.entities.len() / self.dim
    }

    pub fn entity(&self, e: usize) -> &[f32] {
        &self.entities[e * self.dim..(e + 1) * self.dim]
    }

    pub fn phase(&self, r: usize) -> &[f32] {
        let k = self.dim / 2;
        &self.phases[r * k..(r + 1) * k]
    }

    pub fn score(&self, t: Triple) -> f32 {
        -(scoring::distance(self.entity(t.head), self.phase(t.relation), self.entity(t.tail), self.norm) as f32)
    }

    /// Scores of `(head, r, e)` for every entity `e`.
    pub fn score_tails(&self, head: usize, relation: usize) -> Vec<f32> {
        let sc = scoring::sin_cos(self.phase(relation));
        let h = self.entity(head);
        (0..self.num_entities())
            .map(|e| -(scoring::distance_sc(h, &sc, self.entity(e), self.norm) as f32))
            .collect()
    }

    /// Scores of `(e, r, tail)` for every entity `e`.
    pub fn score_heads(&self, relation: usize, tail: usize) -> Vec<f32> {
        let sc = scoring::sin_cos(self.phase(relation));
        let t = self.entity(tail);
        (0..self.num_entities())
            .map(|e| -(scoring::distance_sc(self.entity(e), &sc, t, self.norm) as f32))
            .collect()
    }
}
