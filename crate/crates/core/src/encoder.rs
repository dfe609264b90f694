//! Three-graph encoder: per-modality propagation over the user-item graph,
//! fusion, propagation over the item-item and user-user graphs, and a
//! residual combination scored by inner product.

use std::path::Path;
use std::sync::Arc;

use ndarray::ArrayView1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{xavier_uniform, Matrix, ParamId, ParamStore, SparseOperator, Tape, Var};
use crate::container::{self, Dtype};
use crate::enrichment::FeatureTable;
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;
use crate::fusion::{self, FusionConfig, FusionParams, FusionVars};
use crate::graphs::{KnnGraph, NormBipartite};
use crate::io;
use crate::nn::Linear;

/// How the two modality embeddings are merged before homogeneous propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionArm {
    /// `[t | s | v']` with alignment losses.
    Full,
    /// Mean of the two modalities tiled three times.
    Pooling,
    /// `[t | v]`.
    Concat,
    /// `[a t | b v]` with two learnable global scalars.
    WeightedConcat,
}

impl FusionArm {
    pub fn width(self, d: usize) -> usize {
        match self {
            FusionArm::Full | FusionArm::Pooling => 3 * d,
            FusionArm::Concat | FusionArm::WeightedConcat => 2 * d,
        }
    }

    pub fn has_alignment(self) -> bool {
        self == FusionArm::Full
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub bipartite_layers: usize,
    pub homogeneous_layers: usize,
    pub arm: FusionArm,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            bipartite_layers: 2,
            homogeneous_layers: 2,
            arm: FusionArm::Full,
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        if self.fusion.heads == 0 || self.d % self.fusion.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} attention heads",
                self.d, self.fusion.heads
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Fingerprinter::new("model-config").str(&json).finish()
    }
}

/// Sparse operators the forward pass propagates over.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    pub n_users: usize,
    pub n_items: usize,
    /// `users x items`.
    pub user_from_items: Arc<SparseOperator>,
    /// `items x users`.
    pub item_from_users: Arc<SparseOperator>,
    pub item_item: Arc<SparseOperator>,
    pub user_user: Arc<SparseOperator>,
}

impl GraphOperators {
    pub fn new(bipartite: &NormBipartite, item_graph: &KnnGraph, user_graph: &KnnGraph) -> Result<Self> {
        if item_graph.n_nodes != bipartite.n_items || user_graph.n_nodes != bipartite.n_users {
            return Err(Error::Internal(format!(
                "graph sizes disagree: bipartite {}x{}, item graph {}, user graph {}",
                bipartite.n_users, bipartite.n_items, item_graph.n_nodes, user_graph.n_nodes
            )));
        }
        let (user_from_items, item_from_users) = bipartite.operators();
        Ok(Self {
            n_users: bipartite.n_users,
            n_items: bipartite.n_items,
            user_from_items,
            item_from_users,
            item_item: item_graph.operator(),
            user_user: user_graph.operator(),
        })
    }
}

/// Everything the forward pass reads besides parameters.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub visual: Matrix,
    pub textual: Matrix,
    pub graphs: GraphOperators,
}

impl ModelInputs {
    pub fn new(visual: &FeatureTable, textual: &FeatureTable, graphs: GraphOperators) -> Result<Self> {
        for table in [visual, textual] {
            if table.n_rows() != graphs.n_items {
                return Err(Error::Internal(format!(
                    "feature table has {} rows for {} items",
                    table.n_rows(),
                    graphs.n_items
                )));
            }
        }
        Ok(Self {
            visual: visual.matrix().clone(),
            textual: textual.matrix().clone(),
            graphs,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub user_visual: ParamId,
    pub user_textual: ParamId,
    pub project_visual: Linear,
    pub project_textual: Linear,
    pub fusion: Option<FusionParams>,
    /// `|U| x 3` logits of the per-user segment weights.
    pub user_weights: Option<ParamId>,
    /// `1 x 2` global segment scalars.
    pub segment_weights: Option<ParamId>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub users: Var,
    pub items: Var,
    pub item_fusion: Option<FusionVars>,
    pub user_fusion: Option<FusionVars>,
}

#[derive(Debug, Clone)]
pub struct FinalEmbeddings {
    pub users: Matrix,
    pub items: Matrix,
}

impl FinalEmbeddings {
    pub fn user_scores(&self, u: usize) -> ndarray::Array1<f64> {
        self.items.dot(&self.users.row(u))
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    n_users: usize,
    n_items: usize,
    d_visual: usize,
    d_textual: usize,
    store: ParamStore,
    params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, n_users: usize, n_items: usize, d_visual: usize, d_textual: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let user_visual = store.register_decayed("user.visual", xavier_uniform(n_users, d, &mut rng));
        let user_textual = store.register_decayed("user.textual", xavier_uniform(n_users, d, &mut rng));
        let project_visual = Linear::new(&mut store, "project.visual", d_visual, d, &mut rng);
        let project_textual = Linear::new(&mut store, "project.textual", d_textual, d, &mut rng);
        let (fusion, user_weights, segment_weights) = match config.arm {
            FusionArm::Full => {
                let fusion = FusionParams::new(&mut store, d, config.fusion.clone(), &mut rng);
                let weights = store.register("fusion.user_weights", xavier_uniform(n_users, 3, &mut rng));
                (Some(fusion), Some(weights), None)
            }
            FusionArm::WeightedConcat => (None, None, Some(store.register("segment_weights", Matrix::ones((1, 2))))),
            FusionArm::Pooling | FusionArm::Concat => (None, None, None),
        };
        Ok(Self {
            config,
            n_users,
            n_items,
            d_visual,
            d_textual,
            store,
            params: ModelParams {
                user_visual,
                user_textual,
                project_visual,
                project_textual,
                fusion,
                user_weights,
                segment_weights,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Width of the final user and item embeddings.
    pub fn output_width(&self) -> usize {
        self.config.arm.width(self.config.d)
    }

    fn check_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        let ok = inputs.graphs.n_users == self.n_users
            && inputs.graphs.n_items == self.n_items
            && inputs.visual.dim() == (self.n_items, self.d_visual)
            && inputs.textual.dim() == (self.n_items, self.d_textual);
        if ok {
            Ok(())
        } else {
            Err(Error::Internal(format!(
                "inputs (users {}, items {}, visual {:?}, textual {:?}) do not match model ({} users, {} items, widths {}/{})",
                inputs.graphs.n_users,
                inputs.graphs.n_items,
                inputs.visual.dim(),
                inputs.textual.dim(),
                self.n_users,
                self.n_items,
                self.d_visual,
                self.d_textual
            )))
        }
    }

    pub fn forward(&self, tape: &Tape, inputs: &ModelInputs) -> Result<ForwardVars> {
        self.check_inputs(inputs)?;
        let store = &self.store;
        let p = &self.params;
        let g = &inputs.graphs;
        let item_visual0 = project_item_features(tape, store, &p.project_visual, tape.constant(inputs.visual.clone()));
        let item_textual0 = project_item_features(tape, store, &p.project_textual, tape.constant(inputs.textual.clone()));
        let (user_visual, item_visual) = propagate_bipartite(
            tape,
            &g.user_from_items,
            &g.item_from_users,
            tape.param(store, p.user_visual),
            item_visual0,
            self.config.bipartite_layers,
        );
        let (user_textual, item_textual) = propagate_bipartite(
            tape,
            &g.user_from_items,
            &g.item_from_users,
            tape.param(store, p.user_textual),
            item_textual0,
            self.config.bipartite_layers,
        );

        let mut item_fusion = None;
        let mut user_fusion = None;
        let (item_fused, user_fused) = match self.config.arm {
            FusionArm::Full => {
                let params = p.fusion.as_ref().expect("full arm owns fusion parameters");
                let items = fusion::fusion_signals(tape, store, params, item_visual, item_textual);
                let users = fusion::fusion_signals(tape, store, params, user_visual, user_textual);
                let weights = fusion::user_weights(tape, store, p.user_weights.expect("full arm owns user weights"));
                item_fusion = Some(items);
                user_fusion = Some(users);
                (
                    fusion::fuse_item(tape, item_textual, items.synergy, items.unique_visual),
                    fusion::fuse_user(tape, user_textual, users.synergy, users.unique_visual, weights),
                )
            }
            FusionArm::Pooling => {
                let pool = |t: Var, v: Var| {
                    let mean = tape.scale(tape.add(t, v), 0.5);
                    tape.concat_cols(&[mean, mean, mean])
                };
                (pool(item_textual, item_visual), pool(user_textual, user_visual))
            }
            FusionArm::Concat => (
                tape.concat_cols(&[item_textual, item_visual]),
                tape.concat_cols(&[user_textual, user_visual]),
            ),
            FusionArm::WeightedConcat => {
                let scalars = tape.param(store, p.segment_weights.expect("weighted arm owns segment weights"));
                let weighted = |t: Var, v: Var| {
                    let n = tape.shape(t).0;
                    let a = tape.repeat_row(tape.slice_cols(scalars, 0, 1), n);
                    let b = tape.repeat_row(tape.slice_cols(scalars, 1, 2), n);
                    tape.concat_cols(&[tape.row_scale(t, a), tape.row_scale(v, b)])
                };
                (weighted(item_textual, item_visual), weighted(user_textual, user_visual))
            }
        };

        let layers = self.config.homogeneous_layers;
        let item_hom = propagate_homogeneous(tape, &g.item_item, item_fused, layers);
        let user_hom = propagate_homogeneous(tape, &g.user_user, user_fused, layers);
        Ok(ForwardVars {
            users: combine_residual(tape, user_hom, user_fused)?,
            items: combine_residual(tape, item_hom, item_fused)?,
            item_fusion,
            user_fusion,
        })
    }

    pub fn embeddings(&self, inputs: &ModelInputs) -> Result<FinalEmbeddings> {
        let tape = Tape::new();
        let vars = self.forward(&tape, inputs)?;
        let users = tape.value(vars.users).clone();
        let items = tape.value(vars.items).clone();
        if users.iter().chain(items.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite final embeddings".into()));
        }
        Ok(FinalEmbeddings { users, items })
    }

    /// Write every parameter as an f64 container plus a JSON manifest.
    pub fn save(&self, dir: &Path, config_fingerprint: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::with_capacity(self.store.len());
        for (index, id) in self.store.ids().enumerate() {
            let name = self.store.name(id).to_string();
            let file = format!("{index:03}-{name}.vft");
            let value = self.store.value(id);
            container::write(&dir.join(&file), value, Dtype::F64)?;
            tensors.push(TensorEntry {
                name,
                rows: value.nrows(),
                cols: value.ncols(),
                dtype: "f64".into(),
                file,
            });
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            config_fingerprint: config_fingerprint.to_string(),
            model: self.config.clone(),
            n_users: self.n_users,
            n_items: self.n_items,
            d_visual: self.d_visual,
            d_textual: self.d_textual,
            tensors,
        };
        io::write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest)> {
        let manifest: CheckpointManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {}", manifest.format_version),
            ));
        }
        let mut model = Model::new(
            manifest.model.clone(),
            manifest.n_users,
            manifest.n_items,
            manifest.d_visual,
            manifest.d_textual,
            0,
        )?;
        if manifest.tensors.len() != model.store.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors stored, model has {}", manifest.tensors.len(), model.store.len()),
            ));
        }
        for entry in &manifest.tensors {
            let id = model
                .store
                .find(&entry.name)
                .ok_or_else(|| Error::format("checkpoint", format!("unknown tensor {}", entry.name)))?;
            let (value, _) = container::read(&dir.join(&entry.file))?;
            let slot = model.store.value_mut(id);
            if value.dim() != slot.dim() || value.dim() != (entry.rows, entry.cols) {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {} has shape {:?}, expected {:?}", entry.name, value.dim(), slot.dim()),
                ));
            }
            *slot = value;
        }
        Ok((model, manifest))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_fingerprint: String,
    pub model: ModelConfig,
    pub n_users: usize,
    pub n_items: usize,
    pub d_visual: usize,
    pub d_textual: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Affine map of raw item features to the embedding width.
pub fn project_item_features(tape: &Tape, store: &ParamStore, projection: &Linear, features: Var) -> Var {
    projection.forward(tape, store, features)
}

/// Alternating propagation over the normalized user-item graph. Returns the
/// sums of layers `0..=layers` for users and items.
pub fn propagate_bipartite(
    tape: &Tape,
    user_from_items: &Arc<SparseOperator>,
    item_from_users: &Arc<SparseOperator>,
    users0: Var,
    items0: Var,
    layers: usize,
) -> (Var, Var) {
    let (mut users, mut items) = (users0, items0);
    let (mut user_sum, mut item_sum) = (users0, items0);
    for _ in 0..layers {
        let next_users = tape.spmm(user_from_items, items);
        let next_items = tape.spmm(item_from_users, users);
        users = next_users;
        items = next_items;
        user_sum = tape.add(user_sum, users);
        item_sum = tape.add(item_sum, items);
    }
    (user_sum, item_sum)
}

/// `layers` rounds of weighted neighbor aggregation; returns the last layer.
pub fn propagate_homogeneous(tape: &Tape, graph: &Arc<SparseOperator>, x0: Var, layers: usize) -> Var {
    (0..layers).fold(x0, |x, _| tape.spmm(graph, x))
}

pub fn combine_residual(tape: &Tape, homogeneous: Var, fused: Var) -> Result<Var> {
    if tape.shape(homogeneous) != tape.shape(fused) {
        return Err(Error::Internal(format!(
            "residual shape mismatch {:?} vs {:?}",
            tape.shape(homogeneous),
            tape.shape(fused)
        )));
    }
    Ok(tape.add(homogeneous, fused))
}

pub fn score(user: ArrayView1<f64>, item: ArrayView1<f64>) -> f64 {
    assert_eq!(user.len(), item.len(), "embedding widths differ");
    user.dot(&item)
}

/// Plain-matrix wrapper over [`propagate_bipartite`].
pub fn propagate_bipartite_values(graph: &NormBipartite, users0: &Matrix, items0: &Matrix, layers: usize) -> (Matrix, Matrix) {
    let (ui, iu) = graph.operators();
    let tape = Tape::new();
    let (u, i) = propagate_bipartite(&tape, &ui, &iu, tape.constant(users0.clone()), tape.constant(items0.clone()), layers);
    let out = (tape.value(u).clone(), tape.value(i).clone());
    out
}

/// Plain-matrix wrapper over [`propagate_homogeneous`].
pub fn propagate_homogeneous_values(graph: &KnnGraph, x0: &Matrix, layers: usize) -> Matrix {
    let tape = Tape::new();
    let out = propagate_homogeneous(&tape, &graph.operator(), tape.constant(x0.clone()), layers);
    let value = tape.value(out).clone();
    value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::InteractionSet;
    use crate::graphs::{build_norm_bipartite, GraphKind};
    use ndarray::array;
    use rand::Rng;

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    fn random_graph(n_users: usize, n_items: usize, seed: u64) -> InteractionSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users: Vec<String> = (0..n_users).map(|u| format!("u{u:03}")).collect();
        let items: Vec<String> = (0..n_items).map(|i| format!("i{i:03}")).collect();
        let mut pairs = Vec::new();
        for u in 0..n_users {
            for i in 0..n_items {
                if rng.random_bool(0.3) {
                    pairs.push((users[u].as_str(), items[i].as_str()));
                }
            }
        }
        InteractionSet::from_keys(pairs)
    }

    #[test]
    fn zero_layers_return_inputs() {
        let train = random_graph(6, 7, 1);
        let g = build_norm_bipartite(&train);
        let (u0, i0) = (random(g.n_users, 3, 2), random(g.n_items, 3, 3));
        let (u, i) = propagate_bipartite_values(&g, &u0, &i0, 0);
        assert_eq!((u, i), (u0, i0));
    }

    #[test]
    fn single_edge_unrolls_by_hand() {
        let train = InteractionSet::from_keys([("u", "i")]);
        let g = build_norm_bipartite(&train);
        let (u0, i0) = (array![[1.0, 2.0]], array![[3.0, -1.0]]);
        let (u, i) = propagate_bipartite_values(&g, &u0, &i0, 1);
        assert_eq!(u, array![[4.0, 1.0]]);
        assert_eq!(i, array![[4.0, 1.0]]);
    }

    #[test]
    fn bipartite_matches_dense_oracle() {
        let train = random_graph(10, 12, 4);
        let g = build_norm_bipartite(&train);
        let a = g.to_dense();
        let x0 = ndarray::concatenate![ndarray::Axis(0), random(g.n_users, 4, 5), random(g.n_items, 4, 6)];
        for layers in 0..4 {
            let mut x = x0.clone();
            let mut sum = x0.clone();
            for _ in 0..layers {
                x = a.dot(&x);
                sum += &x;
            }
            let (u, i) = propagate_bipartite_values(
                &g,
                &x0.slice(ndarray::s![..g.n_users, ..]).to_owned(),
                &x0.slice(ndarray::s![g.n_users.., ..]).to_owned(),
                layers,
            );
            assert!(close(&u, &sum.slice(ndarray::s![..g.n_users, ..]).to_owned(), 1e-12));
            assert!(close(&i, &sum.slice(ndarray::s![g.n_users.., ..]).to_owned(), 1e-12));
        }
    }

    #[test]
    fn homogeneous_single_edge_and_empty_graph() {
        let graph = KnnGraph {
            kind: GraphKind::Item,
            n_nodes: 3,
            k: 1,
            edges: vec![(0, 2, 1.0)],
        };
        let x0 = array![[1.0, 1.0], [2.0, 2.0], [3.0, 4.0]];
        let out = propagate_homogeneous_values(&graph, &x0, 1);
        assert_eq!(out, array![[3.0, 4.0], [0.0, 0.0], [0.0, 0.0]]);
        let empty = KnnGraph { edges: vec![], ..graph };
        assert!(propagate_homogeneous_values(&empty, &x0, 2).iter().all(|&x| x == 0.0));
        assert_eq!(propagate_homogeneous_values(&empty, &x0, 0), x0);
    }

    #[test]
    fn residual_and_score_hand_values() {
        let tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0]]);
        let b = tape.constant(array![[3.0, 4.0]]);
        assert_eq!(*tape.value(combine_residual(&tape, a, b).unwrap()), array![[4.0, 6.0]]);
        let c = tape.constant(array![[1.0, 2.0, 3.0]]);
        assert!(combine_residual(&tape, a, c).is_err());
        assert_eq!(score(array![1.0, 2.0, 3.0].view(), array![4.0, 5.0, 6.0].view()), 32.0);
        assert_eq!(score(array![1.0, 0.0].view(), array![0.0, 1.0].view()), 0.0);
    }

    #[test]
    fn projection_of_384_features_has_model_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "p", 384, 64, &mut rng);
        let tape = Tape::new();
        let out = project_item_features(&tape, &store, &proj, tape.constant(Matrix::zeros((5, 384))));
        assert_eq!(tape.shape(out), (5, 64));
        for row in tape.value(out).rows() {
            assert_eq!(row, store.value(proj.bias.unwrap()).row(0));
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let config = ModelConfig {
            d: 10,
            ..ModelConfig::default()
        };
        assert!(matches!(Model::new(config, 2, 2, 3, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn arm_widths() {
        assert_eq!(FusionArm::Full.width(4), 12);
        assert_eq!(FusionArm::Pooling.width(4), 12);
        assert_eq!(FusionArm::Concat.width(4), 8);
        assert_eq!(FusionArm::WeightedConcat.width(4), 8);
    }
}
