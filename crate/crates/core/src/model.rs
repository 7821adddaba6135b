//! Model assembly: item embedding views, fusion and the sequence encoder.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{matmul_nt, Graph, Tensor, Var};
use crate::data::InteractionDataset;
use crate::encoder::{init_attn_params, last_rows, AttnEncoder, EncoderKind};
use crate::error::{Error, Result};
use crate::fusion::{fuse_infer, fuse_train, gate, GateNet, GateVars};
use crate::params::{Bindings, ParameterStore};
use crate::rng::{seeded, xavier_normal};
use crate::semantic::{fit_pca, pca_project, project_llm, ProjectionNet, ProjectionVars, SemanticStore};

pub const ITEM_TABLE: &str = "item.id";
/// Users scored per graph at inference.
const SCORE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// ID and semantic embeddings, gated fusion and alignment.
    Faerec,
    /// Randomly initialized ID embeddings only.
    IdOnly,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faerec" => Ok(Variant::Faerec),
            "id_only" => Ok(Variant::IdOnly),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Faerec => "faerec",
            Variant::IdOnly => "id_only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dim: usize,
    /// Adaptive gated fusion during training; equal fusion when off.
    pub gate: bool,
    pub encoder: EncoderKind,
    pub blocks: usize,
    /// Feed-forward width; 0 means `4 · dim`.
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Faerec,
            dim: 128,
            gate: true,
            encoder: EncoderKind::Attn,
            blocks: 2,
            d_ff: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.dim
        } else {
            self.d_ff
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("model.dim must be positive".into()));
        }
        if self.encoder == EncoderKind::Attn && self.blocks == 0 {
            return Err(Error::Config("encoder.blocks must be positive".into()));
        }
        Ok(())
    }

    fn uses_gate(&self) -> bool {
        self.variant == Variant::Faerec && self.gate
    }
}

/// Embeddings of a set of items on one graph.
#[derive(Clone, Copy, Debug)]
pub struct ItemViews {
    pub e_id: Var,
    /// Projected semantic embeddings (absent for the ID-only variant).
    pub e_llm: Option<Var>,
    pub fused: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParameterStore,
    n_items: usize,
    max_len: usize,
}

impl Model {
    /// Fresh parameters. The FAERec variant seeds its ID table with the PCA
    /// reduction of the semantic store; the ID-only variant draws it at
    /// random.
    pub fn init(
        config: ModelConfig,
        dataset: &InteractionDataset,
        semantic: Option<&SemanticStore>,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        let (n_items, d) = (dataset.n_items(), config.dim);
        let max_len = dataset.max_seq_len();
        let mut rng = seeded(seed);
        let mut params = ParameterStore::new();
        match config.variant {
            Variant::Faerec => {
                let store =
                    semantic.ok_or_else(|| Error::Config("the faerec variant needs semantic embeddings".into()))?;
                store.check_items(n_items)?;
                if d > n_items.min(store.d_llm()) {
                    return Err(Error::Config(format!(
                        "model.dim {d} exceeds min(items {n_items}, d_llm {}) needed for PCA initialization",
                        store.d_llm()
                    )));
                }
                let basis = fit_pca(store, d)?;
                params.insert(ITEM_TABLE, pca_project(&basis, store)?);
                ProjectionNet::init(store.d_llm(), d, &mut rng).insert_into(&mut params);
                if config.gate {
                    GateNet::init(d, &mut rng).insert_into(&mut params);
                }
            }
            Variant::IdOnly => {
                params.insert(ITEM_TABLE, xavier_normal(&mut rng, n_items, d));
            }
        }
        if config.encoder == EncoderKind::Attn {
            init_attn_params(&mut params, d, config.d_ff(), config.blocks, max_len, &mut rng);
        }
        Ok(Model {
            config,
            params,
            n_items,
            max_len,
        })
    }

    /// Rebuilds a model from stored parameters, checking that every
    /// parameter the configuration needs is present with a consistent shape.
    pub fn from_params(config: ModelConfig, params: ParameterStore) -> Result<Model> {
        config.validate()?;
        let table = params.require(ITEM_TABLE)?;
        if table.rank() != 2 || table.shape()[1] != config.dim {
            return Err(Error::Format(format!(
                "item table shape {:?} does not match model.dim {}",
                table.shape(),
                config.dim
            )));
        }
        let n_items = table.shape()[0];
        if config.variant == Variant::Faerec {
            ProjectionNet::from_store(&params)?;
        }
        if config.uses_gate() {
            GateNet::from_store(&params)?;
        }
        let max_len = if config.encoder == EncoderKind::Attn {
            let pos = params.require("enc.pos")?;
            for b in 0..config.blocks {
                params.require(&format!("enc.{b}.wq"))?;
            }
            pos.shape()[0]
        } else {
            usize::MAX
        };
        Ok(Model {
            config,
            params,
            n_items,
            max_len,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore {
        self.params
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn semantic<'a>(&self, semantic: Option<&'a SemanticStore>) -> Result<&'a SemanticStore> {
        let store = semantic.ok_or_else(|| Error::Config("the faerec variant needs semantic embeddings".into()))?;
        store.check_items(self.n_items)?;
        Ok(store)
    }

    /// ID, projected semantic and fused embeddings of `ids`. Training uses
    /// the gate when enabled; inference always fuses with equal weights.
    pub fn item_views(
        &self,
        g: &Graph,
        b: &Bindings,
        semantic: Option<&SemanticStore>,
        ids: &[usize],
        training: bool,
    ) -> Result<ItemViews> {
        let e_id = g.gather(b.var(ITEM_TABLE)?, ids)?;
        match self.config.variant {
            Variant::IdOnly => Ok(ItemViews {
                e_id,
                e_llm: None,
                fused: e_id,
            }),
            Variant::Faerec => {
                let store = self.semantic(semantic)?;
                let e_llm = project_llm(g, &ProjectionVars::from_bindings(b)?, store, ids)?;
                let fused = if training && self.config.uses_gate() {
                    let weights = gate(g, &GateVars::from_bindings(b)?, e_id, e_llm)?;
                    fuse_train(g, weights, e_id, e_llm)?
                } else {
                    fuse_infer(g, e_id, e_llm)?
                };
                Ok(ItemViews {
                    e_id,
                    e_llm: Some(e_llm),
                    fused,
                })
            }
        }
    }

    /// Hidden states at every position of packed input sequences.
    pub fn hidden_packed(&self, g: &Graph, b: &Bindings, x: Var, lens: &[usize]) -> Result<Var> {
        match self.config.encoder {
            EncoderKind::Attn => {
                AttnEncoder::from_bindings(b, self.config.blocks, self.max_len)?.hidden_packed(g, x, lens)
            }
            EncoderKind::Last => Ok(x),
        }
    }

    /// Inference embeddings of every catalog item (`n_items × d`).
    pub fn item_table(&self, semantic: Option<&SemanticStore>) -> Result<Tensor> {
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let ids: Vec<usize> = (0..self.n_items).collect();
        Ok(g.value(self.item_views(&g, &b, semantic, &ids, false)?.fused))
    }

    /// Per-item ID, projected semantic and fused inference embeddings.
    pub fn embedding_dump(&self, semantic: Option<&SemanticStore>) -> Result<(Tensor, Option<Tensor>, Tensor)> {
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let ids: Vec<usize> = (0..self.n_items).collect();
        let v = self.item_views(&g, &b, semantic, &ids, false)?;
        Ok((g.value(v.e_id), v.e_llm.map(|e| g.value(e)), g.value(v.fused)))
    }

    /// User states after reading each history (`histories.len() × d`).
    pub fn user_states(&self, semantic: Option<&SemanticStore>, histories: &[&[usize]]) -> Result<Tensor> {
        let d = self.config.dim;
        let mut out = Vec::with_capacity(histories.len() * d);
        for chunk in histories.chunks(SCORE_CHUNK) {
            let g = Graph::new();
            let b = self.params.bind_frozen(&g);
            let mut items: Vec<usize> = chunk.iter().flat_map(|h| h.iter().copied()).collect();
            items.sort_unstable();
            items.dedup();
            let views = self.item_views(&g, &b, semantic, &items, false)?;
            let rows: Vec<usize> = chunk
                .iter()
                .flat_map(|h| h.iter().map(|i| items.binary_search(i).expect("collected above")))
                .collect();
            let lens: Vec<usize> = chunk.iter().map(|h| h.len()).collect();
            if lens.contains(&0) {
                return Err(Error::Contract("cannot encode an empty history".into()));
            }
            let x = g.gather(views.fused, &rows)?;
            let h = self.hidden_packed(&g, &b, x, &lens)?;
            out.extend_from_slice(g.value(g.gather(h, &last_rows(&lens))?).data());
        }
        Tensor::new(vec![histories.len(), d], out)
    }

    /// Dot-product scores of every catalog item for each history.
    pub fn score(&self, semantic: Option<&SemanticStore>, histories: &[&[usize]]) -> Result<Tensor> {
        let table = self.item_table(semantic)?;
        self.score_with_table(semantic, &table, histories)
    }

    pub fn score_with_table(
        &self,
        semantic: Option<&SemanticStore>,
        table: &Tensor,
        histories: &[&[usize]],
    ) -> Result<Tensor> {
        let users = self.user_states(semantic, histories)?;
        let (m, d, n) = (histories.len(), self.config.dim, self.n_items);
        Ok(Tensor::matrix(m, n, matmul_nt(users.data(), table.data(), m, d, n)))
    }
}
