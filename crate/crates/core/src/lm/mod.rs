//! A small decoder-only causal transformer with three disjoint parameter
//! partitions: the frozen-or-trainable base Φ₀, the soft-prompt bank Φ, and
//! low-rank adapters Θ. Stage 1 updates only the bank, stage 2 only the
//! adapters; every trainable scalar belongs to exactly one partition.

pub mod io;
pub mod model;
pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Mat;
use crate::rng::{sha256_hex, substream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 512,
            max_positions: 512,
            vocab_size: 4096,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.ffn_dim == 0
            || self.max_positions == 0
            || self.vocab_size <= vocab::RESERVED.len()
        {
            return Err(Error::Config("LM dimensions must be positive".to_string()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// One transformer block (pre-LN). Vectors are stored as 1×n matrices so the
/// whole parameter set is a uniform list of [`Mat`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct LmLayer {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
}

impl LmLayer {
    fn zeros(cfg: &LmConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        LmLayer {
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            ln1_g: Mat::zeros(1, d),
            ln1_b: Mat::zeros(1, d),
            w1: Mat::zeros(f, d),
            b1: Mat::zeros(1, f),
            w2: Mat::zeros(d, f),
            b2: Mat::zeros(1, d),
            ln2_g: Mat::zeros(1, d),
            ln2_b: Mat::zeros(1, d),
        }
    }

    fn tensors(&self) -> Vec<&Mat> {
        vec![
            &self.wq, &self.wk, &self.wv, &self.wo, &self.ln1_g, &self.ln1_b, &self.w1,
            &self.b1, &self.w2, &self.b2, &self.ln2_g, &self.ln2_b,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }

    const FIELD_NAMES: [&'static str; 12] = [
        "wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
    ];
}

const EMB_INIT_STD: f64 = 0.1;

/// Base transformer weights Φ₀.
#[derive(Clone, Debug, PartialEq)]
pub struct LmBase {
    pub config: LmConfig,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<LmLayer>,
    pub lnf_g: Mat,
    pub lnf_b: Mat,
    pub w_out: Mat,
    pub b_out: Mat,
}

impl LmBase {
    /// Random initialization from the config seed: embeddings N(0, 0.1²),
    /// projections N(0, 1/fan_in), LN gains 1.
    pub fn init(config: &LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, "lm:init");
        let d = config.d_model;
        let f = config.ffn_dim;
        let v = config.vocab_size;
        let proj_std = (1.0 / d as f64).sqrt();
        let ffn_std = (1.0 / f as f64).sqrt();

        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LmLayer {
                wq: Mat::randn(d, d, proj_std, &mut rng),
                wk: Mat::randn(d, d, proj_std, &mut rng),
                wv: Mat::randn(d, d, proj_std, &mut rng),
                wo: Mat::randn(d, d, proj_std, &mut rng),
                ln1_g: Mat::filled(1, d, 1.0),
                ln1_b: Mat::zeros(1, d),
                w1: Mat::randn(f, d, proj_std, &mut rng),
                b1: Mat::zeros(1, f),
                w2: Mat::randn(d, f, ffn_std, &mut rng),
                b2: Mat::zeros(1, d),
                ln2_g: Mat::filled(1, d, 1.0),
                ln2_b: Mat::zeros(1, d),
            });
        }
        Ok(LmBase {
            config: config.clone(),
            tok_emb: Mat::randn(v, d, EMB_INIT_STD, &mut rng),
            pos_emb: Mat::randn(config.max_positions, d, EMB_INIT_STD, &mut rng),
            layers,
            lnf_g: Mat::filled(1, d, 1.0),
            lnf_b: Mat::zeros(1, d),
            w_out: Mat::randn(v, d, proj_std, &mut rng),
            b_out: Mat::zeros(1, v),
        })
    }

    pub fn zeros_like(&self) -> Self {
        LmBase {
            config: self.config.clone(),
            tok_emb: self.tok_emb.zeros_like(),
            pos_emb: self.pos_emb.zeros_like(),
            layers: self.layers.iter().map(|_| LmLayer::zeros(&self.config)).collect(),
            lnf_g: self.lnf_g.zeros_like(),
            lnf_b: self.lnf_b.zeros_like(),
            w_out: self.w_out.zeros_like(),
            b_out: self.b_out.zeros_like(),
        }
    }

    /// Fixed, documented tensor order: tok_emb, pos_emb, per-layer fields,
    /// lnf_g, lnf_b, w_out, b_out. Serialization, flattening and hashing all
    /// derive from this list.
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LmLayer::FIELD_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// SHA-256 over the little-endian f64 bytes of every tensor in order;
    /// the freeze-invariant checks compare this across training.
    pub fn sha256(&self) -> String {
        let mut bytes = Vec::new();
        for t in self.tensors() {
            for &x in &t.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

/// Provenance carried inside the serialized bank.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BankProvenance {
    pub teacher_arch: String,
    pub dataset_id: String,
    pub stage1_config: String,
    pub template_hash: String,
}

impl BankProvenance {
    pub fn encode(&self, trained: bool) -> String {
        format!(
            "trained={};teacher={};dataset={};config={};template={}",
            u8::from(trained),
            self.teacher_arch,
            self.dataset_id,
            self.stage1_config,
            self.template_hash
        )
    }

    pub fn decode(s: &str) -> Result<(Self, bool)> {
        let mut prov = BankProvenance::default();
        let mut trained = false;
        for field in s.split(';') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad provenance field `{field}`")))?;
            match k {
                "trained" => trained = v == "1",
                "teacher" => prov.teacher_arch = v.to_string(),
                "dataset" => prov.dataset_id = v.to_string(),
                "config" => prov.stage1_config = v.to_string(),
                "template" => prov.template_hash = v.to_string(),
                other => return Err(Error::Format(format!("unknown provenance key `{other}`"))),
            }
        }
        Ok((prov, trained))
    }
}

/// The soft-prompt bank Φ: k learnable rows of width d_model.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPromptBank {
    pub rows: Mat,
    pub trained: bool,
    pub provenance: BankProvenance,
}

impl SoftPromptBank {
    pub fn k(&self) -> usize {
        self.rows.rows
    }

    pub fn d(&self) -> usize {
        self.rows.cols
    }

    pub fn sha256(&self) -> String {
        let mut bytes = Vec::new();
        for &x in &self.rows.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

/// Soft-prompt initialization: entries ~ N(0, 0.02²) from a named substream
/// of `seed`; the bank is untrained until stage 1 completes.
pub fn init_soft_prompts(k: usize, d: usize, seed: u64) -> SoftPromptBank {
    assert!(k >= 1, "bank needs at least one row");
    let mut rng = substream(seed, "soft:init");
    SoftPromptBank {
        rows: Mat::randn(k, d, 0.02, &mut rng),
        trained: false,
        provenance: BankProvenance::default(),
    }
}

/// Which projection a low-rank triplet adapts.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdaptedProj {
    Query,
    Value,
}

/// One low-rank triplet: ΔW = P·diag(Λ)·Q. With Λ = 0 the delta is exactly
/// absent from the forward pass, so the model equals the base bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterTriplet {
    pub layer: usize,
    pub proj: AdaptedProj,
    pub p: Mat,
    pub q: Mat,
    pub lam: Mat,
    pub importance: Mat,
}

/// Adapters Θ on the attention query/value projections of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub budget: usize,
    pub triplets: Vec<AdapterTriplet>,
}

impl AdapterSet {
    /// Λ = 0, P and Q random: stage 2 starts exactly at the stage-1 model.
    pub fn init(config: &LmConfig, rank: usize, budget: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "adapters:init");
        let d = config.d_model;
        let std = (1.0 / d as f64).sqrt();
        let mut triplets = Vec::new();
        for layer in 0..config.n_layers {
            for proj in [AdaptedProj::Query, AdaptedProj::Value] {
                triplets.push(AdapterTriplet {
                    layer,
                    proj,
                    p: Mat::randn(d, rank, std, &mut rng),
                    q: Mat::randn(rank, d, std, &mut rng),
                    lam: Mat::zeros(1, rank),
                    importance: Mat::zeros(1, rank),
                });
            }
        }
        AdapterSet {
            rank,
            budget,
            triplets,
        }
    }

    /// Default budget: half of the total initial ranks.
    pub fn default_budget(config: &LmConfig, rank: usize) -> usize {
        (config.n_layers * 2 * rank) / 2
    }

    pub fn find(&self, layer: usize, proj: AdaptedProj) -> Option<&AdapterTriplet> {
        self.triplets.iter().find(|t| t.layer == layer && t.proj == proj)
    }

    /// Trainable tensors in fixed order (importance is tracker state, not a
    /// parameter).
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        for t in &self.triplets {
            out.extend([&t.p, &t.q, &t.lam]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        for t in &mut self.triplets {
            out.push(&mut t.p);
            out.push(&mut t.q);
            out.push(&mut t.lam);
        }
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn sha256(&self) -> String {
        let mut bytes = Vec::new();
        for t in self.tensors() {
            for &x in &t.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    pub fn zeros_like(&self) -> AdapterGrads {
        AdapterGrads {
            per: self
                .triplets
                .iter()
                .map(|t| AdapterGradEntry {
                    p: t.p.zeros_like(),
                    q: t.q.zeros_like(),
                    lam: t.lam.zeros_like(),
                })
                .collect(),
        }
    }

    /// Number of retained (nonzero-Λ) singular values across all triplets.
    pub fn retained_ranks(&self) -> usize {
        self.triplets
            .iter()
            .map(|t| t.lam.data.iter().filter(|&&x| x != 0.0).count())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGradEntry {
    pub p: Mat,
    pub q: Mat,
    pub lam: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub per: Vec<AdapterGradEntry>,
}

/// Which parameter partitions an operation touches. The named constructors
/// mirror the gradient-partition contract; `soft_and_adapters` exists for
/// the stage-2 ablation that unfreezes the bank.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct PartitionMask {
    pub base: bool,
    pub soft: bool,
    pub adapters: bool,
}

impl PartitionMask {
    pub fn soft_only() -> Self {
        PartitionMask {
            base: false,
            soft: true,
            adapters: false,
        }
    }

    pub fn adapters_only() -> Self {
        PartitionMask {
            base: false,
            soft: false,
            adapters: true,
        }
    }

    pub fn soft_and_base() -> Self {
        PartitionMask {
            base: true,
            soft: true,
            adapters: false,
        }
    }

    pub fn soft_and_adapters() -> Self {
        PartitionMask {
            base: false,
            soft: true,
            adapters: true,
        }
    }

    pub fn all() -> Self {
        PartitionMask {
            base: true,
            soft: true,
            adapters: true,
        }
    }
}

/// The full parameter state: base Φ₀, bank Φ, optional adapters Θ.
#[derive(Clone, Debug)]
pub struct LmParams {
    pub base: LmBase,
    pub soft: SoftPromptBank,
    pub adapters: Option<AdapterSet>,
}

impl LmParams {
    pub fn new(base: LmBase, soft: SoftPromptBank) -> Self {
        LmParams {
            base,
            soft,
            adapters: None,
        }
    }

    pub fn scalar_count(&self, mask: PartitionMask) -> usize {
        let mut n = 0;
        if mask.base {
            n += self.base.scalar_count();
        }
        if mask.soft {
            n += self.soft.rows.data.len();
        }
        if mask.adapters {
            n += self.adapters.as_ref().map_or(0, |a| a.scalar_count());
        }
        n
    }

    /// Flatten the masked partitions into one vector (base, then soft, then
    /// adapters; tensor order as documented on each struct).
    pub fn collect(&self, mask: PartitionMask) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count(mask));
        if mask.base {
            for t in self.base.tensors() {
                out.extend_from_slice(&t.data);
            }
        }
        if mask.soft {
            out.extend_from_slice(&self.soft.rows.data);
        }
        if mask.adapters {
            if let Some(ad) = &self.adapters {
                for t in ad.tensors() {
                    out.extend_from_slice(&t.data);
                }
            }
        }
        out
    }

    /// Inverse of [`collect`](Self::collect).
    pub fn assign(&mut self, mask: PartitionMask, flat: &[f64]) {
        let mut off = 0;
        if mask.base {
            for t in self.base.tensors_mut() {
                let n = t.data.len();
                t.data.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        if mask.soft {
            let n = self.soft.rows.data.len();
            self.soft.rows.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        if mask.adapters {
            if let Some(ad) = &mut self.adapters {
                for t in ad.tensors_mut() {
                    let n = t.data.len();
                    t.data.copy_from_slice(&flat[off..off + n]);
                    off += n;
                }
            }
        }
        assert_eq!(off, flat.len(), "flat vector length mismatch");
    }
}

/// Gradients, present exactly for the partitions that were requested;
/// everything else is structurally absent.
#[derive(Clone, Debug)]
pub struct LmGrads {
    pub base: Option<LmBase>,
    pub soft: Option<Mat>,
    pub adapters: Option<AdapterGrads>,
}

impl LmGrads {
    pub fn zeros(params: &LmParams, mask: PartitionMask) -> Self {
        LmGrads {
            base: mask.base.then(|| params.base.zeros_like()),
            soft: mask.soft.then(|| params.soft.rows.zeros_like()),
            adapters: if mask.adapters {
                params.adapters.as_ref().map(|a| a.zeros_like())
            } else {
                None
            },
        }
    }

    pub fn mask(&self) -> PartitionMask {
        PartitionMask {
            base: self.base.is_some(),
            soft: self.soft.is_some(),
            adapters: self.adapters.is_some(),
        }
    }

    pub fn collect(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(b) = &self.base {
            for t in b.tensors() {
                out.extend_from_slice(&t.data);
            }
        }
        if let Some(s) = &self.soft {
            out.extend_from_slice(&s.data);
        }
        if let Some(a) = &self.adapters {
            for e in &a.per {
                out.extend_from_slice(&e.p.data);
                out.extend_from_slice(&e.q.data);
                out.extend_from_slice(&e.lam.data);
            }
        }
        out
    }

    pub fn add(&mut self, other: &LmGrads) {
        match (&mut self.base, &other.base) {
            (Some(a), Some(b)) => {
                for (ta, tb) in a.tensors_mut().into_iter().zip(b.tensors()) {
                    ta.axpy(1.0, tb);
                }
            }
            (None, None) => {}
            _ => panic!("gradient partition mismatch"),
        }
        match (&mut self.soft, &other.soft) {
            (Some(a), Some(b)) => a.axpy(1.0, b),
            (None, None) => {}
            _ => panic!("gradient partition mismatch"),
        }
        match (&mut self.adapters, &other.adapters) {
            (Some(a), Some(b)) => {
                for (ea, eb) in a.per.iter_mut().zip(&b.per) {
                    ea.p.axpy(1.0, &eb.p);
                    ea.q.axpy(1.0, &eb.q);
                    ea.lam.axpy(1.0, &eb.lam);
                }
            }
            (None, None) => {}
            _ => panic!("gradient partition mismatch"),
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        if let Some(b) = &mut self.base {
            for t in b.tensors_mut() {
                t.scale(alpha);
            }
        }
        if let Some(s) = &mut self.soft {
            s.scale(alpha);
        }
        if let Some(a) = &mut self.adapters {
            for e in &mut a.per {
                e.p.scale(alpha);
                e.q.scale(alpha);
                e.lam.scale(alpha);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> LmConfig {
        LmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            max_positions: 64,
            vocab_size: 50,
            seed: 9,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a = LmBase::init(&cfg).unwrap();
        let b = LmBase::init(&cfg).unwrap();
        assert_eq!(a.sha256(), b.sha256());
    }

    #[test]
    fn bank_init_shapes_and_determinism() {
        let b80 = init_soft_prompts(80, 128, 1);
        assert_eq!((b80.k(), b80.d()), (80, 128));
        assert!(!b80.trained);
        let b1 = init_soft_prompts(1, 16, 1);
        assert_eq!(b1.k(), 1);
        let again = init_soft_prompts(80, 128, 1);
        assert_eq!(b80.rows, again.rows);
        let other = init_soft_prompts(80, 128, 2);
        assert_ne!(b80.rows, other.rows);
    }

    #[test]
    fn partition_counts_are_disjoint_and_complete() {
        let cfg = tiny_config();
        let base = LmBase::init(&cfg).unwrap();
        let soft = init_soft_prompts(4, cfg.d_model, 1);
        let mut params = LmParams::new(base, soft);
        params.adapters = Some(AdapterSet::init(&cfg, 2, 4, 3));

        let all = params.scalar_count(PartitionMask::all());
        let parts = params.scalar_count(PartitionMask {
            base: true,
            soft: false,
            adapters: false,
        }) + params.scalar_count(PartitionMask::soft_only())
            + params.scalar_count(PartitionMask::adapters_only());
        assert_eq!(all, parts);
        assert_eq!(params.collect(PartitionMask::all()).len(), all);
    }

    #[test]
    fn collect_assign_round_trip() {
        let cfg = tiny_config();
        let base = LmBase::init(&cfg).unwrap();
        let soft = init_soft_prompts(4, cfg.d_model, 1);
        let mut params = LmParams::new(base, soft);
        params.adapters = Some(AdapterSet::init(&cfg, 2, 4, 3));

        let mask = PartitionMask::all();
        let flat = params.collect(mask);
        let mut reconstructed = params.clone();
        reconstructed.assign(mask, &flat);
        assert_eq!(params.base.sha256(), reconstructed.base.sha256());
        assert_eq!(params.soft.rows, reconstructed.soft.rows);
    }

    #[test]
    fn provenance_round_trips() {
        let p = BankProvenance {
            teacher_arch: "sasrec".into(),
            dataset_id: "abc123".into(),
            stage1_config: "deadbeef".into(),
            template_hash: "v1hash".into(),
        };
        let s = p.encode(true);
        let (q, trained) = BankProvenance::decode(&s).unwrap();
        assert_eq!(p, q);
        assert!(trained);
    }
}
