//! Miniature conventional SR models. All three score a padded history
//! against the shared item-embedding table plus a per-item bias; they differ
//! only in how the history is encoded. Training is full-softmax
//! cross-entropy on the next item; exports are the per-example top-h lists
//! used as stage-1 supervision.

mod caser;
mod gru4rec;
mod sasrec;
pub mod train;

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{InteractionLog, PAD_ITEM};
use crate::error::{Error, Result};
use crate::num::Mat;
use crate::rng::{sha256_hex, substream};

pub use train::train_teacher;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherArch {
    Sasrec,
    Gru4rec,
    Caser,
}

impl fmt::Display for TeacherArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherArch::Sasrec => write!(f, "sasrec"),
            TeacherArch::Gru4rec => write!(f, "gru4rec"),
            TeacherArch::Caser => write!(f, "caser"),
        }
    }
}

impl std::str::FromStr for TeacherArch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sasrec" => Ok(TeacherArch::Sasrec),
            "gru4rec" => Ok(TeacherArch::Gru4rec),
            "caser" => Ok(TeacherArch::Caser),
            other => Err(Error::Config(format!("unknown teacher arch `{other}`"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherOpt {
    Adam,
    Adagrad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub arch: TeacherArch,
    pub embedding_dim: usize,
    pub blocks_or_layers: usize,
    pub horizontal_filters: usize,
    pub vertical_filters: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: TeacherOpt,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl TeacherConfig {
    /// Per-architecture defaults: sasrec (dim 100, 2 blocks, lr 1e-3,
    /// dropout 0.5, batch 128, adam); caser (dim 100, 16 horizontal
    /// filters, lr 1e-3, dropout 0.4, batch 128, adam); gru4rec (dim 64,
    /// lr 0.01, dropout 0.3, batch 50, adagrad).
    pub fn defaults(arch: TeacherArch) -> Self {
        match arch {
            TeacherArch::Sasrec => TeacherConfig {
                arch,
                embedding_dim: 100,
                blocks_or_layers: 2,
                horizontal_filters: 0,
                vertical_filters: 0,
                dropout: 0.5,
                learning_rate: 1e-3,
                batch_size: 128,
                optimizer: TeacherOpt::Adam,
                epochs: 30,
                patience: 5,
                seed: 0,
            },
            TeacherArch::Caser => TeacherConfig {
                arch,
                embedding_dim: 100,
                blocks_or_layers: 1,
                horizontal_filters: 16,
                vertical_filters: 4,
                dropout: 0.4,
                learning_rate: 1e-3,
                batch_size: 128,
                optimizer: TeacherOpt::Adam,
                epochs: 30,
                patience: 5,
                seed: 0,
            },
            TeacherArch::Gru4rec => TeacherConfig {
                arch,
                embedding_dim: 64,
                blocks_or_layers: 1,
                horizontal_filters: 0,
                vertical_filters: 0,
                dropout: 0.3,
                learning_rate: 0.01,
                batch_size: 50,
                optimizer: TeacherOpt::Adagrad,
                epochs: 30,
                patience: 5,
                seed: 0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("teacher dims must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0,1)".to_string()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".to_string()));
        }
        if self.arch == TeacherArch::Caser && self.horizontal_filters == 0 {
            return Err(Error::Config("caser needs horizontal filters".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArchWeights {
    Sasrec(sasrec::SasrecWeights),
    Gru(gru4rec::GruWeights),
    Caser(caser::CaserWeights),
}

/// A trained (or freshly initialized) teacher. The PAD embedding row and
/// PAD bias entry are pinned to zero and are not trainable scalars.
#[derive(Clone, Debug)]
pub struct TeacherModel {
    pub config: TeacherConfig,
    pub n_items: usize,
    pub l_hist: usize,
    pub item_emb: Mat,
    pub out_bias: Mat,
    pub arch: ArchWeights,
}

/// Gradient container mirroring [`TeacherModel`]; the PAD row stays zero.
#[derive(Clone, Debug)]
pub struct TeacherGrads {
    pub item_emb: Mat,
    pub out_bias: Mat,
    pub arch: ArchWeights,
}

impl TeacherModel {
    pub fn init(config: &TeacherConfig, n_items: usize, l_hist: usize) -> Result<Self> {
        config.validate()?;
        if n_items == 0 {
            return Err(Error::Model("empty item universe".to_string()));
        }
        let mut rng = substream(config.seed, "teacher:init");
        let d = config.embedding_dim;
        let mut item_emb = Mat::randn(n_items + 1, d, (1.0 / d as f64).sqrt(), &mut rng);
        item_emb.row_mut(PAD_ITEM as usize).fill(0.0);
        let arch = match config.arch {
            TeacherArch::Sasrec => ArchWeights::Sasrec(sasrec::SasrecWeights::init(
                config.blocks_or_layers.max(1),
                d,
                l_hist,
                &mut rng,
            )),
            TeacherArch::Gru4rec => ArchWeights::Gru(gru4rec::GruWeights::init(d, &mut rng)),
            TeacherArch::Caser => ArchWeights::Caser(caser::CaserWeights::init(
                config.horizontal_filters,
                config.vertical_filters,
                d,
                l_hist,
                &mut rng,
            )),
        };
        Ok(TeacherModel {
            config: config.clone(),
            n_items,
            l_hist,
            item_emb,
            out_bias: Mat::zeros(1, n_items + 1),
            arch,
        })
    }

    fn arch_tensors(arch: &ArchWeights) -> Vec<&Mat> {
        match arch {
            ArchWeights::Sasrec(w) => w.tensors(),
            ArchWeights::Gru(w) => w.tensors(),
            ArchWeights::Caser(w) => w.tensors(),
        }
    }

    fn arch_tensors_mut(arch: &mut ArchWeights) -> Vec<&mut Mat> {
        match arch {
            ArchWeights::Sasrec(w) => w.tensors_mut(),
            ArchWeights::Gru(w) => w.tensors_mut(),
            ArchWeights::Caser(w) => w.tensors_mut(),
        }
    }

    /// Trainable scalars: item embeddings minus the pinned PAD row, the
    /// output bias minus its PAD entry, then arch weights in field order.
    pub fn collect(&self) -> Vec<f64> {
        let d = self.config.embedding_dim;
        let mut out = Vec::new();
        out.extend_from_slice(&self.item_emb.data[d..]);
        out.extend_from_slice(&self.out_bias.data[1..]);
        for t in Self::arch_tensors(&self.arch) {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let d = self.config.embedding_dim;
        let emb_len = self.item_emb.data.len() - d;
        self.item_emb.data[d..].copy_from_slice(&flat[..emb_len]);
        let mut off = emb_len;
        let bias_len = self.out_bias.data.len() - 1;
        self.out_bias.data[1..].copy_from_slice(&flat[off..off + bias_len]);
        off += bias_len;
        for t in Self::arch_tensors_mut(&mut self.arch) {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }

    pub fn scalar_count(&self) -> usize {
        self.collect().len()
    }

    pub fn sha256(&self) -> String {
        let mut bytes = Vec::new();
        for &x in &self.collect() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    pub fn grads_zero(&self) -> TeacherGrads {
        let arch = match &self.arch {
            ArchWeights::Sasrec(w) => ArchWeights::Sasrec(w.zeros_like()),
            ArchWeights::Gru(w) => ArchWeights::Gru(w.zeros_like()),
            ArchWeights::Caser(w) => ArchWeights::Caser(w.zeros_like()),
        };
        TeacherGrads {
            item_emb: self.item_emb.zeros_like(),
            out_bias: self.out_bias.zeros_like(),
            arch,
        }
    }

    fn check_history(&self, history: &[u32]) -> Result<()> {
        if history.len() != self.l_hist {
            return Err(Error::Model(format!(
                "history length {} != l_hist {}",
                history.len(),
                self.l_hist
            )));
        }
        for &it in history {
            if it as usize > self.n_items {
                return Err(Error::Model(format!("unknown item id {it}")));
            }
        }
        Ok(())
    }

    /// Encode a padded history into the final hidden state (eval mode, no
    /// dropout). Deterministic given weights and input.
    pub fn encode(&self, history: &[u32]) -> Result<Vec<f64>> {
        self.check_history(history)?;
        let hidden = match &self.arch {
            ArchWeights::Sasrec(w) => {
                sasrec::forward(w, &self.item_emb, history, self.config.dropout, None).0
            }
            ArchWeights::Gru(w) => {
                gru4rec::forward(w, &self.item_emb, history, self.config.dropout, None).0
            }
            ArchWeights::Caser(w) => {
                caser::forward(w, &self.item_emb, history, self.config.dropout, None).0
            }
        };
        Ok(hidden)
    }

    /// Scores over all items: `score[i] = hidden · emb_i + bias_i` for real
    /// items, `-inf` for PAD.
    pub fn score_next(&self, history: &[u32]) -> Result<Vec<f64>> {
        let hidden = self.encode(history)?;
        Ok(self.scores_from_hidden(&hidden))
    }

    pub(crate) fn scores_from_hidden(&self, hidden: &[f64]) -> Vec<f64> {
        let mut scores = vec![f64::NEG_INFINITY; self.n_items + 1];
        for i in 1..=self.n_items {
            scores[i] = crate::num::dot(hidden, self.item_emb.row(i)) + self.out_bias.data[i];
        }
        scores
    }

    /// Train-mode forward + backward for one example; returns the loss and
    /// adds gradient contributions into `grads`. `d_scale` scales this
    /// example's contribution (1/batch for a mean).
    pub(crate) fn example_loss_grads(
        &self,
        history: &[u32],
        target: u32,
        rng: Option<&mut ChaCha8Rng>,
        d_scale: f64,
        grads: &mut TeacherGrads,
    ) -> Result<f64> {
        self.check_history(history)?;
        if target == PAD_ITEM || target as usize > self.n_items {
            return Err(Error::Model(format!("bad target item {target}")));
        }
        let dropout = self.config.dropout;

        enum ArchActs {
            S(sasrec::Acts),
            G(gru4rec::Acts),
            C(caser::Acts),
        }
        let (hidden, acts) = match &self.arch {
            ArchWeights::Sasrec(w) => {
                let (h, a) = sasrec::forward(w, &self.item_emb, history, dropout, rng);
                (h, ArchActs::S(a))
            }
            ArchWeights::Gru(w) => {
                let (h, a) = gru4rec::forward(w, &self.item_emb, history, dropout, rng);
                (h, ArchActs::G(a))
            }
            ArchWeights::Caser(w) => {
                let (h, a) = caser::forward(w, &self.item_emb, history, dropout, rng);
                (h, ArchActs::C(a))
            }
        };

        // Full-softmax CE over real items.
        let scores = self.scores_from_hidden(&hidden);
        let lse = crate::num::log_sum_exp(&scores);
        let loss = lse - scores[target as usize];

        // dlogits = softmax - onehot over items 1..=n.
        let mut probs = scores.clone();
        crate::num::softmax_in_place(&mut probs);
        let d = self.config.embedding_dim;
        let mut d_hidden = vec![0.0; d];
        for i in 1..=self.n_items {
            let mut dl = probs[i];
            if i == target as usize {
                dl -= 1.0;
            }
            dl *= d_scale;
            if dl == 0.0 {
                continue;
            }
            grads.out_bias.data[i] += dl;
            let emb = self.item_emb.row(i);
            let grow = grads.item_emb.row_mut(i);
            for c in 0..d {
                d_hidden[c] += dl * emb[c];
                grow[c] += dl * hidden[c];
            }
        }

        match (&self.arch, &mut grads.arch, acts) {
            (ArchWeights::Sasrec(w), ArchWeights::Sasrec(g), ArchActs::S(a)) => {
                sasrec::backward(w, &a, &d_hidden, g, &mut grads.item_emb, history);
            }
            (ArchWeights::Gru(w), ArchWeights::Gru(g), ArchActs::G(a)) => {
                gru4rec::backward(w, &a, &d_hidden, g, &mut grads.item_emb);
            }
            (ArchWeights::Caser(w), ArchWeights::Caser(g), ArchActs::C(a)) => {
                caser::backward(w, &a, &d_hidden, g, &mut grads.item_emb, history);
            }
            _ => unreachable!("arch/grads mismatch"),
        }
        // PAD row is pinned: discard anything the arch backward may have
        // routed to it via padded input positions.
        grads.item_emb.row_mut(PAD_ITEM as usize).fill(0.0);
        Ok(loss)
    }
}

impl TeacherGrads {
    pub fn collect(&self, d: usize) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.item_emb.data[d..]);
        out.extend_from_slice(&self.out_bias.data[1..]);
        for t in TeacherModel::arch_tensors(&self.arch) {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn add(&mut self, other: &TeacherGrads) {
        self.item_emb.axpy(1.0, &other.item_emb);
        self.out_bias.axpy(1.0, &other.out_bias);
        let mine = TeacherModel::arch_tensors_mut(&mut self.arch);
        let theirs = TeacherModel::arch_tensors(&other.arch);
        for (a, b) in mine.into_iter().zip(theirs) {
            a.axpy(1.0, b);
        }
    }
}

/// Per-example teacher supervision: the top-h items by score, strictly
/// descending with lower-index tie-break.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTopH {
    pub example_id: String,
    pub arch_name: String,
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Rank item indices by descending score, PAD excluded, ties to the lower
/// item index.
pub fn top_h_from_scores(scores: &[f64], h: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (1..scores.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(h);
    idx
}

/// Export the top-h recommendation per example.
pub fn export_top_h(
    model: &TeacherModel,
    examples: &[crate::catalog::SeqExample],
    h: usize,
    mode: crate::parallel::ExecMode,
) -> Result<Vec<TeacherTopH>> {
    if h == 0 {
        return Err(Error::Eval("h must be >= 1".to_string()));
    }
    if h > model.n_items {
        return Err(Error::Eval(format!(
            "h ({h}) exceeds item universe ({})",
            model.n_items
        )));
    }
    let rows = crate::parallel::map_indexed(mode, examples, |_, ex| -> Result<TeacherTopH> {
        let scores = model.score_next(&ex.history)?;
        let items = top_h_from_scores(&scores, h);
        let top_scores = items.iter().map(|&i| scores[i as usize]).collect();
        Ok(TeacherTopH {
            example_id: ex.id.clone(),
            arch_name: model.config.arch.to_string(),
            items,
            scores: top_scores,
        })
    });
    rows.into_iter().collect()
}

/// `example_id \t arch_name \t i1:s1,i2:s2,...` with raw item ids and
/// 6-decimal scores.
pub fn write_top_h(rows: &[TeacherTopH], log: &InteractionLog, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let pairs: Vec<String> = row
            .items
            .iter()
            .zip(&row.scores)
            .map(|(&i, s)| format!("{}:{:.6}", log.item_ids[i as usize], s))
            .collect();
        writeln!(w, "{}\t{}\t{}", row.example_id, row.arch_name, pairs.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_top_h(path: &Path, log: &InteractionLog) -> Result<Vec<TeacherTopH>> {
    let text = fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let raw_to_dense: std::collections::HashMap<&str, u32> = log
        .item_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32))
        .collect();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(id), Some(arch), Some(pairs)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::parse(&pstr, lineno + 1, "expected 3 tab-separated fields"));
        };
        let mut items = Vec::new();
        let mut scores = Vec::new();
        for pair in pairs.split(',') {
            let (raw, score) = pair
                .rsplit_once(':')
                .ok_or_else(|| Error::parse(&pstr, lineno + 1, "expected item:score"))?;
            let dense = raw_to_dense
                .get(raw)
                .ok_or_else(|| Error::parse(&pstr, lineno + 1, format!("unknown item `{raw}`")))?;
            items.push(*dense);
            scores.push(score.parse::<f64>().map_err(|_| {
                Error::parse(&pstr, lineno + 1, format!("bad score `{score}`"))
            })?);
        }
        out.push(TeacherTopH {
            example_id: id.to_string(),
            arch_name: arch.to_string(),
            items,
            scores,
        });
    }
    Ok(out)
}

/// Checkpoint: magic, version, arch, dim, |I|, l_hist, seed header, then
/// item_emb, out_bias and the arch tensors as shape-prefixed f32 blobs in
/// the same field order as [`TeacherModel::collect`].
pub const TEACHER_MAGIC: &[u8; 7] = b"SRTCHK1";

pub fn write_teacher(model: &TeacherModel, path: &Path) -> Result<()> {
    use crate::lm::io::{w_mat, w_str, w_u32, w_u64};
    let mut out = Vec::new();
    out.extend_from_slice(TEACHER_MAGIC);
    w_u32(&mut out, 1);
    let config_json = serde_json::to_string(&model.config)
        .map_err(|e| Error::Format(format!("teacher config: {e}")))?;
    w_str(&mut out, &config_json);
    w_u32(&mut out, model.n_items as u32);
    w_u32(&mut out, model.l_hist as u32);
    w_u64(&mut out, model.config.seed);
    w_mat(&mut out, &model.item_emb);
    w_mat(&mut out, &model.out_bias);
    let tensors = TeacherModel::arch_tensors(&model.arch);
    w_u32(&mut out, tensors.len() as u32);
    for t in tensors {
        w_mat(&mut out, t);
    }
    crate::lm::io::atomic_write(path, &out)
}

pub fn read_teacher(path: &Path) -> Result<TeacherModel> {
    use crate::lm::io::Reader;
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    r.expect_magic(TEACHER_MAGIC)?;
    let version = r.r_u32()?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported teacher version {version}")));
    }
    let config: TeacherConfig = serde_json::from_str(&r.r_str()?)
        .map_err(|e| Error::Format(format!("teacher config block: {e}")))?;
    let n_items = r.r_u32()? as usize;
    let l_hist = r.r_u32()? as usize;
    let _seed = r.r_u64()?;
    let mut model = TeacherModel::init(&config, n_items, l_hist)?;
    model.item_emb = r.r_mat()?;
    model.out_bias = r.r_mat()?;
    let count = r.r_u32()? as usize;
    let tensors = TeacherModel::arch_tensors_mut(&mut model.arch);
    if tensors.len() != count {
        return Err(Error::Format(format!(
            "{}: arch tensor count mismatch",
            path.display()
        )));
    }
    for t in tensors {
        let m = r.r_mat()?;
        if m.rows != t.rows || m.cols != t.cols {
            return Err(Error::Format(format!("{}: tensor shape mismatch", path.display())));
        }
        *t = m;
    }
    r.done()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{SeqExample, Split};

    fn toy_model(arch: TeacherArch) -> TeacherModel {
        let mut cfg = TeacherConfig::defaults(arch);
        cfg.embedding_dim = 8;
        cfg.blocks_or_layers = 1;
        cfg.dropout = 0.0;
        cfg.seed = 3;
        if arch == TeacherArch::Caser {
            cfg.horizontal_filters = 4;
            cfg.vertical_filters = 2;
        }
        TeacherModel::init(&cfg, 6, 4).unwrap()
    }

    fn example(id: &str, history: Vec<u32>, target: u32) -> SeqExample {
        SeqExample {
            id: id.to_string(),
            user: 0,
            history,
            target,
            split: Split::Train,
        }
    }

    #[test]
    fn untrained_scores_are_finite_with_pad_at_neg_inf() {
        for arch in [TeacherArch::Sasrec, TeacherArch::Gru4rec, TeacherArch::Caser] {
            let model = toy_model(arch);
            let scores = model.score_next(&[0, 1, 2, 3]).unwrap();
            assert_eq!(scores[0], f64::NEG_INFINITY);
            assert!(scores[1..].iter().all(|s| s.is_finite()), "{arch}");
        }
    }

    #[test]
    fn all_pad_history_is_a_defined_cold_query() {
        for arch in [TeacherArch::Sasrec, TeacherArch::Gru4rec, TeacherArch::Caser] {
            let model = toy_model(arch);
            let a = model.score_next(&[0, 0, 0, 0]).unwrap();
            let b = model.score_next(&[0, 0, 0, 0]).unwrap();
            assert_eq!(a, b, "{arch}");
            assert!(a[1..].iter().all(|s| s.is_finite()));
        }
        // The GRU consumes no steps on an all-PAD history, so its cold
        // scores are exactly the zero-context bias.
        let model = toy_model(TeacherArch::Gru4rec);
        let scores = model.score_next(&[0, 0, 0, 0]).unwrap();
        for i in 1..=model.n_items {
            assert_eq!(scores[i], model.out_bias.data[i]);
        }
    }

    #[test]
    fn unknown_item_is_an_error() {
        let model = toy_model(TeacherArch::Sasrec);
        assert!(model.score_next(&[0, 1, 2, 99]).is_err());
    }

    #[test]
    fn top_h_is_descending_with_index_tie_break() {
        let scores = vec![f64::NEG_INFINITY, 1.0, 3.0, 3.0, 0.5, 2.0, -1.0];
        let top = top_h_from_scores(&scores, 4);
        assert_eq!(top, vec![2, 3, 5, 1]);
    }

    #[test]
    fn export_h1_is_argmax_and_prefix_property_holds() {
        let model = toy_model(TeacherArch::Gru4rec);
        let examples = vec![
            example("u0:t1", vec![0, 1, 2, 3], 4),
            example("u0:t2", vec![1, 2, 3, 4], 5),
        ];
        let h1 = export_top_h(&model, &examples, 1, crate::parallel::ExecMode::Sequential).unwrap();
        let h5 = export_top_h(&model, &examples, 5, crate::parallel::ExecMode::Sequential).unwrap();
        for (a, b) in h1.iter().zip(&h5) {
            assert_eq!(a.items[..], b.items[..1]);
            let scores = model.score_next(&examples[0].history).unwrap();
            let argmax = top_h_from_scores(&scores, 1)[0];
            if a.example_id == "u0:t1" {
                assert_eq!(a.items[0], argmax);
            }
        }
        assert!(export_top_h(&model, &examples, 7, crate::parallel::ExecMode::Sequential).is_err());
    }

    #[test]
    fn top_h_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy_model(TeacherArch::Sasrec);
        let examples = vec![example("u0:t1", vec![0, 1, 2, 3], 4)];
        let rows = export_top_h(&model, &examples, 3, crate::parallel::ExecMode::Sequential).unwrap();
        let log = InteractionLog {
            interactions: vec![],
            user_ids: vec!["u0".into()],
            item_ids: (0..=6).map(|i| if i == 0 { "<pad_item>".into() } else { format!("i{i}") }).collect(),
        };
        let path = dir.path().join("top.tsv");
        write_top_h(&rows, &log, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("u0:t1\tsasrec\t"));
        // Scores carry 6 decimals.
        assert!(text.trim().split(':').next_back().unwrap().split('.').next_back().unwrap().len() == 6);
        let back = read_top_h(&path, &log).unwrap();
        assert_eq!(back[0].items, rows[0].items);
        assert_eq!(back[0].example_id, rows[0].example_id);
    }

    #[test]
    fn checkpoint_round_trips_for_all_archs() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [TeacherArch::Sasrec, TeacherArch::Gru4rec, TeacherArch::Caser] {
            let model = toy_model(arch);
            let path = dir.path().join(format!("{arch}.ckpt"));
            write_teacher(&model, &path).unwrap();
            let loaded = read_teacher(&path).unwrap();
            // One f32 rounding, then a fixed point.
            let path2 = dir.path().join(format!("{arch}.2.ckpt"));
            write_teacher(&loaded, &path2).unwrap();
            let loaded2 = read_teacher(&path2).unwrap();
            assert_eq!(loaded.sha256(), loaded2.sha256(), "{arch}");
            let scores_a = loaded.score_next(&[0, 1, 2, 3]).unwrap();
            let scores_b = loaded2.score_next(&[0, 1, 2, 3]).unwrap();
            assert_eq!(scores_a, scores_b);
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_each_arch() {
        use crate::gradcheck::central_diff_check;
        // 5-item instance, two examples, all architectures.
        let cases = [
            (vec![0u32, 1, 2, 3], 4u32),
            (vec![2, 3, 4, 5], 1),
        ];
        for arch in [TeacherArch::Sasrec, TeacherArch::Gru4rec, TeacherArch::Caser] {
            let mut cfg = TeacherConfig::defaults(arch);
            cfg.embedding_dim = 6;
            cfg.blocks_or_layers = 2;
            cfg.dropout = 0.0;
            cfg.seed = 7;
            if arch == TeacherArch::Caser {
                cfg.horizontal_filters = 5;
                cfg.vertical_filters = 2;
            }
            let model = TeacherModel::init(&cfg, 5, 4).unwrap();

            let mut grads = model.grads_zero();
            let mut loss = 0.0;
            for (h, t) in &cases {
                loss += model
                    .example_loss_grads(h, *t, None, 1.0 / cases.len() as f64, &mut grads)
                    .unwrap();
            }
            loss /= cases.len() as f64;
            assert!(loss.is_finite());
            let analytic = grads.collect(cfg.embedding_dim);
            let x0 = model.collect();

            let mut probe = model.clone();
            let f = |x: &[f64]| {
                probe.assign(x);
                let mut total = 0.0;
                for (h, t) in &cases {
                    let scores = probe.score_next(h).unwrap();
                    let lse = crate::num::log_sum_exp(&scores);
                    total += lse - scores[*t as usize];
                }
                total / cases.len() as f64
            };
            let rep = central_diff_check(f, &x0, &analytic, 3);
            assert!(
                rep.max_rel_err < 1e-4,
                "{arch}: rel err {} over {} coords",
                rep.max_rel_err,
                rep.checked
            );
        }
    }
}
