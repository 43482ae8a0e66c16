//! Single-layer GRU encoder. PAD positions are skipped, so the windowed
//! history collapses to its real items; an all-PAD history keeps the zero
//! initial state and scores reduce to the output bias.

use rand_chacha::ChaCha8Rng;

use crate::catalog::PAD_ITEM;
use crate::num::{sigmoid, Mat};

use super::sasrec::dropout_mask;

#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights {
    pub wz: Mat,
    pub wr: Mat,
    pub wc: Mat,
    pub uz: Mat,
    pub ur: Mat,
    pub uc: Mat,
    pub bz: Mat,
    pub br: Mat,
    pub bc: Mat,
}

impl GruWeights {
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        GruWeights {
            wz: Mat::randn(d, d, std, rng),
            wr: Mat::randn(d, d, std, rng),
            wc: Mat::randn(d, d, std, rng),
            uz: Mat::randn(d, d, std, rng),
            ur: Mat::randn(d, d, std, rng),
            uc: Mat::randn(d, d, std, rng),
            bz: Mat::zeros(1, d),
            br: Mat::zeros(1, d),
            bc: Mat::zeros(1, d),
        }
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        vec![
            &self.wz, &self.wr, &self.wc, &self.uz, &self.ur, &self.uc, &self.bz, &self.br,
            &self.bc,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![
            &mut self.wz,
            &mut self.wr,
            &mut self.wc,
            &mut self.uz,
            &mut self.ur,
            &mut self.uc,
            &mut self.bz,
            &mut self.br,
            &mut self.bc,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.bz.cols;
        GruWeights {
            wz: Mat::zeros(d, d),
            wr: Mat::zeros(d, d),
            wc: Mat::zeros(d, d),
            uz: Mat::zeros(d, d),
            ur: Mat::zeros(d, d),
            uc: Mat::zeros(d, d),
            bz: Mat::zeros(1, d),
            br: Mat::zeros(1, d),
            bc: Mat::zeros(1, d),
        }
    }
}

struct StepActs {
    item: u32,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
}

pub(crate) struct Acts {
    steps: Vec<StepActs>,
    mask_out: Option<Mat>,
}

fn matvec(w: &Mat, x: &[f64]) -> Vec<f64> {
    (0..w.rows).map(|r| crate::num::dot(w.row(r), x)).collect()
}

fn matvec_t_add(w: &Mat, dout: &[f64], dst: &mut [f64]) {
    for r in 0..w.rows {
        let d = dout[r];
        if d == 0.0 {
            continue;
        }
        let row = w.row(r);
        for c in 0..row.len() {
            dst[c] += d * row[c];
        }
    }
}

fn accumulate_outer(g: &mut Mat, dout: &[f64], x: &[f64]) {
    for r in 0..g.rows {
        let d = dout[r];
        if d == 0.0 {
            continue;
        }
        let gr = g.row_mut(r);
        for c in 0..gr.len() {
            gr[c] += d * x[c];
        }
    }
}

/// z = σ(Wz x + Uz h + bz); r = σ(Wr x + Ur h + br);
/// c = tanh(Wc x + Uc (r⊙h) + bc); h' = (1−z)⊙h + z⊙c.
pub(crate) fn forward(
    w: &GruWeights,
    item_emb: &Mat,
    history: &[u32],
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, Acts) {
    let d = item_emb.cols;
    let mut h = vec![0.0; d];
    let mut steps = Vec::new();
    for &item in history.iter().filter(|&&i| i != PAD_ITEM) {
        let x = item_emb.row(item as usize).to_vec();
        let mut z = matvec(&w.wz, &x);
        let uzh = matvec(&w.uz, &h);
        let mut r = matvec(&w.wr, &x);
        let urh = matvec(&w.ur, &h);
        for c in 0..d {
            z[c] = sigmoid(z[c] + uzh[c] + w.bz.data[c]);
            r[c] = sigmoid(r[c] + urh[c] + w.br.data[c]);
        }
        let rh: Vec<f64> = (0..d).map(|c| r[c] * h[c]).collect();
        let mut cand = matvec(&w.wc, &x);
        let ucrh = matvec(&w.uc, &rh);
        for c in 0..d {
            cand[c] = (cand[c] + ucrh[c] + w.bc.data[c]).tanh();
        }
        let h_prev = h.clone();
        for c in 0..d {
            h[c] = (1.0 - z[c]) * h_prev[c] + z[c] * cand[c];
        }
        steps.push(StepActs {
            item,
            x,
            h_prev,
            z,
            r,
            c: cand,
        });
    }
    let mask_out = dropout_mask(1, d, dropout, &mut rng);
    if let Some(m) = &mask_out {
        for c in 0..d {
            h[c] *= m.data[c];
        }
    }
    (h, Acts { steps, mask_out })
}

pub(crate) fn backward(
    w: &GruWeights,
    acts: &Acts,
    d_hidden: &[f64],
    g: &mut GruWeights,
    demb: &mut Mat,
) {
    let d = d_hidden.len();
    let mut dh: Vec<f64> = d_hidden.to_vec();
    if let Some(m) = &acts.mask_out {
        for c in 0..d {
            dh[c] *= m.data[c];
        }
    }

    for step in acts.steps.iter().rev() {
        let h_prev = &step.h_prev;
        let z = &step.z;
        let r = &step.r;
        let cand = &step.c;
        let x = &step.x;

        // h' = (1-z)⊙h_prev + z⊙c
        let mut dz = vec![0.0; d];
        let mut dc = vec![0.0; d];
        let mut dh_prev = vec![0.0; d];
        for i in 0..d {
            dz[i] = dh[i] * (cand[i] - h_prev[i]);
            dc[i] = dh[i] * z[i];
            dh_prev[i] = dh[i] * (1.0 - z[i]);
        }
        let mut dx = vec![0.0; d];

        // c = tanh(Wc x + Uc (r⊙h_prev) + bc)
        let mut dpre_c = vec![0.0; d];
        for i in 0..d {
            dpre_c[i] = dc[i] * (1.0 - cand[i] * cand[i]);
            g.bc.data[i] += dpre_c[i];
        }
        let rh: Vec<f64> = (0..d).map(|i| r[i] * h_prev[i]).collect();
        accumulate_outer(&mut g.wc, &dpre_c, x);
        accumulate_outer(&mut g.uc, &dpre_c, &rh);
        matvec_t_add(&w.wc, &dpre_c, &mut dx);
        let mut drh = vec![0.0; d];
        matvec_t_add(&w.uc, &dpre_c, &mut drh);
        let mut dr = vec![0.0; d];
        for i in 0..d {
            dr[i] = drh[i] * h_prev[i];
            dh_prev[i] += drh[i] * r[i];
        }

        // r = σ(Wr x + Ur h_prev + br)
        let mut dpre_r = vec![0.0; d];
        for i in 0..d {
            dpre_r[i] = dr[i] * r[i] * (1.0 - r[i]);
            g.br.data[i] += dpre_r[i];
        }
        accumulate_outer(&mut g.wr, &dpre_r, x);
        accumulate_outer(&mut g.ur, &dpre_r, h_prev);
        matvec_t_add(&w.wr, &dpre_r, &mut dx);
        matvec_t_add(&w.ur, &dpre_r, &mut dh_prev);

        // z = σ(Wz x + Uz h_prev + bz)
        let mut dpre_z = vec![0.0; d];
        for i in 0..d {
            dpre_z[i] = dz[i] * z[i] * (1.0 - z[i]);
            g.bz.data[i] += dpre_z[i];
        }
        accumulate_outer(&mut g.wz, &dpre_z, x);
        accumulate_outer(&mut g.uz, &dpre_z, h_prev);
        matvec_t_add(&w.wz, &dpre_z, &mut dx);
        matvec_t_add(&w.uz, &dpre_z, &mut dh_prev);

        let row = demb.row_mut(step.item as usize);
        for i in 0..d {
            row[i] += dx[i];
        }
        dh = dh_prev;
    }
}
