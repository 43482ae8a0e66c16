//! Convolutional encoder: horizontal filters of cycled heights 1..L with
//! ReLU + max-over-time pooling, vertical filters over time columns, then a
//! fully connected projection back to the embedding space.

use rand_chacha::ChaCha8Rng;

use crate::num::{dot, Mat};

use super::sasrec::dropout_mask;

#[derive(Clone, Debug, PartialEq)]
pub struct CaserWeights {
    pub h_filters: Vec<Mat>,
    pub h_bias: Mat,
    pub v_filters: Mat,
    pub fc_w: Mat,
    pub fc_b: Mat,
}

impl CaserWeights {
    /// Horizontal filter f gets height (f mod L)+1; vertical filters span
    /// the full window.
    pub fn init(n_h: usize, n_v: usize, d: usize, l_hist: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        let h_filters = (0..n_h)
            .map(|f| Mat::randn((f % l_hist) + 1, d, std, rng))
            .collect();
        let z_dim = n_h + n_v * d;
        CaserWeights {
            h_filters,
            h_bias: Mat::zeros(1, n_h),
            v_filters: Mat::randn(n_v, l_hist, std, rng),
            fc_w: Mat::randn(d, z_dim, (1.0 / z_dim as f64).sqrt(), rng),
            fc_b: Mat::zeros(1, d),
        }
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out: Vec<&Mat> = self.h_filters.iter().collect();
        out.extend([&self.h_bias, &self.v_filters, &self.fc_w, &self.fc_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = self.h_filters.iter_mut().collect();
        out.push(&mut self.h_bias);
        out.push(&mut self.v_filters);
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out
    }

    pub fn zeros_like(&self) -> Self {
        CaserWeights {
            h_filters: self.h_filters.iter().map(Mat::zeros_like).collect(),
            h_bias: self.h_bias.zeros_like(),
            v_filters: self.v_filters.zeros_like(),
            fc_w: self.fc_w.zeros_like(),
            fc_b: self.fc_b.zeros_like(),
        }
    }
}

pub(crate) struct Acts {
    emb: Mat,
    /// Per horizontal filter: (argmax window, pre-ReLU value there).
    pooled: Vec<(usize, f64)>,
    z: Vec<f64>,
    mask_z: Option<Mat>,
    fc_pre: Vec<f64>,
}

pub(crate) fn forward(
    w: &CaserWeights,
    item_emb: &Mat,
    history: &[u32],
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, Acts) {
    let l = history.len();
    let d = item_emb.cols;
    let n_h = w.h_filters.len();
    let n_v = w.v_filters.rows;

    let mut emb = Mat::zeros(l, d);
    for (t, &item) in history.iter().enumerate() {
        emb.row_mut(t).copy_from_slice(item_emb.row(item as usize));
    }

    let mut z = Vec::with_capacity(n_h + n_v * d);
    let mut pooled = Vec::with_capacity(n_h);
    for (f, filt) in w.h_filters.iter().enumerate() {
        let height = filt.rows;
        let mut best = f64::NEG_INFINITY;
        let mut best_j = 0;
        let mut best_pre = 0.0;
        for j in 0..=(l - height) {
            let mut pre = w.h_bias.data[f];
            for r in 0..height {
                pre += dot(emb.row(j + r), filt.row(r));
            }
            let act = pre.max(0.0);
            if act > best {
                best = act;
                best_j = j;
                best_pre = pre;
            }
        }
        pooled.push((best_j, best_pre));
        z.push(best);
    }
    for v in 0..n_v {
        for c in 0..d {
            let mut s = 0.0;
            for t in 0..l {
                s += w.v_filters.at(v, t) * emb.at(t, c);
            }
            z.push(s);
        }
    }

    let mask_z = dropout_mask(1, z.len(), dropout, &mut rng);
    let zd: Vec<f64> = match &mask_z {
        Some(m) => z.iter().zip(&m.data).map(|(a, b)| a * b).collect(),
        None => z.clone(),
    };

    let mut fc_pre = vec![0.0; d];
    for r in 0..d {
        fc_pre[r] = dot(w.fc_w.row(r), &zd) + w.fc_b.data[r];
    }
    let hidden: Vec<f64> = fc_pre.iter().map(|&x| x.max(0.0)).collect();
    (
        hidden,
        Acts {
            emb,
            pooled,
            z: zd,
            mask_z,
            fc_pre,
        },
    )
}

pub(crate) fn backward(
    w: &CaserWeights,
    acts: &Acts,
    d_hidden: &[f64],
    g: &mut CaserWeights,
    demb_table: &mut Mat,
    history: &[u32],
) {
    let l = history.len();
    let d = d_hidden.len();
    let n_h = w.h_filters.len();
    let n_v = w.v_filters.rows;

    let mut dfc_pre = vec![0.0; d];
    for r in 0..d {
        dfc_pre[r] = if acts.fc_pre[r] > 0.0 { d_hidden[r] } else { 0.0 };
        g.fc_b.data[r] += dfc_pre[r];
    }
    let mut dz = vec![0.0; acts.z.len()];
    for r in 0..d {
        let dp = dfc_pre[r];
        if dp == 0.0 {
            continue;
        }
        let wr = w.fc_w.row(r);
        let gr = g.fc_w.row_mut(r);
        for c in 0..dz.len() {
            gr[c] += dp * acts.z[c];
            dz[c] += dp * wr[c];
        }
    }
    if let Some(m) = &acts.mask_z {
        for (x, k) in dz.iter_mut().zip(&m.data) {
            *x *= k;
        }
    }

    let mut demb = Mat::zeros(l, d);
    for (f, filt) in w.h_filters.iter().enumerate() {
        let (j, pre) = acts.pooled[f];
        let dpool = dz[f];
        if dpool == 0.0 || pre <= 0.0 {
            continue;
        }
        g.h_bias.data[f] += dpool;
        let height = filt.rows;
        for r in 0..height {
            let erow = acts.emb.row(j + r);
            let grow = g.h_filters[f].row_mut(r);
            let frow = filt.row(r);
            let drow = demb.row_mut(j + r);
            for c in 0..d {
                grow[c] += dpool * erow[c];
                drow[c] += dpool * frow[c];
            }
        }
    }
    for v in 0..n_v {
        let dout = &dz[n_h + v * d..n_h + (v + 1) * d];
        for t in 0..l {
            let erow = acts.emb.row(t);
            let gv = dot(dout, erow);
            *g.v_filters.at_mut(v, t) += gv;
            let wvt = w.v_filters.at(v, t);
            if wvt != 0.0 {
                let drow = demb.row_mut(t);
                for c in 0..d {
                    drow[c] += wvt * dout[c];
                }
            }
        }
    }

    for (t, &item) in history.iter().enumerate() {
        let src = demb.row(t);
        let dst = demb_table.row_mut(item as usize);
        for c in 0..d {
            dst[c] += src[c];
        }
    }
}
