//! Self-attentive encoder: learned positions, causal single-head attention
//! with PAD keys masked out, pointwise FFN, pre-LN blocks, final LN. The
//! hidden state at the last position scores the next item.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::PAD_ITEM;
use crate::num::{dot, softmax_in_place, Mat};

#[derive(Clone, Debug, PartialEq)]
pub struct SasrecBlock {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SasrecWeights {
    pub pos_emb: Mat,
    pub blocks: Vec<SasrecBlock>,
    pub lnf_g: Mat,
    pub lnf_b: Mat,
}

impl SasrecWeights {
    pub fn init(n_blocks: usize, d: usize, l_hist: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        let blocks = (0..n_blocks)
            .map(|_| SasrecBlock {
                wq: Mat::randn(d, d, std, rng),
                wk: Mat::randn(d, d, std, rng),
                wv: Mat::randn(d, d, std, rng),
                ln1_g: Mat::filled(1, d, 1.0),
                ln1_b: Mat::zeros(1, d),
                w1: Mat::randn(d, d, std, rng),
                b1: Mat::zeros(1, d),
                w2: Mat::randn(d, d, std, rng),
                b2: Mat::zeros(1, d),
                ln2_g: Mat::filled(1, d, 1.0),
                ln2_b: Mat::zeros(1, d),
            })
            .collect();
        SasrecWeights {
            pos_emb: Mat::randn(l_hist, d, std, rng),
            blocks,
            lnf_g: Mat::filled(1, d, 1.0),
            lnf_b: Mat::zeros(1, d),
        }
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = vec![&self.pos_emb];
        for b in &self.blocks {
            out.extend([
                &b.wq, &b.wk, &b.wv, &b.ln1_g, &b.ln1_b, &b.w1, &b.b1, &b.w2, &b.b2, &b.ln2_g,
                &b.ln2_b,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![&mut self.pos_emb];
        for b in &mut self.blocks {
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.ln1_g);
            out.push(&mut b.ln1_b);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
            out.push(&mut b.ln2_g);
            out.push(&mut b.ln2_b);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.lnf_g.cols;
        SasrecWeights {
            pos_emb: self.pos_emb.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|_| SasrecBlock {
                    wq: Mat::zeros(d, d),
                    wk: Mat::zeros(d, d),
                    wv: Mat::zeros(d, d),
                    ln1_g: Mat::zeros(1, d),
                    ln1_b: Mat::zeros(1, d),
                    w1: Mat::zeros(d, d),
                    b1: Mat::zeros(1, d),
                    w2: Mat::zeros(d, d),
                    b2: Mat::zeros(1, d),
                    ln2_g: Mat::zeros(1, d),
                    ln2_b: Mat::zeros(1, d),
                })
                .collect(),
            lnf_g: self.lnf_g.zeros_like(),
            lnf_b: self.lnf_b.zeros_like(),
        }
    }
}

const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

pub(crate) fn ln_forward(x: &Mat, g: &Mat, b: &Mat) -> (Mat, LnCache) {
    let (n, d) = (x.rows, x.cols);
    let mut out = Mat::zeros(n, d);
    let mut xhat = Mat::zeros(n, d);
    let mut inv_std = vec![0.0; n];
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = istd;
        for c in 0..d {
            let xh = (row[c] - mean) * istd;
            *xhat.at_mut(r, c) = xh;
            *out.at_mut(r, c) = g.data[c] * xh + b.data[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

pub(crate) fn ln_backward(
    dy: &Mat,
    cache: &LnCache,
    g: &Mat,
    mut dg_db: Option<(&mut Mat, &mut Mat)>,
) -> Mat {
    let (n, d) = (dy.rows, dy.cols);
    let mut dx = Mat::zeros(n, d);
    for r in 0..n {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        if let Some((dg, db)) = dg_db.as_mut() {
            for c in 0..d {
                dg.data[c] += dyr[c] * xh[c];
                db.data[c] += dyr[c];
            }
        }
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            let dxh = dyr[c] * g.data[c];
            m1 += dxh;
            m2 += dxh * xh[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let istd = cache.inv_std[r];
        for c in 0..d {
            let dxh = dyr[c] * g.data[c];
            *dx.at_mut(r, c) = istd * (dxh - m1 - xh[c] * m2);
        }
    }
    dx
}

/// Inverted dropout mask; `None` in eval mode.
pub(crate) fn dropout_mask(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Option<Mat> {
    let rng = rng.as_mut()?;
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 - p;
    let mut m = Mat::zeros(rows, cols);
    for x in m.data.iter_mut() {
        if rng.gen_range(0.0..1.0) < keep {
            *x = 1.0 / keep;
        }
    }
    Some(m)
}

fn apply_mask(x: &mut Mat, mask: &Option<Mat>) {
    if let Some(m) = mask {
        for (a, b) in x.data.iter_mut().zip(&m.data) {
            *a *= b;
        }
    }
}

struct BlockActs {
    x_in: Mat,
    ln1: LnCache,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn_w: Mat,
    mask_attn: Option<Mat>,
    x_mid: Mat,
    ln2: LnCache,
    b: Mat,
    f1: Mat,
    mask_ffn: Option<Mat>,
}

pub(crate) struct Acts {
    key_ok: Vec<bool>,
    mask_in: Option<Mat>,
    blocks: Vec<BlockActs>,
    lnf: LnCache,
}

pub(crate) fn forward(
    w: &SasrecWeights,
    item_emb: &Mat,
    history: &[u32],
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, Acts) {
    let l = history.len();
    let d = item_emb.cols;
    let scale = 1.0 / (d as f64).sqrt();
    let key_ok: Vec<bool> = history.iter().map(|&i| i != PAD_ITEM).collect();

    let mut x = Mat::zeros(l, d);
    for (t, &item) in history.iter().enumerate() {
        let emb = item_emb.row(item as usize);
        let pos = w.pos_emb.row(t);
        let row = x.row_mut(t);
        for c in 0..d {
            row[c] = emb[c] + pos[c];
        }
    }
    let mask_in = dropout_mask(l, d, dropout, &mut rng);
    apply_mask(&mut x, &mask_in);

    let mut blocks = Vec::with_capacity(w.blocks.len());
    for bw in &w.blocks {
        let x_in = x;
        let (a, ln1) = ln_forward(&x_in, &bw.ln1_g, &bw.ln1_b);
        let q = a.matmul_nt(&bw.wq);
        let k = a.matmul_nt(&bw.wk);
        let v = a.matmul_nt(&bw.wv);

        let mut attn_w = Mat::filled(l, l, f64::NEG_INFINITY);
        for i in 0..l {
            for j in 0..=i {
                if key_ok[j] {
                    *attn_w.at_mut(i, j) = dot(q.row(i), k.row(j)) * scale;
                }
            }
            softmax_in_place(attn_w.row_mut(i));
        }
        let mut attn = Mat::zeros(l, d);
        for i in 0..l {
            for j in 0..=i {
                let s = attn_w.at(i, j);
                if s == 0.0 {
                    continue;
                }
                let vr = v.row(j);
                let ar = attn.row_mut(i);
                for c in 0..d {
                    ar[c] += s * vr[c];
                }
            }
        }
        let mask_attn = dropout_mask(l, d, dropout, &mut rng);
        apply_mask(&mut attn, &mask_attn);
        let mut x_mid = x_in.clone();
        x_mid.axpy(1.0, &attn);

        let (b, ln2) = ln_forward(&x_mid, &bw.ln2_g, &bw.ln2_b);
        let mut f1 = b.matmul_nt(&bw.w1);
        for r in 0..l {
            let row = f1.row_mut(r);
            for (c, xv) in row.iter_mut().enumerate() {
                *xv = (*xv + bw.b1.data[c]).max(0.0);
            }
        }
        let mut f2 = f1.matmul_nt(&bw.w2);
        for r in 0..l {
            let row = f2.row_mut(r);
            for (c, xv) in row.iter_mut().enumerate() {
                *xv += bw.b2.data[c];
            }
        }
        let mask_ffn = dropout_mask(l, d, dropout, &mut rng);
        apply_mask(&mut f2, &mask_ffn);
        let mut x_out = x_mid.clone();
        x_out.axpy(1.0, &f2);

        blocks.push(BlockActs {
            x_in,
            ln1,
            a,
            q,
            k,
            v,
            attn_w,
            mask_attn,
            x_mid,
            ln2,
            b,
            f1,
            mask_ffn,
        });
        x = x_out;
    }

    let (h, lnf) = ln_forward(&x, &w.lnf_g, &w.lnf_b);
    let hidden = h.row(l - 1).to_vec();
    (
        hidden,
        Acts {
            key_ok,
            mask_in,
            blocks,
            lnf,
        },
    )
}

pub(crate) fn backward(
    w: &SasrecWeights,
    acts: &Acts,
    d_hidden: &[f64],
    g: &mut SasrecWeights,
    demb: &mut Mat,
    history: &[u32],
) {
    let l = history.len();
    let d = d_hidden.len();
    let scale = 1.0 / (d as f64).sqrt();

    let mut dh = Mat::zeros(l, d);
    dh.row_mut(l - 1).copy_from_slice(d_hidden);
    let mut dstream = ln_backward(&dh, &acts.lnf, &w.lnf_g, Some((&mut g.lnf_g, &mut g.lnf_b)));

    for (bi, ba) in acts.blocks.iter().enumerate().rev() {
        let bw = &w.blocks[bi];
        let bg = &mut g.blocks[bi];

        // FFN sublayer.
        let mut df2 = dstream.clone();
        apply_mask(&mut df2, &ba.mask_ffn);
        df2.add_tn(&ba.f1, &mut bg.w2);
        for r in 0..l {
            let row = df2.row(r);
            for c in 0..d {
                bg.b2.data[c] += row[c];
            }
        }
        let mut df1 = df2.matmul_nn(&bw.w2);
        for r in 0..l {
            let f1r = ba.f1.row(r);
            let dr = df1.row_mut(r);
            for c in 0..d {
                if f1r[c] <= 0.0 {
                    dr[c] = 0.0;
                }
            }
        }
        df1.add_tn(&ba.b, &mut bg.w1);
        for r in 0..l {
            let row = df1.row(r);
            for c in 0..d {
                bg.b1.data[c] += row[c];
            }
        }
        let db = df1.matmul_nn(&bw.w1);
        let dx_ln2 = ln_backward(&db, &ba.ln2, &bw.ln2_g, Some((&mut bg.ln2_g, &mut bg.ln2_b)));
        let mut dx_mid = dstream;
        dx_mid.axpy(1.0, &dx_ln2);

        // Attention sublayer.
        let mut dattn = dx_mid.clone();
        apply_mask(&mut dattn, &ba.mask_attn);
        let mut dq = Mat::zeros(l, d);
        let mut dk = Mat::zeros(l, d);
        let mut dv = Mat::zeros(l, d);
        for i in 0..l {
            let mut ds = vec![0.0; i + 1];
            for (j, dsj) in ds.iter_mut().enumerate() {
                *dsj = dot(dattn.row(i), ba.v.row(j));
            }
            let srow = ba.attn_w.row(i);
            let mut inner = 0.0;
            for j in 0..=i {
                inner += srow[j] * ds[j];
            }
            for j in 0..=i {
                let s = srow[j];
                if s != 0.0 {
                    let dvr = dv.row_mut(j);
                    let dar = dattn.row(i);
                    for c in 0..d {
                        dvr[c] += s * dar[c];
                    }
                }
                if !acts.key_ok[j] {
                    continue;
                }
                let dz = s * (ds[j] - inner) * scale;
                if dz != 0.0 {
                    let dqr = dq.row_mut(i);
                    let kr = ba.k.row(j);
                    for c in 0..d {
                        dqr[c] += dz * kr[c];
                    }
                    let dkr = dk.row_mut(j);
                    let qr = ba.q.row(i);
                    for c in 0..d {
                        dkr[c] += dz * qr[c];
                    }
                }
            }
        }
        let mut da = dq.matmul_nn(&bw.wq);
        da.axpy(1.0, &dk.matmul_nn(&bw.wk));
        da.axpy(1.0, &dv.matmul_nn(&bw.wv));
        dq.add_tn(&ba.a, &mut bg.wq);
        dk.add_tn(&ba.a, &mut bg.wk);
        dv.add_tn(&ba.a, &mut bg.wv);

        let dx_ln1 = ln_backward(&da, &ba.ln1, &bw.ln1_g, Some((&mut bg.ln1_g, &mut bg.ln1_b)));
        dstream = dx_mid;
        dstream.axpy(1.0, &dx_ln1);
    }

    apply_mask(&mut dstream, &acts.mask_in);
    for (t, &item) in history.iter().enumerate() {
        let dx0 = dstream.row(t);
        if item != PAD_ITEM {
            let row = demb.row_mut(item as usize);
            for c in 0..d {
                row[c] += dx0[c];
            }
        }
        let prow = g.pos_emb.row_mut(t);
        for c in 0..d {
            prow[c] += dx0[c];
        }
    }
}
