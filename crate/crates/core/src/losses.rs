//! Training objectives: object-aware contrastive alignment (foreground and
//! background terms with in-batch false-negative exclusion), region
//! isolation through pairwise optimal transport, and their weighted sum.
//!
//! Every loss returns its value together with gradients; the reference
//! embeddings are frozen during training, but their gradients can still be
//! requested for checking.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::avmaps::{
    cosine_map, cosine_map_backward, masks, masks_backward, pool, pool_backward, reference_maps,
    reference_maps_backward, MaskParams,
};
use crate::encoders::{AudioEmbedding, ReferenceEmbeddings, VisualFeatureMap};
use crate::error::{ensure, Error, Result};
use crate::ot::{
    build_cost_backward, cost_with_spatial, grid_coords, normalize_backward, normalize_to_simplex,
    sinkhorn_raw, spatial_cost, SinkhornConfig,
};
use crate::sim::{cosine, cosine_backward, NORM_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcaConfig {
    /// In-batch negatives whose reference similarity to the anchor exceeds
    /// this are treated as false negatives and dropped.
    pub tau: f64,
    /// Divisor applied to every similarity inside the exponentials.
    pub temperature: f64,
}

impl Default for OcaConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            temperature: 1.0,
        }
    }
}

impl OcaConfig {
    /// `tau` may go down to -1, which drops every in-batch negative.
    pub fn validate(&self) -> Result<()> {
        ensure((-1.0..=1.0).contains(&self.tau), || {
            format!("tau must lie in [-1, 1], got {}", self.tau)
        })?;
        ensure(self.temperature > 0.0 && self.temperature.is_finite(), || {
            format!("temperature must be positive, got {}", self.temperature)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_frg: f64,
    pub l_bkg: f64,
    pub l_oca: f64,
    pub l_ori: f64,
    /// Baseline audio-visual contrastive term; 0 unless the alignment loss
    /// is [`Alignment::Contrastive`].
    pub l_contrastive: f64,
    pub l_total: f64,
    pub false_negative_count: usize,
    /// (K+1, K+1) transport values averaged over the batch; diagonal is 0.
    pub pairwise_ot_terms: Vec<Vec<f64>>,
}

/// Value of one contrastive term and its gradients.
#[derive(Clone, Debug)]
pub struct OcaTerm {
    pub loss: f64,
    /// Ordered (anchor, negative) pairs removed by the threshold.
    pub false_negatives: usize,
    /// Removed terms per anchor.
    pub excluded_per_anchor: Vec<usize>,
    pub d_first: Array2<f64>,
    pub d_second: Array2<f64>,
    pub d_reference: Array2<f64>,
}

fn rows_match(arrays: &[&Array2<f64>]) -> Result<(usize, usize)> {
    let dim = arrays[0].dim();
    ensure(dim.0 >= 1, || "batch must not be empty".into())?;
    if arrays.iter().any(|a| a.dim() != dim) {
        return Err(Error::Dimension(format!(
            "embedding shapes differ: {:?}",
            arrays.iter().map(|a| a.dim()).collect::<Vec<_>>()
        )));
    }
    Ok(dim)
}

fn row(a: &Array2<f64>, i: usize) -> &[f64] {
    let (_, c) = a.dim();
    &a.as_slice().expect("standard layout")[i * c..(i + 1) * c]
}

fn row_mut(a: &mut Array2<f64>, i: usize) -> &mut [f64] {
    let (_, c) = a.dim();
    &mut a.as_slice_mut().expect("standard layout")[i * c..(i + 1) * c]
}

fn standard(a: &Array2<f64>) -> Array2<f64> {
    a.as_standard_layout().into_owned()
}

/// Mean of the K foreground references, L2-renormalised.
pub fn pooled_reference(refs: &ReferenceEmbeddings) -> Array2<f64> {
    let mean = refs.foreground.mean_axis(Axis(1)).expect("K >= 1");
    let mut out = mean;
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n >= NORM_FLOOR {
            r /= n;
        }
    }
    out
}

/// Chain rule through [`pooled_reference`]: (B, c) upstream to (B, K, c).
pub fn pooled_reference_backward(refs: &ReferenceEmbeddings, d_pooled: &Array2<f64>) -> Array3<f64> {
    let (b, k, c) = refs.foreground.dim();
    let mean = refs.foreground.mean_axis(Axis(1)).expect("K >= 1");
    let mut out = Array3::zeros((b, k, c));
    for bi in 0..b {
        let m = mean.row(bi);
        let n = m.dot(&m).sqrt();
        if n < NORM_FLOOR {
            continue;
        }
        let y = &m / n;
        let g = d_pooled.row(bi);
        let dm = (&g - &(&y * g.dot(&y))) / n / k as f64;
        for ki in 0..k {
            out.slice_mut(s![bi, ki, ..]).assign(&dm);
        }
    }
    out
}

/// Foreground alignment. Anchor `i` is the pooled reference `l_r^p_i`; the
/// positive is `l_v^p_i`, the hard negative `l_v^n_i`, and the soft
/// negatives are `l_v^p_j` for every other clip whose reference similarity
/// to the anchor is at most `tau`.
pub fn oca_frg(lvp: &Array2<f64>, lvn: &Array2<f64>, lrp: &Array2<f64>, cfg: &OcaConfig) -> Result<OcaTerm> {
    cfg.validate()?;
    let (b, c) = rows_match(&[lvp, lvn, lrp])?;
    let (lvp, lvn, lrp) = (standard(lvp), standard(lvn), standard(lrp));
    let t = cfg.temperature;
    let mut d_vp = Array2::zeros((b, c));
    let mut d_vn = Array2::zeros((b, c));
    let mut d_rp = Array2::zeros((b, c));
    let mut loss = 0.0;
    let mut excluded_per_anchor = vec![0; b];
    let scale = 1.0 / b as f64;

    for i in 0..b {
        let anchor = row(&lrp, i);
        let pos = cosine(row(&lvp, i), anchor);
        let hard = cosine(row(&lvn, i), anchor);
        let mut soft = Vec::new();
        for j in (0..b).filter(|&j| j != i) {
            if cosine(row(&lrp, j), anchor).value <= cfg.tau {
                soft.push((j, cosine(row(&lvp, j), anchor)));
            } else {
                excluded_per_anchor[i] += 1;
            }
        }
        // Log-sum-exp over every logit, shifted by the largest.
        let logits: Vec<f64> = [pos.value, hard.value]
            .into_iter()
            .chain(soft.iter().map(|(_, cs)| cs.value))
            .map(|v| v / t)
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let lse = mx + z.ln();
        loss += (lse - logits[0]) * scale;

        let w = |l: f64| (l - lse).exp() * scale / t;
        let g_pos = w(logits[0]) - scale / t;
        cosine_backward(row(&lvp, i), anchor, pos, g_pos, Some(row_mut(&mut d_vp, i)), Some(row_mut(&mut d_rp, i)));
        cosine_backward(row(&lvn, i), anchor, hard, w(logits[1]), Some(row_mut(&mut d_vn, i)), Some(row_mut(&mut d_rp, i)));
        for (&(j, cs), &l) in soft.iter().zip(&logits[2..]) {
            cosine_backward(row(&lvp, j), anchor, cs, w(l), Some(row_mut(&mut d_vp, j)), Some(row_mut(&mut d_rp, i)));
        }
    }
    Ok(OcaTerm {
        loss,
        false_negatives: excluded_per_anchor.iter().sum(),
        excluded_per_anchor,
        d_first: d_vp,
        d_second: d_vn,
        d_reference: d_rp,
    })
}

/// Background alignment: `l_v^n_i` against the background reference, with
/// `l_v^p_i` as the only negative. `d_first` is w.r.t. `lvn`.
pub fn oca_bkg(lvn: &Array2<f64>, lvp: &Array2<f64>, bg: &Array2<f64>, cfg: &OcaConfig) -> Result<OcaTerm> {
    cfg.validate()?;
    let (b, c) = rows_match(&[lvn, lvp, bg])?;
    let (lvn, lvp, bg) = (standard(lvn), standard(lvp), standard(bg));
    let t = cfg.temperature;
    let mut d_vn = Array2::zeros((b, c));
    let mut d_vp = Array2::zeros((b, c));
    let mut d_bg = Array2::zeros((b, c));
    let mut loss = 0.0;
    let scale = 1.0 / b as f64;
    for i in 0..b {
        let anchor = row(&bg, i);
        let pos = cosine(row(&lvn, i), anchor);
        let neg = cosine(row(&lvp, i), anchor);
        let (lp, ln) = (pos.value / t, neg.value / t);
        let mx = lp.max(ln);
        let lse = mx + ((lp - mx).exp() + (ln - mx).exp()).ln();
        loss += (lse - lp) * scale;
        let g_pos = ((lp - lse).exp() - 1.0) * scale / t;
        let g_neg = (ln - lse).exp() * scale / t;
        cosine_backward(row(&lvn, i), anchor, pos, g_pos, Some(row_mut(&mut d_vn, i)), Some(row_mut(&mut d_bg, i)));
        cosine_backward(row(&lvp, i), anchor, neg, g_neg, Some(row_mut(&mut d_vp, i)), Some(row_mut(&mut d_bg, i)));
    }
    Ok(OcaTerm {
        loss,
        false_negatives: 0,
        excluded_per_anchor: vec![0; b],
        d_first: d_vn,
        d_second: d_vp,
        d_reference: d_bg,
    })
}

pub fn oca(frg: f64, bkg: f64) -> f64 {
    (frg + bkg) / 2.0
}

pub fn total(l_oca: f64, l_ori: f64, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * l_oca + lambda2 * l_ori
}

/// Audio-to-visual InfoNCE over the batch: visual row `i` should match
/// audio `i` against every other clip's audio. Returns (loss, d_visual,
/// d_audio).
pub fn contrastive_baseline(
    visual: &Array2<f64>,
    audio: &Array2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    ensure(temperature > 0.0, || "temperature must be positive".into())?;
    let (b, c) = rows_match(&[visual, audio])?;
    let (visual, audio) = (standard(visual), standard(audio));
    let mut dv = Array2::zeros((b, c));
    let mut da = Array2::zeros((b, c));
    let mut loss = 0.0;
    let scale = 1.0 / b as f64;
    for i in 0..b {
        let sims: Vec<_> = (0..b).map(|j| cosine(row(&visual, i), row(&audio, j))).collect();
        let logits: Vec<f64> = sims.iter().map(|cs| cs.value / temperature).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        loss += (lse - logits[i]) * scale;
        for j in 0..b {
            let mut g = (logits[j] - lse).exp();
            if j == i {
                g -= 1.0;
            }
            let g = g * scale / temperature;
            let (vi, aj) = (row(&visual, i).to_vec(), row(&audio, j).to_vec());
            cosine_backward(&vi, &aj, sims[j], g, Some(row_mut(&mut dv, i)), Some(row_mut(&mut da, j)));
        }
    }
    Ok((loss, dv, da))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OriConfig {
    pub sinkhorn: SinkhornConfig,
    /// Weight of the intensity term in the ground cost.
    pub beta: f64,
}

impl Default for OriConfig {
    fn default() -> Self {
        Self {
            sinkhorn: SinkhornConfig::default(),
            beta: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OriOutput {
    pub value: f64,
    /// (K+1, K+1) per-pair values summed over the batch.
    pub pair_terms: Array2<f64>,
    pub d_fv: Option<Array4<f64>>,
    pub d_fg_refs: Option<Array3<f64>>,
    pub d_bg_refs: Option<Array2<f64>>,
}

/// Sum over the batch and over ordered pairs (n, m), n != m, of the
/// transport distance between the normalised n-th reference map and the
/// normalised complement of the m-th.
pub fn ori(fv: &VisualFeatureMap, refs: &ReferenceEmbeddings, cfg: &OriConfig, want_grads: bool) -> Result<OriOutput> {
    let sr = reference_maps(fv, refs)?;
    let flat = sr.flattened();
    let (b, k1, n) = flat.dim();
    let (_, w, h, _) = fv.data.dim();
    let coords = grid_coords(w, h);
    let spatial = spatial_cost(coords.view());

    let mut value = 0.0;
    let mut pair_terms = Array2::zeros((k1, k1));
    let mut d_flat = Array3::<f64>::zeros((b, k1, n));
    for bi in 0..b {
        for a_idx in 0..k1 {
            for c_idx in (0..k1).filter(|&m| m != a_idx) {
                let map_a = flat.slice(s![bi, a_idx, ..]);
                let map_b: Array1<f64> = flat.slice(s![bi, c_idx, ..]).mapv(|v| 1.0 - v);
                let ctx = |e: Error| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("batch {bi}, pair ({a_idx}, {c_idx}): {msg}")),
                    other => other,
                };
                let p = normalize_to_simplex(map_a, &coords).map_err(ctx)?;
                let q = normalize_to_simplex(map_b.view(), &coords).map_err(ctx)?;
                let cost = cost_with_spatial(&spatial, map_a, map_b.view(), cfg.beta);
                let res = sinkhorn_raw(p.mass.view(), q.mass.view(), cost.data.view(), &cfg.sinkhorn).map_err(ctx)?;
                if !res.converged {
                    log::debug!(
                        "sinkhorn stopped at marginal error {:.2e} (batch {bi}, pair ({a_idx}, {c_idx}))",
                        res.plan.marginal_err
                    );
                }
                value += res.distance;
                pair_terms[[a_idx, c_idx]] += res.distance;
                if want_grads {
                    let g = res.grads(p.mass.view(), q.mass.view());
                    let (mut da, db_cost) = build_cost_backward(map_a, map_b.view(), cfg.beta, g.cost.view());
                    da += &normalize_backward(map_a, g.p.view());
                    let db = db_cost + normalize_backward(map_b.view(), g.q.view());
                    let mut slot = d_flat.slice_mut(s![bi, a_idx, ..]);
                    slot += &da;
                    let mut slot = d_flat.slice_mut(s![bi, c_idx, ..]);
                    slot -= &db;
                }
            }
        }
    }
    let (d_fv, d_fg_refs, d_bg_refs) = if want_grads {
        let d_maps = d_flat.into_shape_with_order((b, k1, w, h)).expect("contiguous");
        let (dfv, dfg, dbg) = reference_maps_backward(fv, refs, &d_maps);
        (Some(dfv), Some(dfg), Some(dbg))
    } else {
        (None, None, None)
    };
    Ok(OriOutput {
        value,
        pair_terms,
        d_fv,
        d_fg_refs,
        d_bg_refs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Oca,
    /// Plain audio-visual contrastive loss in place of the OCA terms.
    Contrastive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub alignment: Alignment,
    pub oca: OcaConfig,
    pub masks: MaskParams,
    pub ori: OriConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub contrastive_temperature: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alignment: Alignment::Oca,
            oca: OcaConfig::default(),
            masks: MaskParams::default(),
            ori: OriConfig::default(),
            lambda1: 1.0,
            lambda2: 0.1,
            contrastive_temperature: 0.07,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.oca.validate()?;
        self.masks.validate()?;
        self.ori.sinkhorn.validate()?;
        ensure(self.lambda1 >= 0.0 && self.lambda2 >= 0.0, || "loss weights must be non-negative".into())?;
        ensure(self.contrastive_temperature > 0.0, || "contrastive temperature must be positive".into())
    }
}

#[derive(Clone, Debug)]
pub struct ObjectiveGrads {
    pub d_fv: Array4<f64>,
    pub d_la: Array2<f64>,
    pub d_fg_refs: Option<Array3<f64>>,
    pub d_bg_refs: Option<Array2<f64>>,
}

/// Full forward and backward pass of `lambda1 * L_oca + lambda2 * L_ori`
/// from encoder outputs.
pub fn objective(
    fv: &VisualFeatureMap,
    la: &AudioEmbedding,
    refs: &ReferenceEmbeddings,
    cfg: &ObjectiveConfig,
    want_ref_grads: bool,
) -> Result<(LossReport, ObjectiveGrads)> {
    cfg.validate()?;
    let (b, _, _, c) = fv.data.dim();
    if refs.batch() != b {
        return Err(Error::Dimension(format!("{} reference rows for batch {b}", refs.batch())));
    }
    let sa = cosine_map(fv, la)?;
    let pair = masks(&sa.data, cfg.masks)?;
    let pooled = pool(fv, &pair)?;

    let mut d_vp = Array2::zeros((b, c));
    let mut d_vn = Array2::zeros((b, c));
    let mut d_la_direct = Array2::zeros((b, c));
    let mut d_fg_refs = want_ref_grads.then(|| Array3::zeros(refs.foreground.dim()));
    let mut d_bg_refs = want_ref_grads.then(|| Array2::zeros((b, c)));
    let (mut l_frg, mut l_bkg, mut l_contrastive, mut fn_count) = (0.0, 0.0, 0.0, 0);

    match cfg.alignment {
        Alignment::Oca => {
            let lrp = pooled_reference(refs);
            let frg = oca_frg(&pooled.foreground, &pooled.background, &lrp, &cfg.oca)?;
            let bkg = oca_bkg(&pooled.background, &pooled.foreground, &refs.background, &cfg.oca)?;
            l_frg = frg.loss;
            l_bkg = bkg.loss;
            fn_count = frg.false_negatives;
            let k = cfg.lambda1 / 2.0;
            d_vp.scaled_add(k, &frg.d_first);
            d_vp.scaled_add(k, &bkg.d_second);
            d_vn.scaled_add(k, &frg.d_second);
            d_vn.scaled_add(k, &bkg.d_first);
            if let (Some(dfg), Some(dbg)) = (d_fg_refs.as_mut(), d_bg_refs.as_mut()) {
                dfg.scaled_add(k, &pooled_reference_backward(refs, &frg.d_reference));
                dbg.scaled_add(k, &bkg.d_reference);
            }
        }
        Alignment::Contrastive => {
            let (loss, dv, da) = contrastive_baseline(&pooled.foreground, &la.data, cfg.contrastive_temperature)?;
            l_contrastive = loss;
            d_vp.scaled_add(cfg.lambda1, &dv);
            d_la_direct.scaled_add(cfg.lambda1, &da);
        }
    }

    let (mut d_fv, dmp, dmn) = pool_backward(fv, &pair, &d_vp, &d_vn);
    let dsa = masks_backward(&pair, &dmp, &dmn);
    let (dfv_sa, mut d_la) = cosine_map_backward(fv, la, &dsa);
    d_fv += &dfv_sa;
    d_la += &d_la_direct;

    let need_ori_grads = cfg.lambda2 != 0.0;
    let ori_out = ori(fv, refs, &cfg.ori, need_ori_grads)?;
    if need_ori_grads {
        d_fv.scaled_add(cfg.lambda2, ori_out.d_fv.as_ref().expect("requested"));
        if let (Some(dfg), Some(dbg)) = (d_fg_refs.as_mut(), d_bg_refs.as_mut()) {
            dfg.scaled_add(cfg.lambda2, ori_out.d_fg_refs.as_ref().expect("requested"));
            dbg.scaled_add(cfg.lambda2, ori_out.d_bg_refs.as_ref().expect("requested"));
        }
    }

    let l_oca = oca(l_frg, l_bkg);
    let l_ori = ori_out.value;
    let pairwise = ori_out.pair_terms / b as f64;
    let report = LossReport {
        l_frg,
        l_bkg,
        l_oca,
        l_ori,
        l_contrastive,
        l_total: total(l_oca + l_contrastive, l_ori, cfg.lambda1, cfg.lambda2),
        false_negative_count: fn_count,
        pairwise_ot_terms: pairwise.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    Ok((
        report,
        ObjectiveGrads {
            d_fv,
            d_la,
            d_fg_refs,
            d_bg_refs,
        },
    ))
}
