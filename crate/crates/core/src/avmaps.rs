//! Similarity-map localisation: sound-associated maps, soft foreground and
//! background masks, masked pooling, reference-associated maps and
//! iterative multi-source identification.
//!
//! Grids are indexed `[b, i, j]` with `i` along image x and `j` along y.
//! Flattened maps are row-major in that order: cell `(i, j)` sits at
//! `i * h + j`.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::encoders::{AudioEmbedding, ReferenceEmbeddings, VisualFeatureMap};
use crate::error::{ensure, Error, Result};
use crate::sim::{cosine, cosine_backward};

#[derive(Clone, Debug, PartialEq)]
pub struct SoundAssociatedMap {
    /// (B, w, h) cosine similarities.
    pub data: Array3<f64>,
    /// Cells whose feature or audio vector fell below the norm floor and
    /// were assigned similarity 0.
    pub degenerate_cells: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub alpha_p: f64,
    pub alpha_n: f64,
    pub omega: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            alpha_p: 0.65,
            alpha_n: 0.4,
            omega: 0.03,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.omega > 0.0 && self.omega.is_finite(), || {
            format!("omega must be positive, got {}", self.omega)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub foreground: Array3<f64>,
    pub background: Array3<f64>,
    pub params: MaskParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeatures {
    pub foreground: Array2<f64>,
    pub background: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceAssociatedMaps {
    /// (B, K+1, w, h); the last slice is the background reference.
    pub data: Array4<f64>,
    pub degenerate_cells: usize,
}

impl ReferenceAssociatedMaps {
    /// (B, K+1, w*h) row-major view of `data`.
    pub fn flattened(&self) -> Array3<f64> {
        let (b, k, w, h) = self.data.dim();
        self.data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, k, w * h))
            .expect("standard layout")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationResult {
    /// (K, w, h) foreground masks computed after suppressing earlier regions.
    pub per_source_maps: Array3<f64>,
    /// (K, w, h) `per_source_maps >= threshold`, except for the degenerate
    /// single-cell fallback.
    pub binarized_masks: Array3<bool>,
    /// (K, w, h) foreground masks of each query without suppression.
    pub unsuppressed_maps: Array3<f64>,
    /// (K, w, h) raw cosine scores with earlier regions forced to -1.
    pub score_maps: Array3<f64>,
    pub threshold: f64,
    /// Iterations that fell back to the single argmax cell.
    pub fallback_iterations: Vec<usize>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_pair(fv: &VisualFeatureMap, la: &AudioEmbedding) -> Result<()> {
    if fv.batch() != la.batch() || fv.channels() != la.channels() {
        return Err(Error::Dimension(format!(
            "visual (B={}, c={}) vs audio (B={}, c={})",
            fv.batch(),
            fv.channels(),
            la.batch(),
            la.channels()
        )));
    }
    Ok(())
}

/// Cosine similarity of every visual cell with the clip's audio embedding.
pub fn cosine_map(fv: &VisualFeatureMap, la: &AudioEmbedding) -> Result<SoundAssociatedMap> {
    check_pair(fv, la)?;
    let (b, w, h, c) = fv.data.dim();
    let feats = fv.data.as_slice().expect("standard layout");
    let mut data = Array3::zeros((b, w, h));
    let mut degenerate_cells = 0;
    for bi in 0..b {
        let a = la.data.row(bi);
        let a = a.as_slice().expect("contiguous row");
        for cell in 0..w * h {
            let off = (bi * w * h + cell) * c;
            let cs = cosine(&feats[off..off + c], a);
            degenerate_cells += cs.degenerate as usize;
            data[[bi, cell / h, cell % h]] = cs.value;
        }
    }
    if degenerate_cells > 0 {
        log::warn!("{degenerate_cells} zero-norm cells in sound-associated map; similarity set to 0");
    }
    Ok(SoundAssociatedMap {
        data,
        degenerate_cells,
    })
}

/// Returns (dF_v, dl_a) given dL/dS_a.
pub fn cosine_map_backward(
    fv: &VisualFeatureMap,
    la: &AudioEmbedding,
    dmap: &Array3<f64>,
) -> (Array4<f64>, Array2<f64>) {
    let (b, w, h, c) = fv.data.dim();
    let feats = fv.data.as_slice().expect("standard layout");
    let mut dfv = Array4::<f64>::zeros((b, w, h, c));
    let mut dla = Array2::<f64>::zeros((b, c));
    {
        let dfs = dfv.as_slice_mut().expect("fresh");
        for bi in 0..b {
            let a = la.data.row(bi);
            let a = a.as_slice().expect("contiguous row");
            let mut da = vec![0.0; c];
            for cell in 0..w * h {
                let g = dmap[[bi, cell / h, cell % h]];
                if g == 0.0 {
                    continue;
                }
                let off = (bi * w * h + cell) * c;
                let x = &feats[off..off + c];
                let cs = cosine(x, a);
                cosine_backward(x, a, cs, g, Some(&mut dfs[off..off + c]), Some(&mut da));
            }
            dla.row_mut(bi).assign(&Array1::from_vec(da));
        }
    }
    (dfv, dla)
}

/// M^p = sigmoid((S - alpha_p) / omega), M^n = 1 - sigmoid((S - alpha_n) / omega).
pub fn masks(sa: &Array3<f64>, params: MaskParams) -> Result<MaskPair> {
    params.validate()?;
    let MaskParams {
        alpha_p,
        alpha_n,
        omega,
    } = params;
    Ok(MaskPair {
        foreground: sa.mapv(|v| sigmoid((v - alpha_p) / omega)),
        background: sa.mapv(|v| 1.0 - sigmoid((v - alpha_n) / omega)),
        params,
    })
}

/// dL/dS_a from gradients on both masks.
pub fn masks_backward(pair: &MaskPair, dfg: &Array3<f64>, dbg: &Array3<f64>) -> Array3<f64> {
    let inv = 1.0 / pair.params.omega;
    let mut out = Array3::zeros(pair.foreground.dim());
    ndarray::Zip::from(&mut out)
        .and(&pair.foreground)
        .and(&pair.background)
        .and(dfg)
        .and(dbg)
        .for_each(|o, &mp, &mn, &gp, &gn| {
            *o = gp * mp * (1.0 - mp) * inv - gn * mn * (1.0 - mn) * inv;
        });
    out
}

/// Mask-weighted global average pooling over all w*h cells.
pub fn pool(fv: &VisualFeatureMap, pair: &MaskPair) -> Result<PooledFeatures> {
    let (b, w, h, c) = fv.data.dim();
    if pair.foreground.dim() != (b, w, h) || pair.background.dim() != (b, w, h) {
        return Err(Error::Dimension(format!(
            "mask {:?} does not match feature grid ({b}, {w}, {h})",
            pair.foreground.dim()
        )));
    }
    let weighted = |mask: &Array3<f64>| {
        let mut out = Array2::zeros((b, c));
        for bi in 0..b {
            let mut row = out.row_mut(bi);
            for i in 0..w {
                for j in 0..h {
                    let m = mask[[bi, i, j]];
                    row.scaled_add(m, &fv.data.slice(s![bi, i, j, ..]));
                }
            }
            row /= (w * h) as f64;
        }
        out
    };
    Ok(PooledFeatures {
        foreground: weighted(&pair.foreground),
        background: weighted(&pair.background),
    })
}

/// Returns (dF_v, dM^p, dM^n).
pub fn pool_backward(
    fv: &VisualFeatureMap,
    pair: &MaskPair,
    dfg: &Array2<f64>,
    dbg: &Array2<f64>,
) -> (Array4<f64>, Array3<f64>, Array3<f64>) {
    let (b, w, h, c) = fv.data.dim();
    let inv = 1.0 / (w * h) as f64;
    let mut dfv = Array4::zeros((b, w, h, c));
    let mut dmp = Array3::zeros((b, w, h));
    let mut dmn = Array3::zeros((b, w, h));
    for bi in 0..b {
        let gp = dfg.row(bi);
        let gn = dbg.row(bi);
        for i in 0..w {
            for j in 0..h {
                let f = fv.data.slice(s![bi, i, j, ..]);
                dmp[[bi, i, j]] = f.dot(&gp) * inv;
                dmn[[bi, i, j]] = f.dot(&gn) * inv;
                let mut d = dfv.slice_mut(s![bi, i, j, ..]);
                d.scaled_add(pair.foreground[[bi, i, j]] * inv, &gp);
                d.scaled_add(pair.background[[bi, i, j]] * inv, &gn);
            }
        }
    }
    (dfv, dmp, dmn)
}

fn reference_row<'a>(refs: &'a ReferenceEmbeddings, b: usize, k: usize) -> ArrayView1<'a, f64> {
    if k < refs.sources() {
        refs.foreground.slice(s![b, k, ..])
    } else {
        refs.background.row(b)
    }
}

/// Cosine map of each foreground reference, then the background reference.
pub fn reference_maps(fv: &VisualFeatureMap, refs: &ReferenceEmbeddings) -> Result<ReferenceAssociatedMaps> {
    if refs.sources() == 0 {
        return Err(Error::Validation("need at least one foreground reference".into()));
    }
    if refs.batch() != fv.batch() || refs.channels() != fv.channels() {
        return Err(Error::Dimension(format!(
            "references (B={}, c={}) vs visual (B={}, c={})",
            refs.batch(),
            refs.channels(),
            fv.batch(),
            fv.channels()
        )));
    }
    let (b, w, h, c) = fv.data.dim();
    let k1 = refs.sources() + 1;
    let feats = fv.data.as_slice().expect("standard layout");
    let mut data = Array4::zeros((b, k1, w, h));
    let mut degenerate_cells = 0;
    for bi in 0..b {
        for k in 0..k1 {
            let r = reference_row(refs, bi, k).to_owned();
            let r = r.as_slice().expect("owned");
            for cell in 0..w * h {
                let off = (bi * w * h + cell) * c;
                let cs = cosine(&feats[off..off + c], r);
                degenerate_cells += cs.degenerate as usize;
                data[[bi, k, cell / h, cell % h]] = cs.value;
            }
        }
    }
    Ok(ReferenceAssociatedMaps {
        data,
        degenerate_cells,
    })
}

/// Returns (dF_v, d foreground refs, d background refs) given dL/dS_r.
pub fn reference_maps_backward(
    fv: &VisualFeatureMap,
    refs: &ReferenceEmbeddings,
    dmaps: &Array4<f64>,
) -> (Array4<f64>, Array3<f64>, Array2<f64>) {
    let (b, w, h, c) = fv.data.dim();
    let kf = refs.sources();
    let feats = fv.data.as_slice().expect("standard layout");
    let mut dfv = Array4::<f64>::zeros((b, w, h, c));
    let mut dfg = Array3::<f64>::zeros((b, kf, c));
    let mut dbg = Array2::<f64>::zeros((b, c));
    let dfs = dfv.as_slice_mut().expect("fresh");
    for bi in 0..b {
        for k in 0..=kf {
            let r = reference_row(refs, bi, k).to_owned();
            let r = r.as_slice().expect("owned");
            let mut dr = vec![0.0; c];
            for cell in 0..w * h {
                let g = dmaps[[bi, k, cell / h, cell % h]];
                if g == 0.0 {
                    continue;
                }
                let off = (bi * w * h + cell) * c;
                let x = &feats[off..off + c];
                let cs = cosine(x, r);
                cosine_backward(x, r, cs, g, Some(&mut dfs[off..off + c]), Some(&mut dr));
            }
            let dr = Array1::from_vec(dr);
            if k < kf {
                dfg.slice_mut(s![bi, k, ..]).assign(&dr);
            } else {
                dbg.row_mut(bi).assign(&dr);
            }
        }
    }
    (dfv, dfg, dbg)
}

/// Which audio embedding drives each identification iteration.
#[derive(Clone, Debug)]
pub enum AudioQuery {
    /// One embedding of the mixture, reused for every iteration.
    Mixed(Array1<f64>),
    /// One embedding per separated source; iteration k uses entry k.
    Components(Vec<Array1<f64>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifyParams {
    pub masks: MaskParams,
    /// Binarisation threshold on the sigmoid foreground mask.
    pub threshold: f64,
}

impl Default for IdentifyParams {
    fn default() -> Self {
        Self {
            masks: MaskParams::default(),
            threshold: 0.5,
        }
    }
}

/// Localises `k` sources one at a time on a single (w, h, c) feature grid.
///
/// Iteration `t` scores every cell against its query, forces cells already
/// claimed by earlier iterations to similarity -1, maps through the
/// foreground sigmoid and binarises. If nothing clears the threshold the
/// single highest-scoring cell becomes the region.
pub fn iterative_identify(
    fv: ArrayView3<f64>,
    query: &AudioQuery,
    k: usize,
    params: IdentifyParams,
) -> Result<LocalizationResult> {
    ensure(k >= 1, || "need at least one source".into())?;
    params.masks.validate()?;
    let (w, h, c) = fv.dim();
    let audio_for = |t: usize| -> Result<&Array1<f64>> {
        match query {
            AudioQuery::Mixed(a) => Ok(a),
            AudioQuery::Components(v) => v.get(t).ok_or_else(|| {
                Error::Dimension(format!("{} audio components for {k} sources", v.len()))
            }),
        }
    };
    let fv = fv.as_standard_layout();
    let feats = fv.as_slice().expect("standard layout");
    let MaskParams { alpha_p, omega, .. } = params.masks;

    let mut per_source = Array3::zeros((k, w, h));
    let mut unsuppressed = Array3::zeros((k, w, h));
    let mut score_maps = Array3::zeros((k, w, h));
    let mut binarized = Array3::from_elem((k, w, h), false);
    let mut claimed = Array2::from_elem((w, h), false);
    let mut fallback_iterations = Vec::new();

    for t in 0..k {
        let a = audio_for(t)?;
        if a.len() != c {
            return Err(Error::Dimension(format!(
                "audio query has {} channels, features have {c}",
                a.len()
            )));
        }
        let a = a.as_slice().expect("contiguous");
        let mut scores = Array2::zeros((w, h));
        for cell in 0..w * h {
            let (i, j) = (cell / h, cell % h);
            let raw = cosine(&feats[cell * c..(cell + 1) * c], a).value;
            unsuppressed[[t, i, j]] = sigmoid((raw - alpha_p) / omega);
            scores[[i, j]] = if claimed[[i, j]] { -1.0 } else { raw };
        }
        score_maps.index_axis_mut(Axis(0), t).assign(&scores);
        let mut any = false;
        for ((i, j), &sc) in scores.indexed_iter() {
            let m = sigmoid((sc - alpha_p) / omega);
            per_source[[t, i, j]] = m;
            if m >= params.threshold {
                binarized[[t, i, j]] = true;
                any = true;
            }
        }
        if !any {
            let (mut best, mut best_val) = ((0, 0), f64::NEG_INFINITY);
            for ((i, j), &sc) in scores.indexed_iter() {
                if sc > best_val {
                    best_val = sc;
                    best = (i, j);
                }
            }
            binarized[[t, best.0, best.1]] = true;
            fallback_iterations.push(t);
        }
        let bin_t = binarized.index_axis(Axis(0), t).to_owned();
        ndarray::Zip::from(&mut claimed)
            .and(&bin_t)
            .for_each(|c, &b| *c |= b);
    }
    Ok(LocalizationResult {
        per_source_maps: per_source,
        binarized_masks: binarized,
        unsuppressed_maps: unsuppressed,
        score_maps,
        threshold: params.threshold,
        fallback_iterations,
    })
}

/// Bilinear resize of a (w, h) grid to an (out_h, out_w) image, sampling at
/// pixel centres.
pub fn upsample_bilinear(grid: &Array2<f64>, out_w: usize, out_h: usize) -> Array2<f64> {
    crate::dataio::resize_plane(grid.t(), out_h, out_w)
}
