use avsl_core::avmaps::{cosine_map, cosine_map_backward, masks, masks_backward, pool, pool_backward, MaskParams};
use avsl_core::encoders::{AudioEmbedding, ReferenceEmbeddings, VisualFeatureMap};
use avsl_core::losses::{objective, Alignment, ObjectiveConfig, OriConfig};
use avsl_core::ot::SinkhornConfig;
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn fd<F: Fn(&[f64]) -> f64>(x: &[f64], f: F) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + H;
            let up = f(&v);
            v[i] = x[i] - H;
            let dn = f(&v);
            v[i] = x[i];
            (up - dn) / (2.0 * H)
        })
        .collect()
}

struct Instance {
    fv: Array4<f64>,
    la: Array2<f64>,
    fg: Array3<f64>,
    bg: Array2<f64>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = || rng.gen_range(-1.0..1.0);
    Instance {
        fv: Array4::from_shape_simple_fn((2, 4, 4, 8), &mut u),
        la: Array2::from_shape_simple_fn((2, 8), &mut u),
        fg: Array3::from_shape_simple_fn((2, 2, 8), &mut u),
        bg: Array2::from_shape_simple_fn((2, 8), &mut u),
    }
}

fn tight_cfg() -> ObjectiveConfig {
    ObjectiveConfig {
        // Softer masks keep the finite-difference step away from saturation.
        masks: MaskParams {
            alpha_p: 0.1,
            alpha_n: -0.1,
            omega: 0.3,
        },
        ori: OriConfig {
            sinkhorn: SinkhornConfig {
                epsilon: 0.05,
                max_iter: 100_000,
                tol: 1e-13,
                log_domain: true,
            },
            beta: 1.0,
        },
        lambda2: 0.1,
        ..Default::default()
    }
}

fn loss(inst: &Instance, cfg: &ObjectiveConfig) -> f64 {
    let fv = VisualFeatureMap::new(inst.fv.clone()).unwrap();
    let la = AudioEmbedding::new(inst.la.clone()).unwrap();
    let refs = ReferenceEmbeddings::new(inst.fg.clone(), inst.bg.clone()).unwrap();
    objective(&fv, &la, &refs, cfg, false).unwrap().0.l_total
}

fn check_objective(seed: u64, cfg: &ObjectiveConfig) {
    let inst = instance(seed);
    let fv = VisualFeatureMap::new(inst.fv.clone()).unwrap();
    let la = AudioEmbedding::new(inst.la.clone()).unwrap();
    let refs = ReferenceEmbeddings::new(inst.fg.clone(), inst.bg.clone()).unwrap();
    let (_, g) = objective(&fv, &la, &refs, cfg, true).unwrap();

    let x = inst.fv.as_slice().unwrap().to_vec();
    let num = fd(&x, |v| {
        let mut i2 = instance(seed);
        i2.fv.as_slice_mut().unwrap().copy_from_slice(v);
        loss(&i2, cfg)
    });
    let e = rel_err(g.d_fv.as_slice().unwrap(), &num);
    assert!(e <= 1e-3, "seed {seed}: d_fv rel err {e}");

    let x = inst.la.as_slice().unwrap().to_vec();
    let num = fd(&x, |v| {
        let mut i2 = instance(seed);
        i2.la.as_slice_mut().unwrap().copy_from_slice(v);
        loss(&i2, cfg)
    });
    let e = rel_err(g.d_la.as_slice().unwrap(), &num);
    assert!(e <= 1e-3, "seed {seed}: d_la rel err {e}");

    let x = inst.fg.as_slice().unwrap().to_vec();
    let num = fd(&x, |v| {
        let mut i2 = instance(seed);
        i2.fg.as_slice_mut().unwrap().copy_from_slice(v);
        loss(&i2, cfg)
    });
    let e = rel_err(g.d_fg_refs.as_ref().unwrap().as_slice().unwrap(), &num);
    assert!(e <= 1e-3, "seed {seed}: d_fg rel err {e}");

    let x = inst.bg.as_slice().unwrap().to_vec();
    let num = fd(&x, |v| {
        let mut i2 = instance(seed);
        i2.bg.as_slice_mut().unwrap().copy_from_slice(v);
        loss(&i2, cfg)
    });
    let e = rel_err(g.d_bg_refs.as_ref().unwrap().as_slice().unwrap(), &num);
    assert!(e <= 1e-3, "seed {seed}: d_bg rel err {e}");
}

#[test]
fn total_objective_gradients() {
    let cfg = tight_cfg();
    for seed in 0..3 {
        check_objective(seed, &cfg);
    }
}

#[test]
fn contrastive_ablation_gradients() {
    let cfg = ObjectiveConfig {
        alignment: Alignment::Contrastive,
        ..tight_cfg()
    };
    check_objective(100, &cfg);
}

#[test]
fn map_and_mask_gradients() {
    let inst = instance(7);
    let params = MaskParams {
        alpha_p: 0.2,
        alpha_n: -0.2,
        omega: 0.25,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let probe_p = Array3::from_shape_simple_fn((2, 4, 4), || rng.gen_range(-1.0..1.0));
    let probe_n = Array3::from_shape_simple_fn((2, 4, 4), || rng.gen_range(-1.0..1.0));
    let probe_vp = Array2::from_shape_simple_fn((2, 8), || rng.gen_range(-1.0..1.0));
    let probe_vn = Array2::from_shape_simple_fn((2, 8), || rng.gen_range(-1.0..1.0));

    // Scalar: probes dotted with masks plus probes dotted with pooled features.
    let value = |fv: &Array4<f64>, la: &Array2<f64>| {
        let fv = VisualFeatureMap::new(fv.clone()).unwrap();
        let la = AudioEmbedding::new(la.clone()).unwrap();
        let sa = cosine_map(&fv, &la).unwrap();
        let m = masks(&sa.data, params).unwrap();
        let p = pool(&fv, &m).unwrap();
        (&m.foreground * &probe_p).sum() + (&m.background * &probe_n).sum() + (&p.foreground * &probe_vp).sum() + (&p.background * &probe_vn).sum()
    };

    let fv = VisualFeatureMap::new(inst.fv.clone()).unwrap();
    let la = AudioEmbedding::new(inst.la.clone()).unwrap();
    let sa = cosine_map(&fv, &la).unwrap();
    let m = masks(&sa.data, params).unwrap();
    let (dfv_pool, dmp, dmn) = pool_backward(&fv, &m, &probe_vp, &probe_vn);
    let dsa = masks_backward(&m, &(&dmp + &probe_p), &(&dmn + &probe_n));
    let (dfv_map, dla) = cosine_map_backward(&fv, &la, &dsa);
    let dfv = dfv_pool + dfv_map;

    let num = fd(inst.fv.as_slice().unwrap(), |v| {
        value(&Array4::from_shape_vec((2, 4, 4, 8), v.to_vec()).unwrap(), &inst.la)
    });
    assert!(rel_err(dfv.as_slice().unwrap(), &num) <= 1e-4);
    let num = fd(inst.la.as_slice().unwrap(), |v| {
        value(&inst.fv, &Array2::from_shape_vec((2, 8), v.to_vec()).unwrap())
    });
    assert!(rel_err(dla.as_slice().unwrap(), &num) <= 1e-4);
}
