//! Fast oracle checks that can run from the command line.

use ndarray::{arr2, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::avmaps::{masks, MaskParams};
use crate::dataio::GtBox;
use crate::evalkit::{auc, ciou, success_rate, HeatmapPrediction, AUC_STEPS};
use crate::losses::{oca_frg, OcaConfig};
use crate::ot::{exact_emd_raw, sinkhorn_raw, SinkhornConfig};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

fn oca_oracles() -> CheckResult {
    let u = arr2(&[[1.0, 0.0]]);
    let aligned = oca_frg(&u, &(-&u), &u, &OcaConfig::default()).map(|t| t.loss);
    let tied = oca_frg(&u, &u, &u, &OcaConfig::default()).map(|t| t.loss);
    match (aligned, tied) {
        (Ok(a), Ok(t)) => check(
            "oca scalar oracles",
            (a - 0.126928).abs() <= 1e-6 && (t - std::f64::consts::LN_2).abs() <= 1e-6,
            format!("aligned {a:.6}, tied {t:.6}"),
        ),
        (a, t) => check("oca scalar oracles", false, format!("{a:?} {t:?}")),
    }
}

fn mask_midpoints() -> CheckResult {
    let p = MaskParams::default();
    let sa = Array3::from_shape_vec((1, 1, 2), vec![p.alpha_p, p.alpha_n]).expect("shape");
    match masks(&sa, p) {
        Ok(m) => {
            let (fg, bg) = (m.foreground[[0, 0, 0]], m.background[[0, 0, 1]]);
            check("mask midpoints", fg == 0.5 && bg == 0.5, format!("M^p(alpha_p) = {fg}, M^n(alpha_n) = {bg}"))
        }
        Err(e) => check("mask midpoints", false, e.to_string()),
    }
}

fn sinkhorn_vs_exact(instances: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = SinkhornConfig {
        epsilon: 0.01,
        max_iter: 200_000,
        tol: 1e-9,
        log_domain: true,
    };
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..instances {
        let n = rng.gen_range(2..=8);
        let simplex = |rng: &mut ChaCha8Rng| {
            let v = Array1::from_shape_simple_fn(n, || rng.gen_range(0.05..1.0));
            let s = v.sum();
            v / s
        };
        let a = simplex(&mut rng);
        let b = simplex(&mut rng);
        let c = Array2::from_shape_simple_fn((n, n), || rng.gen_range(0.0..1.0));
        let (s, e) = match (sinkhorn_raw(a.view(), b.view(), c.view(), &cfg), exact_emd_raw(a.view(), b.view(), c.view())) {
            (Ok(s), Ok(e)) => (s.distance, e),
            (s, e) => return check("sinkhorn vs exact transport", false, format!("{:?} {:?}", s.err(), e.err())),
        };
        worst = worst.max((s - e).abs() - (cfg.epsilon * (n as f64).ln() + 1e-3));
    }
    check(
        "sinkhorn vs exact transport",
        worst <= 0.0,
        format!("{instances} instances, worst slack {worst:.2e}"),
    )
}

fn metric_oracles() -> CheckResult {
    let target = GtBox {
        class: "a".into(),
        x0: 0.0,
        y0: 0.0,
        x1: 2.0,
        y1: 2.0,
    };
    let map = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| ((1..3).contains(&x) && y < 2) as u8 as f64);
    let iou = HeatmapPrediction::new(map, vec!["a".into()]).map(|p| ciou(&p, &[target], 0.5)[0]);
    let scores = [0.0, 0.12, 0.5, 0.77, 1.0];
    let identity = auc(&scores).ok().zip(
        (0..AUC_STEPS)
            .map(|k| success_rate(&scores, k as f64 / AUC_STEPS as f64))
            .sum::<crate::Result<f64>>()
            .ok(),
    );
    let iou_ok = matches!(iou, Ok(v) if (v - 1.0 / 3.0).abs() < 1e-12);
    let auc_ok = matches!(identity, Some((a, s)) if a == s / AUC_STEPS as f64);
    check("metric oracles", iou_ok && auc_ok, format!("shifted-box IoU {iou:?}, auc identity {auc_ok}"))
}

pub fn run_all() -> Vec<CheckResult> {
    vec![oca_oracles(), mask_midpoints(), sinkhorn_vs_exact(50), metric_oracles()]
}
