//! Entropy-regularised optimal transport between flattened similarity maps,
//! plus an exact min-cost-flow solver for small instances.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Floor added to every clamped intensity before normalising.
pub const MASS_FLOOR: f64 = 1e-6;
/// Largest instance accepted by [`exact_emd_oracle`].
pub const ORACLE_LIMIT: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    pub mass: Array1<f64>,
    /// (n, 2) grid coordinates of each bin.
    pub support_coords: Array2<f64>,
}

impl Distribution {
    pub fn new(mass: Array1<f64>, support_coords: Array2<f64>) -> Result<Self> {
        if support_coords.dim() != (mass.len(), 2) {
            return Err(Error::Dimension(format!(
                "{} masses but support of shape {:?}",
                mass.len(),
                support_coords.dim()
            )));
        }
        ensure(mass.iter().all(|&m| m >= 0.0 && m.is_finite()), || {
            "masses must be finite and non-negative".into()
        })?;
        let total = mass.sum();
        ensure((total - 1.0).abs() <= 1e-9, || format!("masses sum to {total}, not 1"))?;
        Ok(Self {
            mass,
            support_coords,
        })
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub data: Array2<f64>,
    pub beta_intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// L1 violation of the column marginal after the last row update.
    pub marginal_err: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iter: 100,
            tol: 1e-6,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.epsilon > 0.0 && self.epsilon.is_finite(), || {
            format!("epsilon must be positive, got {}", self.epsilon)
        })?;
        ensure(self.max_iter >= 1, || "max_iter must be at least 1".into())
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    /// Regularised optimum `<plan, C> + eps * KL(plan || P x Q)`.
    pub distance: f64,
    /// `<plan, C>` alone.
    pub transport_cost: f64,
    pub plan: TransportPlan,
    pub iterations: usize,
    pub converged: bool,
    /// Dual potentials with `plan_ij = exp((f_i + g_j - C_ij) / eps)`.
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    epsilon: f64,
}

/// Derivatives of [`SinkhornResult::distance`] at the returned solution.
#[derive(Clone, Debug)]
pub struct SinkhornGrads {
    pub cost: Array2<f64>,
    pub p: Array1<f64>,
    pub q: Array1<f64>,
}

impl SinkhornResult {
    /// Envelope gradients: the plan for the cost, and the dual potentials
    /// (relative to the product reference measure) for the marginals. They
    /// are exact for the regularised value once the iteration has converged;
    /// marginal gradients are defined up to a constant shift.
    pub fn grads(&self, p: ArrayView1<f64>, q: ArrayView1<f64>) -> SinkhornGrads {
        let eps = self.epsilon;
        let rel = |pot: &Array1<f64>, m: ArrayView1<f64>| {
            Array1::from_shape_fn(pot.len(), |i| {
                if m[i] > 0.0 {
                    pot[i] - eps * m[i].ln()
                } else {
                    0.0
                }
            })
        };
        SinkhornGrads {
            cost: self.plan.plan.clone(),
            p: rel(&self.f, p),
            q: rel(&self.g, q),
        }
    }
}

/// Coordinates `(i, j)` of a w x h grid in row-major flattening order.
pub fn grid_coords(w: usize, h: usize) -> Array2<f64> {
    Array2::from_shape_fn((w * h, 2), |(k, axis)| {
        if axis == 0 {
            (k / h) as f64
        } else {
            (k % h) as f64
        }
    })
}

fn bounding_diagonal(coords: ArrayView2<f64>) -> f64 {
    let span = |axis: usize| {
        let col = coords.column(axis);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    let d = span(0).hypot(span(1));
    if d > 0.0 {
        d
    } else {
        1.0
    }
}

/// Pairwise Euclidean distance between bins divided by the bounding-box
/// diagonal of the support.
pub fn spatial_cost(coords: ArrayView2<f64>) -> Array2<f64> {
    let n = coords.nrows();
    let diag = bounding_diagonal(coords);
    Array2::from_shape_fn((n, n), |(i, j)| {
        (coords[[i, 0]] - coords[[j, 0]]).hypot(coords[[i, 1]] - coords[[j, 1]]) / diag
    })
}

/// Clamp to [0, 1], add [`MASS_FLOOR`], rescale to unit mass.
pub fn normalize_to_simplex(map: ArrayView1<f64>, coords: &Array2<f64>) -> Result<Distribution> {
    ensure(!map.is_empty(), || "cannot normalise an empty map".into())?;
    ensure(map.iter().all(|v| v.is_finite()), || "map contains non-finite values".into())?;
    let clamped = map.mapv(|v| v.clamp(0.0, 1.0));
    let mass = if clamped.iter().all(|&v| v == 0.0) {
        Array1::from_elem(map.len(), 1.0 / map.len() as f64)
    } else {
        let w = clamped.mapv(|v| v + MASS_FLOOR);
        let s = w.sum();
        w / s
    };
    Distribution::new(mass, coords.clone())
}

/// Chain rule through [`normalize_to_simplex`]. Cells clamped away from
/// [0, 1] receive zero gradient, as does the all-zero degenerate case.
pub fn normalize_backward(map: ArrayView1<f64>, grad_mass: ArrayView1<f64>) -> Array1<f64> {
    let clamped = map.mapv(|v| v.clamp(0.0, 1.0));
    if clamped.iter().all(|&v| v == 0.0) {
        return Array1::zeros(map.len());
    }
    let w = clamped.mapv(|v| v + MASS_FLOOR);
    let s = w.sum();
    let mean = grad_mass.dot(&w) / s;
    Array1::from_shape_fn(map.len(), |k| {
        if (0.0..=1.0).contains(&map[k]) {
            (grad_mass[k] - mean) / s
        } else {
            0.0
        }
    })
}

/// `C[i,j] = |coords_i - coords_j| / diag + beta * |map_a[i] - map_b[j]|`.
pub fn build_cost(
    map_a: ArrayView1<f64>,
    map_b: ArrayView1<f64>,
    coords: ArrayView2<f64>,
    beta: f64,
) -> Result<CostMatrix> {
    let n = map_a.len();
    ensure(n > 0, || "cost matrix needs at least one bin".into())?;
    if map_b.len() != n || coords.dim() != (n, 2) {
        return Err(Error::Dimension(format!(
            "maps of length {n} and {} with coords {:?}",
            map_b.len(),
            coords.dim()
        )));
    }
    Ok(cost_with_spatial(&spatial_cost(coords), map_a, map_b, beta))
}

pub(crate) fn cost_with_spatial(
    spatial: &Array2<f64>,
    map_a: ArrayView1<f64>,
    map_b: ArrayView1<f64>,
    beta: f64,
) -> CostMatrix {
    let mut data = spatial.clone();
    for ((i, j), c) in data.indexed_iter_mut() {
        *c += beta * (map_a[i] - map_b[j]).abs();
    }
    CostMatrix {
        data,
        beta_intensity: beta,
    }
}

/// Returns (d map_a, d map_b) given dL/dC.
pub fn build_cost_backward(
    map_a: ArrayView1<f64>,
    map_b: ArrayView1<f64>,
    beta: f64,
    dcost: ArrayView2<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let n = map_a.len();
    let mut da = Array1::zeros(n);
    let mut db = Array1::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let diff = map_a[i] - map_b[j];
            let s = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            let g = beta * s * dcost[[i, j]];
            da[i] += g;
            db[j] -= g;
        }
    }
    (da, db)
}

pub fn sinkhorn(p: &Distribution, q: &Distribution, cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    if p.len() != q.len() || cost.data.dim() != (p.len(), q.len()) {
        return Err(Error::Dimension(format!(
            "P has {} bins, Q has {}, cost is {:?}",
            p.len(),
            q.len(),
            cost.data.dim()
        )));
    }
    sinkhorn_raw(p.mass.view(), q.mass.view(), cost.data.view(), cfg)
}

/// Sinkhorn on bare marginals and cost.
pub fn sinkhorn_raw(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    c: ArrayView2<f64>,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    cfg.validate()?;
    let n = a.len();
    let m = b.len();
    ensure(n > 0 && m > 0, || "empty marginals".into())?;
    if c.dim() != (n, m) {
        return Err(Error::Dimension(format!("cost {:?} vs marginals ({n}, {m})", c.dim())));
    }
    if !c.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("cost matrix contains non-finite values".into()));
    }
    let state = if cfg.log_domain {
        StabilizedScaling::run(a, b, c, cfg)?
    } else {
        plain_scaling(a, b, c, cfg)?
    };
    finish(a, b, c, cfg.epsilon, cfg.tol, state)
}

struct ScalingOutcome {
    f: Array1<f64>,
    g: Array1<f64>,
    iterations: usize,
    marginal_err: f64,
}

fn column_error(plan_cols: &Array1<f64>, b: ArrayView1<f64>) -> f64 {
    plan_cols.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn plain_scaling(a: ArrayView1<f64>, b: ArrayView1<f64>, c: ArrayView2<f64>, cfg: &SinkhornConfig) -> Result<ScalingOutcome> {
    let eps = cfg.epsilon;
    let k = c.mapv(|x| (-x / eps).exp());
    let mut u = Array1::<f64>::ones(a.len());
    let mut v = Array1::<f64>::ones(b.len());
    let mut err = f64::INFINITY;
    let mut it = 0;
    while it < cfg.max_iter {
        it += 1;
        v = &b / &k.t().dot(&u);
        u = &a / &k.dot(&v);
        if !u.iter().chain(v.iter()).all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!(
                "scaling vectors became non-finite at iteration {it} (epsilon {eps} too small for plain scaling)"
            )));
        }
        err = column_error(&(&k.t().dot(&u) * &v), b);
        if err <= cfg.tol {
            break;
        }
    }
    Ok(ScalingOutcome {
        f: u.mapv(|x| eps * x.ln()),
        g: v.mapv(|x| eps * x.ln()),
        iterations: it,
        marginal_err: err,
    })
}

/// Log-domain potentials with scaling vectors absorbed whenever they drift
/// out of range. If the stabilised kernel still underflows a whole row or
/// column, that half-step falls back to an exact log-sum-exp update.
struct StabilizedScaling;

const ABSORB_BOUND: f64 = 1e30;

impl StabilizedScaling {
    fn kernel(c: ArrayView2<f64>, f: &Array1<f64>, g: &Array1<f64>, eps: f64) -> Array2<f64> {
        Array2::from_shape_fn(c.dim(), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / eps).exp())
    }

    fn lse_rows(c: ArrayView2<f64>, g: &Array1<f64>, a: ArrayView1<f64>, eps: f64) -> Array1<f64> {
        Array1::from_shape_fn(c.nrows(), |i| {
            if a[i] == 0.0 {
                return f64::NEG_INFINITY;
            }
            let mx = (0..c.ncols())
                .map(|j| (g[j] - c[[i, j]]) / eps)
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..c.ncols()).map(|j| ((g[j] - c[[i, j]]) / eps - mx).exp()).sum();
            eps * a[i].ln() - eps * (mx + s.ln())
        })
    }

    fn run(a: ArrayView1<f64>, b: ArrayView1<f64>, c: ArrayView2<f64>, cfg: &SinkhornConfig) -> Result<ScalingOutcome> {
        let eps = cfg.epsilon;
        let (n, m) = c.dim();
        // c-transform initialisation keeps every exponent non-positive.
        let mut f = Array1::from_shape_fn(n, |i| c.row(i).iter().cloned().fold(f64::INFINITY, f64::min));
        let mut g = Array1::from_shape_fn(m, |j| (0..n).map(|i| c[[i, j]] - f[i]).fold(f64::INFINITY, f64::min));
        let mut k = Self::kernel(c, &f, &g, eps);
        let mut u = Array1::<f64>::ones(n);
        let mut v = Array1::<f64>::ones(m);
        let mut err = f64::INFINITY;
        let mut it = 0;

        // Absorbed potentials may be -inf where a marginal is zero; keep
        // them finite for the kernel by tracking those bins separately.
        let finite = |x: f64| if x.is_finite() { x } else { -1e300 };

        while it < cfg.max_iter {
            it += 1;
            let ktu = k.t().dot(&u);
            if ktu.iter().zip(b).any(|(&s, &bj)| bj > 0.0 && !(s > 0.0 && s.is_finite())) {
                f = (&f + &u.mapv(|x| eps * x.ln())).mapv(finite);
                u.fill(1.0);
                g = Self::lse_rows(c.t(), &f, b, eps).mapv(finite);
                v.fill(1.0);
                k = Self::kernel(c, &f, &g, eps);
            } else {
                v = Array1::from_shape_fn(m, |j| if b[j] > 0.0 { b[j] / ktu[j] } else { 0.0 });
            }
            let kv = k.dot(&v);
            if kv.iter().zip(a).any(|(&s, &ai)| ai > 0.0 && !(s > 0.0 && s.is_finite())) {
                g = (&g + &v.mapv(|x| eps * x.ln())).mapv(finite);
                v.fill(1.0);
                f = Self::lse_rows(c, &g, a, eps).mapv(finite);
                u.fill(1.0);
                k = Self::kernel(c, &f, &g, eps);
            } else {
                u = Array1::from_shape_fn(n, |i| if a[i] > 0.0 { a[i] / kv[i] } else { 0.0 });
            }
            if u.iter().chain(v.iter()).any(|x| x.is_nan()) {
                return Err(Error::Numerical(format!("NaN in scaling vectors at iteration {it}")));
            }
            if u.iter().chain(v.iter()).any(|&x| x > ABSORB_BOUND || (x > 0.0 && x < 1.0 / ABSORB_BOUND)) {
                f = (&f + &u.mapv(|x| eps * x.ln())).mapv(finite);
                g = (&g + &v.mapv(|x| eps * x.ln())).mapv(finite);
                u.fill(1.0);
                v.fill(1.0);
                k = Self::kernel(c, &f, &g, eps);
                // Zero-mass bins are pinned by their zero scaling entries.
                for i in 0..n {
                    if a[i] == 0.0 {
                        u[i] = 0.0;
                    }
                }
                for j in 0..m {
                    if b[j] == 0.0 {
                        v[j] = 0.0;
                    }
                }
            }
            err = column_error(&(&k.t().dot(&u) * &v), b);
            if err <= cfg.tol {
                break;
            }
        }
        let f = &f + &u.mapv(|x| eps * x.ln());
        let g = &g + &v.mapv(|x| eps * x.ln());
        Ok(ScalingOutcome {
            f,
            g,
            iterations: it,
            marginal_err: err,
        })
    }
}

fn finish(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    c: ArrayView2<f64>,
    eps: f64,
    tol: f64,
    st: ScalingOutcome,
) -> Result<SinkhornResult> {
    let (n, m) = c.dim();
    let mut plan = Array2::zeros((n, m));
    let mut transport_cost = 0.0;
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..m {
            if a[i] == 0.0 || b[j] == 0.0 {
                continue;
            }
            let x = (st.f[i] + st.g[j] - c[[i, j]]) / eps;
            let p = x.exp();
            if p > 0.0 {
                plan[[i, j]] = p;
                transport_cost += p * c[[i, j]];
                kl += p * (x - a[i].ln() - b[j].ln());
            }
        }
    }
    let distance = transport_cost + eps * kl;
    if !distance.is_finite() {
        return Err(Error::Numerical("transport value is not finite".into()));
    }
    Ok(SinkhornResult {
        distance,
        transport_cost,
        plan: TransportPlan {
            plan,
            marginal_err: st.marginal_err,
        },
        iterations: st.iterations,
        converged: st.marginal_err <= tol,
        f: st.f,
        g: st.g,
        epsilon: eps,
    })
}

/// Exact optimal transport cost by successive shortest paths on the
/// bipartite transport network. Limited to [`ORACLE_LIMIT`] bins.
pub fn exact_emd_oracle(p: &Distribution, q: &Distribution, cost: &CostMatrix) -> Result<f64> {
    exact_emd_raw(p.mass.view(), q.mass.view(), cost.data.view())
}

pub fn exact_emd_raw(a: ArrayView1<f64>, b: ArrayView1<f64>, c: ArrayView2<f64>) -> Result<f64> {
    let n = a.len();
    let m = b.len();
    if n.max(m) > ORACLE_LIMIT {
        return Err(Error::Guard {
            n: n.max(m),
            limit: ORACLE_LIMIT,
        });
    }
    if c.dim() != (n, m) {
        return Err(Error::Dimension(format!("cost {:?} vs marginals ({n}, {m})", c.dim())));
    }
    ensure((a.sum() - b.sum()).abs() <= 1e-9, || "marginals carry different total mass".into())?;

    // Nodes: 0 source, 1..=n rows, n+1..=n+m columns, n+m+1 sink.
    let nodes = n + m + 2;
    let sink = nodes - 1;
    // (from, to, residual capacity, cost); edge e^1 is the reverse of e.
    let mut edges: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut add = |from: usize, to: usize, cap: f64, cost: f64| {
        edges.push((from, to, cap, cost));
        edges.push((to, from, 0.0, -cost));
    };
    for i in 0..n {
        add(0, 1 + i, a[i], 0.0);
    }
    for j in 0..m {
        add(1 + n + j, sink, b[j], 0.0);
    }
    let big = a.sum() + 1.0;
    for i in 0..n {
        for j in 0..m {
            add(1 + i, 1 + n + j, big, c[[i, j]]);
        }
    }
    const CAP_EPS: f64 = 1e-15;
    let mut total = 0.0;
    let mut remaining = a.sum();
    while remaining > CAP_EPS {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        dist[0] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for (e, &(from, to, cap, cost)) in edges.iter().enumerate() {
                if cap > CAP_EPS && dist[from] + cost < dist[to] - 1e-15 {
                    dist[to] = dist[from] + cost;
                    prev[to] = e;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        let mut push = remaining;
        let mut node = sink;
        while node != 0 {
            let e = prev[node];
            push = push.min(edges[e].2);
            node = edges[e].0;
        }
        let mut node = sink;
        while node != 0 {
            let e = prev[node];
            edges[e].2 -= push;
            edges[e ^ 1].2 += push;
            node = edges[e].0;
        }
        total += push * dist[sink];
        remaining -= push;
    }
    Ok(total)
}
