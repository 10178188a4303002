//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, NodeId, ParamStore, Shape};
use crate::error::Result;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    /// `max |analytic - numeric| / max |numeric|`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Something whose value can be perturbed for a finite-difference probe.
#[derive(Debug, Clone, Copy)]
pub enum Wrt {
    Input(NodeId),
    Param(usize),
}

/// Compares backprop gradients of the scalar `output` against central differences for every
/// element of every `wrt` target. All inputs must already be bound.
pub fn check_graph(
    graph: &mut Graph,
    store: &mut ParamStore,
    output: NodeId,
    wrt: &[Wrt],
    h: f64,
) -> Result<(f64, f64, usize)> {
    graph.forward(store)?;
    store.zero_grad();
    graph.backward(output, store)?;
    let mut analytic = Vec::new();
    for w in wrt {
        match *w {
            Wrt::Input(id) => analytic.push(graph.grad(id).to_vec()),
            Wrt::Param(b) => analytic.push(store.block(b).grad.clone()),
        }
    }
    let mut max_abs = 0.0f64;
    let mut max_fd = 0.0f64;
    let mut checked = 0;
    for (w, a) in wrt.iter().zip(&analytic) {
        let base = match *w {
            Wrt::Input(id) => graph.value(id).to_vec(),
            Wrt::Param(b) => store.block(b).value.clone(),
        };
        for (e, &ga) in a.iter().enumerate() {
            let eval = |v: f64, graph: &mut Graph, store: &mut ParamStore| -> Result<f64> {
                match *w {
                    Wrt::Input(id) => {
                        let mut x = base.clone();
                        x[e] = v;
                        graph.set_input(id, &x)?;
                    }
                    Wrt::Param(b) => store.block_mut(b).value[e] = v,
                }
                graph.forward(store)?;
                Ok(graph.scalar(output))
            };
            let fp = eval(base[e] + h, graph, store)?;
            let fm = eval(base[e] - h, graph, store)?;
            eval(base[e], graph, store)?;
            let fd = (fp - fm) / (2.0 * h);
            max_abs = max_abs.max((ga - fd).abs());
            max_fd = max_fd.max(fd.abs());
            checked += 1;
        }
    }
    let rel = max_abs / max_fd.max(1e-12);
    Ok((rel, max_abs, checked))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero (for kinks and divisions).
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Displacements whose sample points stay at least `margin` away from every cell face.
pub fn displacement_off_faces(rng: &mut ChaCha8Rng, dims: [usize; 3], amplitude: f64, margin: f64) -> Vec<f64> {
    let n = dims[0] * dims[1] * dims[2];
    let mut out = vec![0.0; 3 * n];
    for c in 0..3 {
        for idx in 0..n {
            let coord = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])][c] as f64;
            let hi = dims[c] as f64 - 1.0;
            loop {
                let u: f64 = rng.random_range(-amplitude..amplitude);
                let p = coord + u;
                let frac = p - p.floor();
                let inside = p > margin && p < hi - margin;
                if inside && frac > margin && frac < 1.0 - margin {
                    out[c * n + idx] = u;
                    break;
                }
            }
        }
    }
    out
}

struct Case {
    name: &'static str,
    graph: Graph,
    store: ParamStore,
    output: NodeId,
    wrt: Vec<Wrt>,
}

fn weighted_sum(g: &mut Graph, rng: &mut ChaCha8Rng, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).clone();
    let r = g.constant(shape.clone(), uniform(rng, shape.numel(), -1.0, 1.0))?;
    let p = g.mul(x, r)?;
    g.sum(p)
}

fn input(g: &mut Graph, shape: Shape, data: &[f64]) -> Result<NodeId> {
    let id = g.input(shape, true);
    g.set_input(id, data)?;
    Ok(id)
}

fn build_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = [4usize, 4, 4];
    let n = 64;
    let mut cases = Vec::new();

    macro_rules! case {
        ($name:expr, |$g:ident, $s:ident, $r:ident| $body:block) => {{
            let mut $g = Graph::new();
            #[allow(unused_mut)]
            let mut $s = ParamStore::new();
            let $r = &mut rng;
            let (y, wrt): (NodeId, Vec<Wrt>) = $body;
            let output = weighted_sum(&mut $g, $r, y)?;
            cases.push(Case { name: $name, graph: $g, store: $s, output, wrt });
        }};
    }

    case!("conv3d", |g, s, r| {
        let x = input(&mut g, Shape::volume(2, d), &uniform(r, 2 * n, -1.0, 1.0))?;
        let wb = s.add("w", &[3, 2, 3, 3, 3], uniform(r, 3 * 2 * 27, -0.5, 0.5))?;
        let w = g.param(&s, wb)?;
        (g.conv3d(x, w)?, vec![Wrt::Input(x), Wrt::Param(wb)])
    });
    case!("bias_add", |g, s, r| {
        let x = input(&mut g, Shape::volume(2, d), &uniform(r, 2 * n, -1.0, 1.0))?;
        let bb = s.add("b", &[2], uniform(r, 2, -1.0, 1.0))?;
        let b = g.param(&s, bb)?;
        (g.bias_add(x, b)?, vec![Wrt::Input(x), Wrt::Param(bb)])
    });
    case!("leaky_relu", |g, s, r| {
        let x = input(&mut g, Shape::volume(2, d), &away_from_zero(r, 2 * n))?;
        let _ = &s;
        (g.leaky_relu(x, 0.2)?, vec![Wrt::Input(x)])
    });
    case!("max_pool2", |g, s, r| {
        // distinct values so the winner is stable under a 1e-4 probe
        let mut v: Vec<f64> = (0..2 * n).map(|i| i as f64 * 0.01).collect();
        for i in (1..v.len()).rev() {
            let j = r.random_range(0..=i);
            v.swap(i, j);
        }
        let x = input(&mut g, Shape::volume(2, d), &v)?;
        let _ = &s;
        (g.max_pool2(x)?, vec![Wrt::Input(x)])
    });
    case!("upsample2", |g, s, r| {
        let x = input(&mut g, Shape::volume(2, [2, 3, 2]), &uniform(r, 24, -1.0, 1.0))?;
        let _ = &s;
        (g.upsample2(x)?, vec![Wrt::Input(x)])
    });
    case!("concat", |g, s, r| {
        let a = input(&mut g, Shape::volume(1, d), &uniform(r, n, -1.0, 1.0))?;
        let b = input(&mut g, Shape::volume(2, d), &uniform(r, 2 * n, -1.0, 1.0))?;
        let _ = &s;
        (g.concat(a, b)?, vec![Wrt::Input(a), Wrt::Input(b)])
    });
    case!("add_broadcast", |g, s, r| {
        let a = input(&mut g, Shape::volume(3, d), &uniform(r, 3 * n, -1.0, 1.0))?;
        let b = input(&mut g, Shape::volume(1, d), &uniform(r, n, -1.0, 1.0))?;
        let _ = &s;
        (g.add(a, b)?, vec![Wrt::Input(a), Wrt::Input(b)])
    });
    case!("sub_scalar", |g, s, r| {
        let a = input(&mut g, Shape::scalar(), &uniform(r, 1, -1.0, 1.0))?;
        let b = input(&mut g, Shape::volume(2, d), &uniform(r, 2 * n, -1.0, 1.0))?;
        let _ = &s;
        (g.sub(a, b)?, vec![Wrt::Input(a), Wrt::Input(b)])
    });
    case!("mul", |g, s, r| {
        let a = input(&mut g, Shape::volume(2, d), &uniform(r, 2 * n, -1.0, 1.0))?;
        let b = input(&mut g, Shape::volume(2, d), &uniform(r, 2 * n, -1.0, 1.0))?;
        let _ = &s;
        (g.mul(a, b)?, vec![Wrt::Input(a), Wrt::Input(b)])
    });
    case!("mul_self", |g, s, r| {
        let a = input(&mut g, Shape::volume(1, d), &uniform(r, n, -1.0, 1.0))?;
        let _ = &s;
        (g.mul(a, a)?, vec![Wrt::Input(a)])
    });
    case!("div", |g, s, r| {
        let a = input(&mut g, Shape::volume(2, d), &uniform(r, 2 * n, -1.0, 1.0))?;
        let b = input(&mut g, Shape::scalar(), &away_from_zero(r, 1))?;
        let _ = &s;
        (g.div(a, b)?, vec![Wrt::Input(a), Wrt::Input(b)])
    });
    case!("affine", |g, s, r| {
        let a = input(&mut g, Shape::volume(1, d), &uniform(r, n, -1.0, 1.0))?;
        let _ = &s;
        (g.affine(a, -1.7, 0.3)?, vec![Wrt::Input(a)])
    });
    case!("mean", |g, s, r| {
        let a = input(&mut g, Shape::volume(2, d), &uniform(r, 2 * n, -1.0, 1.0))?;
        let _ = &s;
        (g.mean(a)?, vec![Wrt::Input(a)])
    });
    case!("square", |g, s, r| {
        let a = input(&mut g, Shape::volume(1, d), &uniform(r, n, -1.0, 1.0))?;
        let _ = &s;
        (g.square(a)?, vec![Wrt::Input(a)])
    });
    case!("sqrt", |g, s, r| {
        let a = input(&mut g, Shape::volume(1, d), &uniform(r, n, 0.2, 2.0))?;
        let _ = &s;
        (g.sqrt(a)?, vec![Wrt::Input(a)])
    });
    case!("grid_sample", |g, s, r| {
        let img = input(&mut g, Shape::volume(1, d), &uniform(r, n, -1.0, 1.0))?;
        let disp = displacement_off_faces(r, d, 1.5, 0.01);
        let u = input(&mut g, Shape::volume(3, d), &disp)?;
        let _ = &s;
        (g.grid_sample(img, u)?, vec![Wrt::Input(img), Wrt::Input(u)])
    });
    case!("field_gradient", |g, s, r| {
        let u = input(&mut g, Shape::volume(3, d), &uniform(r, 3 * n, -1.0, 1.0))?;
        let _ = &s;
        (g.field_gradient(u)?, vec![Wrt::Input(u)])
    });
    case!("masked_mean", |g, s, r| {
        let x = input(&mut g, Shape::volume(1, d), &uniform(r, n, -1.0, 1.0))?;
        let m: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let mask = g.constant(Shape::volume(1, d), m)?;
        let _ = &s;
        (g.masked_mean(x, mask)?, vec![Wrt::Input(x)])
    });
    Ok(cases)
}

/// Names of the ops covered by [`op_suite`].
pub fn op_names() -> Vec<&'static str> {
    build_cases(0).map(|c| c.into_iter().map(|c| c.name).collect()).unwrap_or_default()
}

/// Finite-difference check of every primitive op on small random tensors.
pub fn op_suite(seed: u64, h: f64, tolerance: f64) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    for mut c in build_cases(seed)? {
        let (rel, abs, checked) = check_graph(&mut c.graph, &mut c.store, c.output, &c.wrt, h)?;
        out.push(GradCheckResult {
            name: c.name.to_string(),
            max_rel_error: rel,
            max_abs_error: abs,
            checked,
            tolerance,
            passed: rel <= tolerance,
        });
    }
    Ok(out)
}
