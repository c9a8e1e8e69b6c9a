//! Central finite-difference checks of every differentiable graph op.
//!
//! Each case draws random inputs, reduces the op's output to a scalar through
//! a fixed random projection, and compares `backward()` with
//! `(f(x + h) - f(x - h)) / 2h` element by element.

use rand::Rng;
use semcom::rng::{seeded, SimRng};
use semcom::tensor::{Graph, Tensor, Var};
use semcom::Result;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that gradients that are zero up to rounding do not
/// blow up the relative error.
const FLOOR: f64 = 1e-6;

type Forward = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub forward: Forward,
}

pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    rand_tensor(shape, rng).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

fn loss(case: &Case, proj: &Tensor, inputs: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.forward)(&mut g, &vars)?;
    let p = g.constant(proj.clone());
    let weighted = g.mul(out, p)?;
    let l = g.sum(weighted);
    Ok((g, vars, l))
}

/// Largest elementwise relative error over all inputs of one case.
pub fn check_case(case: &Case, rng: &mut impl Rng) -> Result<f64> {
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = (case.forward)(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let proj = rand_tensor(&shape, rng);
    let (mut g, vars, l) = loss(case, &proj, &case.inputs)?;
    g.backward(l)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[k] += H;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[k] -= H;
            let (gp, _, lp) = loss(case, &proj, &plus)?;
            let (gm, _, lm) = loss(case, &proj, &minus)?;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * H);
            let a = analytic[i][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn dims(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Random instance generators, one per op.
pub fn generators() -> Vec<(&'static str, fn(&mut SimRng) -> Case)> {
    vec![
        ("add", |r| {
            let s = [dims(r, 1, 3), dims(r, 2, 5)];
            Case { inputs: vec![rand_tensor(&s, r), rand_tensor(&s, r)], forward: Box::new(|g, v| g.add(v[0], v[1])) }
        }),
        ("sub", |r| {
            let s = [dims(r, 1, 3), dims(r, 2, 5)];
            Case { inputs: vec![rand_tensor(&s, r), rand_tensor(&s, r)], forward: Box::new(|g, v| g.sub(v[0], v[1])) }
        }),
        ("mul", |r| {
            let s = [dims(r, 1, 3), dims(r, 2, 5)];
            Case { inputs: vec![rand_tensor(&s, r), rand_tensor(&s, r)], forward: Box::new(|g, v| g.mul(v[0], v[1])) }
        }),
        ("scale", |r| {
            let s = r.gen_range(-2.0..2.0);
            Case { inputs: vec![rand_tensor(&[dims(r, 2, 7)], r)], forward: Box::new(move |g, v| Ok(g.scale(v[0], s))) }
        }),
        ("add_scalar", |r| {
            let s = r.gen_range(-2.0..2.0);
            Case { inputs: vec![rand_tensor(&[dims(r, 2, 7)], r)], forward: Box::new(move |g, v| Ok(g.add_scalar(v[0], s))) }
        }),
        ("relu", |r| Case { inputs: vec![away_from_zero(&[dims(r, 3, 9)], r)], forward: Box::new(|g, v| Ok(g.relu(v[0]))) }),
        ("silu", |r| Case { inputs: vec![rand_tensor(&[dims(r, 3, 9)], r).map(|x| 3.0 * x)], forward: Box::new(|g, v| Ok(g.silu(v[0]))) }),
        ("tanh", |r| Case { inputs: vec![rand_tensor(&[dims(r, 3, 9)], r).map(|x| 2.0 * x)], forward: Box::new(|g, v| Ok(g.tanh(v[0]))) }),
        ("matmul", |r| {
            let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 4));
            Case { inputs: vec![rand_tensor(&[m, k], r), rand_tensor(&[k, n], r)], forward: Box::new(|g, v| g.matmul(v[0], v[1])) }
        }),
        ("add_bias", |r| {
            let n = dims(r, 1, 4);
            let s = [dims(r, 1, 3), dims(r, 1, 3), n];
            Case { inputs: vec![rand_tensor(&s, r), rand_tensor(&[n], r)], forward: Box::new(|g, v| g.add_bias(v[0], v[1])) }
        }),
        ("conv2d", |r| {
            let (b, c, o) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3));
            let k = [1, 3][r.gen_range(0..2)];
            let stride = dims(r, 1, 2);
            let pad = if k == 3 { dims(r, 0, 1) } else { 0 };
            let hw = dims(r, 3, 6);
            let with_bias = r.gen_bool(0.5);
            let mut inputs = vec![rand_tensor(&[b, c, hw, hw], r), rand_tensor(&[o, c, k, k], r)];
            if with_bias {
                inputs.push(rand_tensor(&[o], r));
            }
            Case {
                inputs,
                forward: Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)),
            }
        }),
        ("group_norm", |r| {
            let groups = dims(r, 1, 2);
            let c = groups * dims(r, 1, 2);
            let s = [dims(r, 1, 2), c, dims(r, 2, 3), dims(r, 2, 3)];
            Case {
                inputs: vec![rand_tensor(&s, r), rand_tensor(&[c], r), rand_tensor(&[c], r)],
                forward: Box::new(move |g, v| g.group_norm(v[0], Some(v[1]), Some(v[2]), groups, 1e-5)),
            }
        }),
        ("film", |r| {
            let (b, c) = (dims(r, 1, 2), dims(r, 1, 3));
            let s = [b, c, dims(r, 1, 3), dims(r, 1, 3)];
            Case {
                inputs: vec![rand_tensor(&s, r), rand_tensor(&[b, c], r), rand_tensor(&[b, c], r)],
                forward: Box::new(|g, v| g.film(v[0], v[1], v[2])),
            }
        }),
        ("avg_pool2d", |r| {
            let k = dims(r, 1, 2);
            let s = [dims(r, 1, 2), dims(r, 1, 2), k * dims(r, 1, 3), k * dims(r, 1, 3)];
            Case { inputs: vec![rand_tensor(&s, r)], forward: Box::new(move |g, v| g.avg_pool2d(v[0], k)) }
        }),
        ("upsample_nearest2d", |r| {
            let f = dims(r, 1, 3);
            let s = [dims(r, 1, 2), dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3)];
            Case { inputs: vec![rand_tensor(&s, r)], forward: Box::new(move |g, v| g.upsample_nearest2d(v[0], f)) }
        }),
        ("reshape", |r| {
            let (a, b) = (dims(r, 1, 4), dims(r, 1, 4));
            Case { inputs: vec![rand_tensor(&[a, b], r)], forward: Box::new(move |g, v| g.reshape(v[0], &[b, a])) }
        }),
        ("permute", |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)];
            let mut axes = [0, 1, 2];
            axes.swap(0, r.gen_range(0..3));
            axes.swap(1, r.gen_range(1..3));
            Case { inputs: vec![rand_tensor(&s, r)], forward: Box::new(move |g, v| g.permute(v[0], &axes)) }
        }),
        ("concat", |r| {
            let axis = r.gen_range(0..3);
            let mut s1 = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)];
            let mut s2 = s1;
            s2[axis] = dims(r, 1, 3);
            s1[axis] = dims(r, 1, 3);
            Case {
                inputs: vec![rand_tensor(&s1, r), rand_tensor(&s2, r)],
                forward: Box::new(move |g, v| g.concat(&[v[0], v[1]], axis)),
            }
        }),
        ("gather_rows", |r| {
            let (n, d) = (dims(r, 2, 5), dims(r, 1, 4));
            let rows: Vec<usize> = (0..dims(r, 1, 6)).map(|_| r.gen_range(0..n)).collect();
            Case { inputs: vec![rand_tensor(&[n, d], r)], forward: Box::new(move |g, v| g.gather_rows(v[0], &rows)) }
        }),
        ("straight_through", |r| {
            let shift = r.gen_range(-0.5..0.5);
            Case {
                inputs: vec![rand_tensor(&[dims(r, 2, 6)], r)],
                forward: Box::new(move |g, v| {
                    // The estimator is only a true derivative when the substituted
                    // value moves with x, so substitute a shifted copy.
                    let value = g.value(v[0]).map(|x| x + shift);
                    let st = g.straight_through(v[0], value)?;
                    let sq = g.mul(v[0], v[0])?;
                    g.mul(st, sq)
                }),
            }
        }),
        ("mse", |r| {
            let s = [dims(r, 1, 3), dims(r, 2, 4)];
            Case { inputs: vec![rand_tensor(&s, r), rand_tensor(&s, r)], forward: Box::new(|g, v| g.mse(v[0], v[1])) }
        }),
        ("sum", |r| Case { inputs: vec![rand_tensor(&[dims(r, 1, 4), dims(r, 1, 4)], r)], forward: Box::new(|g, v| Ok(g.sum(v[0]))) }),
        ("mean", |r| Case { inputs: vec![rand_tensor(&[dims(r, 1, 4), dims(r, 1, 4)], r)], forward: Box::new(|g, v| Ok(g.mean(v[0]))) }),
    ]
}

/// Runs `instances` random cases of every op.
pub fn run_suite(instances: usize, seed: u64) -> Vec<OpReport> {
    generators()
        .into_iter()
        .enumerate()
        .map(|(i, (op, make))| {
            let mut rng = seeded(seed.wrapping_add(i as u64));
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let case = make(&mut rng);
                let err = check_case(&case, &mut rng).unwrap_or(f64::INFINITY);
                worst = worst.max(err);
            }
            OpReport { op, instances, max_rel_err: worst }
        })
        .collect()
}
