use numkit::{finite_diff_gradient, max_relative_error, Graph, ParamSet, RealArray, Result, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

pub fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> RealArray {
    let n = shape.iter().product();
    RealArray::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Reduces an arbitrary output to a scalar through a fixed random projection so
/// every output coordinate contributes to the gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_array(&mut rng, &shape, -1.0, 1.0));
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

fn check<F>(errs: &mut Vec<(&'static str, f64)>, name: &'static str, params: &ParamSet, build: F)
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let loss = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, p)?;
        let l = project(&mut g, out, 99)?;
        Ok(g.scalar(l))
    };
    let mut g = Graph::new();
    let out = build(&mut g, params).unwrap();
    let l = project(&mut g, out, 99).unwrap();
    let analytic = g.backward(l).unwrap();
    let numeric = finite_diff_gradient(loss, params, H).unwrap();
    errs.push((name, max_relative_error(&analytic, &numeric)));
}

pub fn pset(entries: Vec<(&str, RealArray)>) -> ParamSet {
    entries
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

/// Max relative error between tape and finite-difference gradients for every
/// op, at random points drawn from `seed`.
pub fn op_sweep(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = pset(vec![
        ("x", rand_array(&mut rng, &[4, 6], -1.5, 1.5)),
        ("w", rand_array(&mut rng, &[6, 3], -1.0, 1.0)),
        ("b", rand_array(&mut rng, &[3], -1.0, 1.0)),
    ]);
    check(&mut out, "affine", &p, |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        g.affine(x, w, Some(b))
    });

    let p = pset(vec![("table", rand_array(&mut rng, &[5, 4], -1.0, 1.0))]);
    check(&mut out, "embedding", &p, |g, p| {
        let t = g.param(p, "table")?;
        g.embedding(t, &[3, 0, 3, 4])
    });

    let p = pset(vec![
        ("q", rand_array(&mut rng, &[5, 4], -1.0, 1.0)),
        ("k", rand_array(&mut rng, &[5, 4], -1.0, 1.0)),
        ("v", rand_array(&mut rng, &[5, 4], -1.0, 1.0)),
    ]);
    check(&mut out, "causal_attention", &p, |g, p| {
        let (q, k, v) = (g.param(p, "q")?, g.param(p, "k")?, g.param(p, "v")?);
        g.causal_attention(q, k, v, 2)
    });

    let p = pset(vec![
        ("x", rand_array(&mut rng, &[3, 5], -2.0, 2.0)),
        ("gamma", rand_array(&mut rng, &[5], 0.5, 1.5)),
        ("beta", rand_array(&mut rng, &[5], -0.5, 0.5)),
    ]);
    check(&mut out, "layer_norm", &p, |g, p| {
        let (x, ga, be) = (g.param(p, "x")?, g.param(p, "gamma")?, g.param(p, "beta")?);
        g.layer_norm(x, ga, be)
    });

    let p = pset(vec![("x", rand_array(&mut rng, &[3, 4], -2.0, 2.0))]);
    check(&mut out, "softmax", &p, |g, p| {
        let x = g.param(p, "x")?;
        g.softmax(x)
    });
    check(&mut out, "log_softmax", &p, |g, p| {
        let x = g.param(p, "x")?;
        g.log_softmax(x)
    });
    check(&mut out, "exp", &p, |g, p| {
        let x = g.param(p, "x")?;
        g.exp(x)
    });
    check(&mut out, "log_sigmoid", &p, |g, p| {
        let x = g.param(p, "x")?;
        g.log_sigmoid(x)
    });
    check(
        &mut out,
        "row_sum/mean/scale/offset/reshape/rows",
        &p,
        |g, p| {
            let x = g.param(p, "x")?;
            let r = g.rows(x, 1, 2)?;
            let s = g.row_sum(r)?;
            let m = g.mean(x)?;
            let sc = g.scale(s, -1.7)?;
            let o = g.offset(sc, 0.3)?;
            let re = g.reshape(o, &[2, 1])?;
            let flat = g.reshape(re, &[2])?;
            let ms = g.sum(flat)?;
            g.mul(ms, m)
        },
    );

    let p = pset(vec![("x", rand_array(&mut rng, &[6], 0.2, 3.0))]);
    check(&mut out, "log", &p, |g, p| {
        let x = g.param(p, "x")?;
        g.log(x)
    });

    // Kinked ops: keep sample points away from the kinks.
    let away = |rng: &mut ChaCha8Rng, n: usize, kink: f64| -> RealArray {
        let v = (0..n)
            .map(|_| {
                let mag = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) {
                    kink + mag
                } else {
                    kink - mag
                }
            })
            .collect();
        RealArray::vector(v).unwrap()
    };
    let p = pset(vec![("x", away(&mut rng, 8, 0.0))]);
    check(&mut out, "relu", &p, |g, p| {
        let x = g.param(p, "x")?;
        g.relu(x)
    });
    let p = pset(vec![("x", away(&mut rng, 8, 1.0))]);
    check(&mut out, "clip", &p, |g, p| {
        let x = g.param(p, "x")?;
        g.clip(x, 0.8, 1.2)
    });
    let a = rand_array(&mut rng, &[8], -1.0, 1.0);
    let shift = away(&mut rng, 8, 0.0);
    let b = RealArray::vector(
        a.data()
            .iter()
            .zip(shift.data())
            .map(|(x, s)| x + s)
            .collect(),
    )
    .unwrap();
    let p = pset(vec![("a", a), ("b", b)]);
    check(&mut out, "min", &p, |g, p| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        g.min(a, b)
    });
    check(&mut out, "add/sub/mul", &p, |g, p| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        let s = g.add(a, b)?;
        let d = g.sub(a, b)?;
        g.mul(s, d)
    });
    check(&mut out, "mse", &p, |g, p| {
        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
        g.mse(a, b)
    });

    let p = pset(vec![("x", rand_array(&mut rng, &[4, 5], -1.0, 1.0))]);
    check(&mut out, "select", &p, |g, p| {
        let x = g.param(p, "x")?;
        g.select(x, &[4, 0, 2, 2])
    });
    out
}
